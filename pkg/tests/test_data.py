import gzip
import struct

import numpy as np
import pytest
import yaml

from flowaug.checkpoint import (ChecksumError, DescriptorMismatchError, VersionMismatchError,
                                load_checkpoint, read_checkpoint, save_checkpoint)
from flowaug.classify import LeNet, MLP
from flowaug.config import (ConfigError, ExperimentConfig, FlowSpec, PhaseSpec, dump_config, from_dict,
                            load_config, validate)
from flowaug.attacks import PerturbationSpec
from flowaug.data import (DataError, DatasetHandle, load_idx_pair, make_synthetic, parse_idx, read_idx,
                          stratified_counts, subset, write_idx)
from flowaug.flow import build_flow, flow_forward

from helpers import random_flow


def _idx_bytes(magic_dims, payload):
    return struct.pack(">I", magic_dims[0]) + struct.pack(f">{len(magic_dims) - 1}I", *magic_dims[1:]) + payload


def test_idx_header_arithmetic(tmp_path):
    raw = bytes([0, 0, 8, 3]) + struct.pack(">3I", 10, 28, 28) + bytes(range(256)) * 30 + bytes(10 * 784 - 7680)
    images = parse_idx(raw)
    assert images.shape == (10, 28, 28)
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lab", np.arange(10, dtype=np.uint8))
    data = load_idx_pair(tmp_path / "img", tmp_path / "lab", 10, "train")
    assert data.x.shape == (10, 784)
    assert data.x.max() == 1.0 and data.x[0, 1] == pytest.approx(1 / 255)
    assert data.image_shape == (1, 28, 28)


def test_idx_gzip(tmp_path):
    labels = np.array([1, 2, 3], dtype=np.uint8)
    write_idx(tmp_path / "lab", labels)
    (tmp_path / "lab.gz").write_bytes(gzip.compress((tmp_path / "lab").read_bytes()))
    np.testing.assert_array_equal(read_idx(tmp_path / "lab.gz"), labels)


def test_idx_bad_magic_cites_offset():
    raw = _idx_bytes((0x00000903, 1), b"\x00")
    with pytest.raises(DataError, match="offset 0"):
        parse_idx(raw)


def test_idx_truncation_reports_lengths():
    raw = _idx_bytes((0x00000801, 5), b"\x00\x01\x02")
    with pytest.raises(DataError, match="expected 13 bytes, got 11"):
        parse_idx(raw)
    with pytest.raises(DataError, match="truncated header"):
        parse_idx(b"\x00\x00")


def test_idx_label_range(tmp_path):
    write_idx(tmp_path / "img", np.zeros((2, 4, 4)))
    write_idx(tmp_path / "lab", np.array([3, 10]))
    with pytest.raises(DataError, match="label 10 out of range"):
        load_idx_pair(tmp_path / "img", tmp_path / "lab", 10, "train")


def test_synthetic_is_deterministic():
    a = make_synthetic("gaussian_mixture_2", 100, 7)
    b = make_synthetic("gaussian_mixture_2", 100, 7)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert a.n_classes == 2 and a.x.min() >= 0 and a.x.max() <= 1
    test = make_synthetic("gaussian_mixture_2", 100, 7, split="test")
    assert not np.array_equal(a.x, test.x)


@pytest.mark.parametrize("name,k", [("two_arcs", 2), ("rings_3", 3), ("gaussian_mixture_4", 4)])
def test_generators(name, k):
    d = make_synthetic(name, 120, 0)
    assert d.n_classes == k and set(d.y.tolist()) == set(range(k))


def test_handle_validation():
    with pytest.raises(DataError):
        DatasetHandle(np.zeros((0, 2)), np.zeros(0), "train", 2)
    with pytest.raises(DataError):
        DatasetHandle(np.full((1, 2), 1.5), [0], "train", 2)
    with pytest.raises(DataError):
        DatasetHandle(np.zeros((1, 2)), [2], "train", 2)
    with pytest.raises(DataError):
        make_synthetic("moons", 10, 0)


def _balanced(n=1000, k=10, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(k), n // k)
    return DatasetHandle(rng.uniform(0, 1, (n, 3)), y, "train", k)


def test_subset_stratification():
    d = _balanced()
    s = subset(d, 0.05, 0)
    assert len(s) == 50
    np.testing.assert_array_equal(np.bincount(s.y), np.full(10, 5))
    assert subset(d, 1.0, 0) is d


def test_subset_determinism_and_order():
    d = _balanced()
    a, b = subset(d, 0.05, 3), subset(d, 0.05, 3)
    np.testing.assert_array_equal(a.x, b.x)
    rows = [np.flatnonzero((d.x == r).all(1))[0] for r in a.x]
    assert rows == sorted(rows)
    assert not np.array_equal(subset(d, 0.05, 4).x, a.x)


def test_subset_commutes_with_source_shuffle():
    d = _balanced()
    perm = np.random.default_rng(1).permutation(len(d))
    shuffled = DatasetHandle(d.x[perm], d.y[perm], "train", 10)
    a, b = subset(d, 0.05, 2), subset(shuffled, 0.05, 2)
    key = lambda s: sorted(map(bytes, s.x))
    assert key(a) == key(b)


def test_subset_too_small_is_error():
    with pytest.raises(DataError, match="class without samples"):
        subset(_balanced(), 0.005, 0)
    with pytest.raises(DataError):
        subset(_balanced(), 0.0, 0)


def test_stratified_counts_largest_remainder():
    np.testing.assert_array_equal(stratified_counts(np.array([5, 3, 2]), 5), [3, 1, 1])
    assert stratified_counts(np.array([7, 7, 7]), 10).sum() == 10


def test_flow_checkpoint_round_trip(tmp_path):
    model = random_flow(4, blocks=3, seed=0, hidden=8, actnorm=True, invlinear=True)
    model.initialize(np.random.default_rng(0).standard_normal((20, 4)))
    save_checkpoint(model, tmp_path / "f.ckpt")
    back = load_checkpoint(tmp_path / "f.ckpt", expect=model.describe())
    for a, b in zip(model.params(), back.params()):
        assert a.data.tobytes() == b.data.tobytes()
    x = np.random.default_rng(1).standard_normal((5, 4))
    assert np.array_equal(flow_forward(model, x)[0].data, flow_forward(back, x)[0].data)


def test_classifier_checkpoint_round_trip(tmp_path):
    for clf in (MLP(3, 2, hidden=(5,), seed=1), LeNet((1, 12, 12), 3, channels=(2, 2), fc=(4,), seed=1)):
        save_checkpoint(clf, tmp_path / "c.ckpt")
        back = load_checkpoint(tmp_path / "c.ckpt")
        assert back.describe() == clf.describe()
        for a, b in zip(clf.params(), back.params()):
            assert a.data.tobytes() == b.data.tobytes()


def test_float32_checkpoint_keeps_precision(tmp_path):
    model = build_flow(2, blocks=1, hidden=4, dtype=np.float32)
    save_checkpoint(model, tmp_path / "f.ckpt")
    header, _ = read_checkpoint(tmp_path / "f.ckpt")
    assert header["precision"] == "f32"
    assert load_checkpoint(tmp_path / "f.ckpt").params()[0].dtype == np.float32


def test_checkpoint_layout(tmp_path):
    save_checkpoint(build_flow(2, blocks=1, hidden=4), tmp_path / "f.ckpt")
    raw = (tmp_path / "f.ckpt").read_bytes()
    assert raw[:8] == b"FLOWAUG\x00"
    assert struct.unpack("<HH", raw[8:12]) == (1, 0)


def test_truncated_checkpoint_is_checksum_error(tmp_path):
    save_checkpoint(build_flow(2, blocks=2, hidden=4), tmp_path / "f.ckpt")
    raw = (tmp_path / "f.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-20])
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "t.ckpt")
    flipped = bytearray(raw)
    flipped[-10] ^= 0xFF
    (tmp_path / "c.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "c.ckpt")


def test_version_mismatch_names_both_versions(tmp_path):
    save_checkpoint(build_flow(2, blocks=1, hidden=4), tmp_path / "f.ckpt", version=(2, 3))
    with pytest.raises(VersionMismatchError, match=r"2\.3.*1\.0"):
        load_checkpoint(tmp_path / "f.ckpt")
    save_checkpoint(build_flow(2, blocks=1, hidden=4), tmp_path / "g.ckpt", version=(1, 7))
    load_checkpoint(tmp_path / "g.ckpt")


def test_descriptor_mismatch_twelve_vs_eleven_blocks(tmp_path):
    save_checkpoint(build_flow(4, blocks=12, hidden=8), tmp_path / "f.ckpt")
    with pytest.raises(DescriptorMismatchError, match="layers"):
        load_checkpoint(tmp_path / "f.ckpt", expect=build_flow(4, blocks=11, hidden=8).describe())


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        from_dict(ExperimentConfig, {"dataset": {"nmae": "x"}})
    with pytest.raises(ConfigError, match="expected an integer"):
        from_dict(ExperimentConfig, {"seed": "3"})


def test_config_yaml_round_trip(tmp_path):
    cfg = ExperimentConfig(flow=FlowSpec(blocks=2),
                           phases=[PhaseSpec(3, PerturbationSpec("adversarial_la", "l2", 0.5, 0.25, 3))])
    (tmp_path / "c.yaml").write_text(dump_config(cfg))
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg
    assert back.needs_flow() and back.total_epochs == 3


def test_validation_before_compute(tmp_path):
    cfg = ExperimentConfig(flow=FlowSpec(checkpoint=str(tmp_path / "missing.ckpt")))
    with pytest.raises(ConfigError, match="not found"):
        validate(cfg)
    with pytest.raises(ConfigError, match="schema_version"):
        validate(ExperimentConfig(schema_version=2))
    with pytest.raises(ConfigError, match="flow"):
        validate(ExperimentConfig(phases=[PhaseSpec(1, PerturbationSpec("randomized_la", "l2", 0.1))]))
    bad = ExperimentConfig(flow=FlowSpec(conditional=True))
    bad.dataset.fraction = 0.05
    with pytest.raises(ConfigError, match="subset"):
        validate(bad)


def test_relative_paths_resolve_against_config(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "c.yaml").write_text(yaml.safe_dump(
        {"dataset": {"name": "idx", "classes": 2, "train_images": "a", "train_labels": "b",
                     "test_images": "c", "test_labels": "d"}}))
    cfg = load_config(tmp_path / "sub" / "c.yaml")
    assert cfg.dataset.train_images == str(tmp_path / "sub" / "a")
    with pytest.raises(ConfigError, match="file not found"):
        validate(cfg)
