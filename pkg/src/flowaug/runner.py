"""End-to-end pipeline: data -> flow -> classifier phases -> evaluation -> reports."""
from __future__ import annotations

import copy
import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .attacks import perturb, sample_rngs
from .checkpoint import load_checkpoint, save_checkpoint
from .classify import LeNet, MLP
from .config import ExperimentConfig, to_dict, validate
from .data import DatasetHandle, load_dataset, subset
from .evaluate import (FeatureExtractor, accuracy, classifier_frechet_distance, perturbation_stats,
                       robustness_eval)
from .flow import build_flow, nll_objective
from .optim import LrSchedule
from .training import TrainPhase, train_classifier, train_flow

log = logging.getLogger(__name__)

OUT_DIR_ENV = "FLOWAUG_OUT_DIR"
REPORT_SCHEMA = 1
FD_LABEL = "classifier-feature Frechet distance"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunContext:
    config: ExperimentConfig
    out_dir: Path
    dtype: type
    train_full: DatasetHandle | None = None
    train: DatasetHandle | None = None
    test: DatasetHandle | None = None
    flow: object = None
    flow_info: dict = field(default_factory=dict)
    clf: object = None
    history: object = None
    metrics: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)


def resolve_out_dir(cfg: ExperimentConfig, override: str | None = None) -> Path:
    """CLI flag beats the environment variable, which beats the config."""
    return Path(override or os.environ.get(OUT_DIR_ENV) or cfg.output_dir)


def make_context(cfg: ExperimentConfig, out_dir=None) -> RunContext:
    dtype = np.float32 if cfg.precision == "f32" else np.float64
    dc.set_default_dtype(dtype)
    out = resolve_out_dir(cfg, None if out_dir is None else str(out_dir))
    out.mkdir(parents=True, exist_ok=True)
    return RunContext(cfg, out, dtype)


def stage_data(ctx: RunContext) -> None:
    ds = ctx.config.dataset
    train, test = load_dataset(ds)
    ctx.train_full = train
    ctx.train = subset(train, ds.fraction, ds.subset_seed)
    ctx.test = test


def _flow_descriptor_expected(ctx: RunContext) -> dict:
    return build_flow(**_flow_kwargs(ctx)).describe()


def _flow_kwargs(ctx: RunContext) -> dict:
    fs = ctx.config.flow
    return dict(dim=ctx.train.dim, blocks=fs.blocks, hidden=fs.hidden,
                label_width=ctx.train.n_classes if fs.conditional else 0, clamp=fs.clamp,
                double_coupling=fs.double_coupling, actnorm=fs.actnorm, invlinear=fs.invlinear,
                seed=ctx.config.seed, dtype=ctx.dtype)


def stage_flow(ctx: RunContext, load_path: str | None = None) -> None:
    fs = ctx.config.flow
    if fs is None:
        return
    path = load_path or fs.checkpoint
    if path:
        ctx.flow = load_checkpoint(path, expect=_flow_descriptor_expected(ctx))
        ctx.flow_info = {"checkpoint": Path(path).name, "trained": False}
    else:
        ctx.flow = build_flow(**_flow_kwargs(ctx))
        source = ctx.train_full if fs.train_on == "full" else ctx.train
        sched = fs.schedule or LrSchedule("constant", base=fs.optimizer.lr)
        losses = train_flow(ctx.flow, source.x, source.y if fs.conditional else None,
                            epochs=fs.epochs, batch_size=fs.batch_size,
                            optimizer=fs.optimizer.build(), schedule=sched, seed=ctx.config.seed)
        save_checkpoint(ctx.flow, ctx.out_dir / "flow.ckpt")
        ctx.flow_info = {"checkpoint": "flow.ckpt", "trained": True, "train_on": fs.train_on,
                         "n_train": len(source), "final_train_nll": losses[-1]}
    lab = ctx.test.y if ctx.flow.label_width else None
    ctx.flow_info["test_nll"] = float(nll_objective(ctx.flow, ctx.test.x, lab).data)
    ctx.flow_info["dataset"] = ctx.train_full.provenance


def build_classifier_for(ctx: RunContext):
    cs = ctx.config.classifier
    if cs.arch == "lenet":
        if ctx.train.image_shape is None:
            raise ValueError("lenet needs an image dataset")
        return LeNet(ctx.train.image_shape, ctx.train.n_classes, channels=cs.channels, fc=cs.fc,
                     seed=ctx.config.seed, dtype=ctx.dtype)
    return MLP(ctx.train.dim, ctx.train.n_classes, hidden=cs.hidden, seed=ctx.config.seed,
               dtype=ctx.dtype)


def stage_classifier(ctx: RunContext) -> None:
    cs = ctx.config.classifier
    ctx.clf = build_classifier_for(ctx)
    phases = [TrainPhase(p.perturbation, p.epochs) for p in ctx.config.phases]
    sched = cs.schedule or LrSchedule("constant", base=cs.optimizer.lr)
    uses_flow = any(p.perturbation.is_latent for p in phases)
    ctx.history = train_classifier(
        ctx.clf, (ctx.train.x, ctx.train.y), phases, cs.optimizer.build(), sched,
        flow=ctx.flow if uses_flow else None, test=(ctx.test.x, ctx.test.y),
        batch_size=cs.batch_size, seed=ctx.config.seed, grad_check_tol=cs.grad_check_tol)
    save_checkpoint(ctx.clf, ctx.out_dir / "classifier.ckpt")
    ctx.history.write_jsonl(ctx.out_dir / "history.jsonl")
    last = ctx.history.records[-1]
    label = " + ".join(p.perturbation.label() for p in ctx.config.phases)
    ctx.tables["generalization"] = [{
        "perturbation": label, "epochs": ctx.history.epochs,
        "train_acc": last["train_acc"], "train_loss": last["train_loss"],
        "test_acc": last["test_acc"], "test_loss": last["test_loss"]}]
    ctx.metrics["generalization"] = ctx.tables["generalization"][0]


def stage_evaluate(ctx: RunContext) -> None:
    ev = ctx.config.evaluation
    test = ctx.test
    if ev.max_samples is not None:
        test = DatasetHandle(test.x[:ev.max_samples], test.y[:ev.max_samples], "test",
                             test.n_classes, test.provenance, test.image_shape)
    ctx.metrics["test_accuracy"] = accuracy(ctx.clf, test)
    rob, sizes = [], []
    for spec in ev.attacks:
        r = robustness_eval(ctx.clf, spec, test, flow=ctx.flow, seed=ctx.config.seed)
        rob.append({"attack": r.attack, "clean_acc": r.clean_acc, "attacked_acc": r.attacked_acc,
                    "drop": r.drop, "n": r.n, "n_failed": r.n_failed})
        res = perturb(spec, test.x, test.y, flow=ctx.flow, clf=ctx.clf,
                      rng=sample_rngs(ctx.config.seed, range(len(test))))
        l2, linf = perturbation_stats(zip(test.x, res.x_adv))
        sizes.append({"method": spec.label(), "mean_l2": l2, "mean_linf": linf, "n": len(test)})
        if ev.image_grid and test.image_shape is not None:
            write_pgm_grid(ctx.out_dir / f"samples_{len(sizes) - 1}.pgm",
                           np.concatenate([test.x[:8], res.x_adv[:8]]), test.image_shape[1:], cols=8)
    ctx.tables["robustness"] = rob
    ctx.tables["perturbation_size"] = sizes
    ctx.metrics["robustness"] = rob
    ctx.metrics["perturbation_size"] = sizes
    if ev.frechet:
        ctx.tables["frechet"] = _frechet_rows(ctx)
        ctx.metrics["frechet"] = {"label": FD_LABEL, "rows": ctx.tables["frechet"]}


def _frechet_rows(ctx: RunContext) -> list[dict]:
    ev = ctx.config.evaluation
    n = min(ev.frechet_samples, len(ctx.train_full), len(ctx.test))
    ref = ctx.train_full.x[:n]
    ext = FeatureExtractor(ctx.clf)
    rows = [{"method": "held-out test data", "distance": classifier_frechet_distance(ext, ref, ctx.test.x[:n]),
             "n": n, "metric": FD_LABEL}]
    specs = [p.perturbation for p in ctx.config.phases] + list(ev.attacks)
    seen = set()
    for spec in specs:
        if spec.kind == "none" or spec.label() in seen:
            continue
        seen.add(spec.label())
        res = perturb(spec, ref, ctx.train_full.y[:n], flow=ctx.flow, clf=ctx.clf,
                      rng=sample_rngs(ctx.config.seed, range(n)))
        rows.append({"method": spec.label(), "distance": classifier_frechet_distance(ext, ref, res.x_adv),
                     "n": n, "metric": FD_LABEL})
    return rows


def write_pgm_grid(path, images: np.ndarray, hw, cols: int = 8) -> None:
    """Binary PGM (P5) mosaic of [0, 1] images."""
    h, w = hw
    imgs = np.clip(np.asarray(images).reshape(-1, h, w), 0, 1)
    rows = -(-len(imgs) // cols)
    canvas = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for i, im in enumerate(imgs):
        r, c = divmod(i, cols)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = np.round(im * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{canvas.shape[1]} {canvas.shape[0]}\n255\n".encode())
        fh.write(canvas.tobytes())


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def report_dict(ctx: RunContext, stages: list[str], partial: str | None = None) -> dict:
    cfg = to_dict(ctx.config)
    cfg.pop("output_dir")
    rep = {
        "report_schema": REPORT_SCHEMA,
        "config": cfg,
        "seeds": {"global": ctx.config.seed, "dataset": ctx.config.dataset.seed,
                  "subset": ctx.config.dataset.subset_seed, "flow_init": ctx.config.seed,
                  "classifier_init": ctx.config.seed, "training": ctx.config.seed,
                  "evaluation": ctx.config.seed},
        "stages": stages,
        "metrics": ctx.metrics,
    }
    if ctx.train is not None:
        rep["data"] = {"train": ctx.train.provenance, "test": ctx.test.provenance,
                       "n_train": len(ctx.train), "n_test": len(ctx.test),
                       "n_train_full": len(ctx.train_full)}
    if ctx.flow_info:
        rep["flow"] = ctx.flow_info
    if ctx.history is not None:
        rep["history"] = ctx.history.records
        rep["phase_boundaries"] = ctx.history.phase_boundaries
    if partial:
        rep["partial"] = partial
    return rep


def write_reports(ctx: RunContext, stages: list[str], partial: str | None = None,
                  name: str = "report.json") -> Path:
    path = ctx.out_dir / name
    rep = report_dict(ctx, stages, partial)
    path.write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    for table, rows in ctx.tables.items():
        _write_csv(ctx.out_dir / f"{table}.csv", rows)
    return path


STAGES = ("data", "flow", "classifier", "evaluate")


def run_experiment(cfg: ExperimentConfig, out_dir=None, load_flow: str | None = None,
                   load_classifier: str | None = None, stages=STAGES,
                   report_name: str = "report.json") -> Path:
    """Run the selected stages and write the reports; returns the report path.

    A failing stage writes a report marked ``partial`` plus a PARTIAL marker
    file and raises :class:`StageError`.
    """
    validate(cfg, load_flow)
    ctx = make_context(cfg, out_dir)
    started = time.time()
    done: list[str] = []
    current = "setup"
    try:
        current = "data"
        stage_data(ctx)
        done.append(current)
        if cfg.flow is not None and ("flow" in stages or cfg.needs_flow()):
            current = "flow"
            stage_flow(ctx, load_flow)
            done.append(current)
        if "classifier" in stages:
            current = "classifier"
            stage_classifier(ctx)
            done.append(current)
        elif load_classifier:
            ctx.clf = load_checkpoint(load_classifier)
        if "evaluate" in stages:
            current = "evaluate"
            if ctx.clf is None:
                raise ValueError("evaluation needs a classifier (train one or pass --load-classifier)")
            stage_evaluate(ctx)
            done.append(current)
    except Exception as exc:
        write_reports(ctx, done, partial=current, name=report_name)
        (ctx.out_dir / "PARTIAL").write_text(f"failed stage: {current}\n{type(exc).__name__}: {exc}\n")
        log.error("stage %s failed: %s", current, exc)
        raise StageError(current, exc) from exc
    marker = ctx.out_dir / "PARTIAL"
    if marker.exists():
        marker.unlink()
    path = write_reports(ctx, done, name=report_name)
    (ctx.out_dir / "run_info.json").write_text(json.dumps(
        {"started": started, "finished": time.time(), "out_dir": str(ctx.out_dir.resolve())},
        indent=2) + "\n")
    return path


def compare_arms(cfg: ExperimentConfig, arms: dict, seeds, out_dir) -> dict:
    """Final clean test accuracy of each training arm, per seed.

    ``arms`` maps a name to a phase list. Per seed, the dataset, subset and
    flow are built once and shared by every arm, so arms differ only in
    their perturbations. Returns ``{name: [acc_seed0, acc_seed1, ...]}``.
    """
    validate(cfg)
    results = {name: [] for name in arms}
    for s in seeds:
        run_cfg = copy.deepcopy(cfg)
        run_cfg.seed = s
        run_cfg.dataset.seed = s
        run_cfg.dataset.subset_seed = s
        ctx = make_context(run_cfg, Path(out_dir) / f"seed_{s}")
        stage_data(ctx)
        stage_flow(ctx)
        for name, phases in arms.items():
            run_cfg.phases = list(phases)
            stage_classifier(ctx)
            results[name].append(ctx.history.records[-1]["test_acc"])
    return results
