"""Versioned binary checkpoints for flows and classifiers.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"FLOWAUG\\x00"
    8       2     major version (uint16)
    10      2     minor version (uint16)
    12      4     header length H (uint32)
    16      H     header, UTF-8 JSON: {"kind", "precision", "descriptor",
                  "tensors": [{"name", "dtype", "shape"}, ...]}
    16+H    ...   tensor blobs, raw C-order little-endian, in header order
    end-4   4     CRC-32 of every preceding byte (uint32)

Readers accept any minor version of their own major version.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .classify import Classifier, build_classifier
from .flow import (ActNormLayer, CouplingLayer, FlowModel, InvLinearLayer, PermutationLayer)

MAGIC = b"FLOWAUG\x00"
VERSION = (1, 0)
_PREFIX = struct.Struct("<8sHHI")


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class DescriptorMismatchError(CheckpointError):
    pass


def _tensors(model) -> tuple[str, dict, list[tuple[str, np.ndarray]]]:
    if isinstance(model, FlowModel):
        items = []
        for i, layer in enumerate(model.layers):
            items += [(f"{i}.{n}", p.data) for n, p in layer.params()]
            items += [(f"{i}.{n}", b) for n, b in layer.buffers()]
        return "flow", model.describe(), items
    if isinstance(model, Classifier):
        return "classifier", model.describe(), [(f"p{i}", p.data) for i, p in enumerate(model.params())]
    raise CheckpointError(f"cannot checkpoint {type(model).__name__}")


def _precision(model) -> str:
    dt = model.dtype if isinstance(model, FlowModel) else model.params()[0].dtype
    return "f32" if np.dtype(dt) == np.float32 else "f64"


def save_checkpoint(model, path, version=VERSION) -> None:
    kind, desc, items = _tensors(model)
    header = {"kind": kind, "precision": _precision(model), "descriptor": desc,
              "tensors": [{"name": n, "dtype": np.asarray(a).dtype.str.lstrip("<>|="),
                           "shape": list(np.shape(a))} for n, a in items]}
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = bytearray(_PREFIX.pack(MAGIC, version[0], version[1], len(hbytes)))
    body += hbytes
    for _, a in items:
        body += np.ascontiguousarray(a).astype(np.asarray(a).dtype.newbyteorder("<")).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return (header, {name: array}) after magic, version and checksum validation."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size + 4:
        raise ChecksumError(f"{path}: file too short ({len(raw)} bytes); truncated checkpoint")
    magic, major, minor, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if major != VERSION[0]:
        raise VersionMismatchError(f"{path}: checkpoint format version {major}.{minor} is not "
                                   f"readable by version {VERSION[0]}.{VERSION[1]}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise ChecksumError(f"{path}: checksum mismatch; file is corrupt or truncated")
    header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen])
    off = _PREFIX.size + hlen
    arrays = {}
    for t in header["tensors"]:
        dt = np.dtype("<" + t["dtype"]) if t["dtype"][0] in "fiu" else np.dtype(t["dtype"])
        nbytes = dt.itemsize * int(np.prod(t["shape"], dtype=np.int64))
        arrays[t["name"]] = np.frombuffer(raw[off:off + nbytes], dtype=dt).reshape(t["shape"]).copy()
        off += nbytes
    if off != len(raw) - 4:
        raise ChecksumError(f"{path}: blob lengths do not match the header")
    return header, arrays


def _first_difference(a, b, where="descriptor"):
    if isinstance(a, dict) and isinstance(b, dict):
        for k in sorted(set(a) | set(b)):
            if k not in a or k not in b:
                return f"{where}.{k} present in only one descriptor"
            d = _first_difference(a[k], b[k], f"{where}.{k}")
            if d:
                return d
        return None
    if isinstance(a, list) and isinstance(b, list):
        if len(a) != len(b):
            return f"{where}: length {len(a)} in checkpoint vs {len(b)} expected"
        for i, (x, y) in enumerate(zip(a, b)):
            d = _first_difference(x, y, f"{where}[{i}]")
            if d:
                return d
        return None
    return None if a == b else f"{where}: {a!r} in checkpoint vs {b!r} expected"


def _build_flow(desc: dict, arrays: dict, dtype) -> FlowModel:
    layers = []
    for i, d in enumerate(desc["layers"]):
        t, dim = d["type"], d["dim"]
        if t == "coupling":
            layer = CouplingLayer(dim, d["split"], hidden=d["hidden"], label_width=d["label_width"],
                                  clamp=d["clamp"], reverse=d["reverse"], dtype=dtype)
        elif t == "permute":
            layer = PermutationLayer(dim, perm=arrays[f"{i}.perm"])
        elif t == "actnorm":
            layer = ActNormLayer(dim, dtype=dtype)
            layer.initialized = True
        elif t == "invlinear":
            layer = InvLinearLayer(dim, weight=np.eye(dim), dtype=dtype)
            layer.p, layer.sign = arrays[f"{i}.p"], arrays[f"{i}.sign"]
        else:
            raise CheckpointError(f"unknown layer type {t!r}")
        for name, p in layer.params():
            src = arrays[f"{i}.{name}"]
            if src.shape != p.shape:
                raise DescriptorMismatchError(f"layer {i} {name}: shape {src.shape} vs {p.shape}")
            p.data = src.astype(dtype, copy=True)
        layers.append(layer)
    return FlowModel(layers, desc["dim"], label_width=desc["label_width"], dtype=dtype)


def load_checkpoint(path, expect: dict | None = None):
    """Rebuild the stored model. ``expect`` is a descriptor the checkpoint must match."""
    header, arrays = read_checkpoint(path)
    desc = header["descriptor"]
    if expect is not None:
        diff = _first_difference(desc, expect)
        if diff:
            raise DescriptorMismatchError(f"{path}: {diff}")
    dtype = np.float32 if header["precision"] == "f32" else np.float64
    if header["kind"] == "flow":
        return _build_flow(desc, arrays, dtype)
    if header["kind"] == "classifier":
        clf = build_classifier(desc, dtype=dtype)
        for i, p in enumerate(clf.params()):
            src = arrays[f"p{i}"]
            if src.shape != p.shape:
                raise DescriptorMismatchError(f"parameter {i}: shape {src.shape} vs {p.shape}")
            p.data = src.astype(dtype, copy=True)
        return clf
    raise CheckpointError(f"unknown checkpoint kind {header['kind']!r}")
