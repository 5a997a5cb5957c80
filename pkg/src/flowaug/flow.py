"""Bijective layers and their composition into a normalizing flow.

All layers act on row-batches of flattened vectors, shape ``(N, C)``. Public
entry points also accept a single vector of shape ``(C,)`` and return results
of matching rank.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.linalg

from . import diffcore as dc
from .diffcore import Tensor

LOG_2PI = math.log(2 * math.pi)


class FlowError(ValueError):
    pass


def _as_batch(x, dtype) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))
    if t.ndim == 1:
        return dc.reshape(t, (1, t.shape[0])), True
    if t.ndim != 2:
        raise FlowError(f"expected (C,) or (N, C) input, got shape {t.shape}")
    return t, False


def _label_batch(label, n: int, width: int, dtype) -> Tensor | None:
    if width == 0:
        if label is not None:
            raise FlowError("label given to an unconditional flow")
        return None
    if label is None:
        raise FlowError("conditional flow requires a label")
    lab = np.asarray(label.data if isinstance(label, Tensor) else label)
    if lab.ndim == 0 or (lab.ndim == 1 and lab.dtype.kind in "iu"):
        ids = np.broadcast_to(np.atleast_1d(lab).astype(int), (n,))
        if ids.min() < 0 or ids.max() >= width:
            raise FlowError(f"label out of range for {width} classes")
        onehot = np.zeros((n, width), dtype=dtype)
        onehot[np.arange(n), ids] = 1.0
        return Tensor(onehot)
    lab = lab.reshape(-1, width).astype(dtype)
    if lab.shape[0] == 1 and n > 1:
        lab = np.repeat(lab, n, axis=0)
    if lab.shape[0] != n:
        raise FlowError(f"label batch {lab.shape[0]} != input batch {n}")
    return Tensor(lab)


class Layer:
    kind = "layer"

    def forward(self, x: Tensor, label: Tensor | None = None) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def inverse(self, y: Tensor, label: Tensor | None = None) -> Tensor:
        raise NotImplementedError

    def params(self) -> list[tuple[str, Tensor]]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def describe(self) -> dict:
        return {"type": self.kind, "dim": self.dim}


class CouplingLayer(Layer):
    """Affine coupling: one part of the vector conditions s, t for the other.

    With ``reverse=False`` coordinates ``[:split]`` pass through and
    ``[split:]`` are transformed; ``reverse=True`` swaps the roles. The subnet
    is linear -> ReLU -> linear and its output holds s first, then t.
    """

    kind = "coupling"

    def __init__(self, dim: int, split: int, hidden: int = 64, label_width: int = 0,
                 clamp: float = 2.0, reverse: bool = False, rng=None, dtype=np.float64,
                 zero_init: bool = True):
        if not 1 <= split < dim:
            raise FlowError(f"split index must satisfy 1 <= c < C, got c={split}, C={dim}")
        rng = np.random.default_rng(rng)
        self.dim, self.split, self.hidden = dim, split, hidden
        self.label_width, self.clamp, self.reverse = label_width, float(clamp), reverse
        n_cond = (dim - split) if reverse else split
        self.n_active = dim - n_cond
        n_in = n_cond + label_width
        bound = 1.0 / math.sqrt(n_in)
        self.w1 = Tensor(rng.uniform(-bound, bound, (n_in, hidden)), dtype=dtype)
        self.b1 = Tensor(np.zeros((1, hidden)), dtype=dtype)
        if zero_init:
            w2 = np.zeros((hidden, 2 * self.n_active))
        else:
            w2 = rng.uniform(-1, 1, (hidden, 2 * self.n_active)) / math.sqrt(hidden)
        self.w2 = Tensor(w2, dtype=dtype)
        self.b2 = Tensor(np.zeros((1, 2 * self.n_active)), dtype=dtype)

    def _parts(self, x: Tensor) -> tuple[Tensor, Tensor]:
        c = self.split
        if self.reverse:
            return x[:, c:], x[:, :c]
        return x[:, :c], x[:, c:]

    def _join(self, cond: Tensor, active: Tensor) -> Tensor:
        return dc.concat([active, cond] if self.reverse else [cond, active], axis=1)

    def scale_shift(self, cond: Tensor, label: Tensor | None = None) -> tuple[Tensor, Tensor]:
        h = cond if label is None else dc.concat([cond, label], axis=1)
        h = dc.relu(h @ self.w1 + self.b1)
        out = h @ self.w2 + self.b2
        raw_s, t = out[:, : self.n_active], out[:, self.n_active:]
        s = self.clamp * dc.tanh(raw_s / self.clamp)
        return s, t

    def _check(self, x: Tensor, label) -> None:
        if x.shape[1] != self.dim:
            raise FlowError(f"coupling expects width {self.dim}, got {x.shape[1]}")
        if (label is None) != (self.label_width == 0):
            raise FlowError("label must be given iff the coupling is conditional")

    def forward(self, x, label=None):
        self._check(x, label)
        cond, active = self._parts(x)
        s, t = self.scale_shift(cond, label)
        y = self._join(cond, active * dc.exp(s) + t)
        return y, dc.sum(s, axis=1)

    def inverse(self, y, label=None):
        self._check(y, label)
        cond, active = self._parts(y)
        s, t = self.scale_shift(cond, label)
        return self._join(cond, (active - t) * dc.exp(-s))

    def params(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def describe(self):
        return {"type": self.kind, "dim": self.dim, "split": self.split, "hidden": self.hidden,
                "label_width": self.label_width, "clamp": self.clamp, "reverse": self.reverse,
                "st_order": "s,t"}


class PermutationLayer(Layer):
    kind = "permute"

    def __init__(self, dim: int, rng=None, perm=None):
        self.dim = dim
        if perm is None:
            perm = np.random.default_rng(rng).permutation(dim)
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(dim)):
            raise FlowError("permutation must be a bijection on 0..C-1")
        self.perm = perm
        self.inv = np.argsort(perm)

    def forward(self, x, label=None):
        return x[:, self.perm], Tensor(np.zeros(x.shape[0], dtype=x.dtype))

    def inverse(self, y, label=None):
        return y[:, self.inv]

    def buffers(self):
        return [("perm", self.perm)]


class ActNormLayer(Layer):
    """Per-coordinate ``y = exp(log_scale) * x + bias``."""

    kind = "actnorm"

    def __init__(self, dim: int, scale=None, bias=None, dtype=np.float64):
        self.dim = dim
        self.initialized = scale is not None or bias is not None
        scale = np.ones(dim) if scale is None else np.broadcast_to(np.asarray(scale, float), (dim,))
        if np.any(scale <= 0):
            raise FlowError("actnorm scale must be strictly positive")
        bias = np.zeros(dim) if bias is None else np.broadcast_to(np.asarray(bias, float), (dim,))
        self.log_scale = Tensor(np.log(scale).reshape(1, dim), dtype=dtype)
        self.bias = Tensor(np.array(bias, dtype=float).reshape(1, dim), dtype=dtype)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale.data[0])

    def initialize(self, batch) -> None:
        data = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 2:
            raise FlowError("actnorm initialization needs a (N>=2, C) batch")
        mu, sd = data.mean(axis=0), data.std(axis=0)
        bad = np.flatnonzero(sd <= 0)
        if bad.size:
            raise FlowError(f"zero variance in coordinate {int(bad[0])}; cannot initialize actnorm")
        self.log_scale.data[...] = -np.log(sd)
        self.bias.data[...] = -mu / sd
        self.initialized = True

    def forward(self, x, label=None):
        y = x * dc.exp(self.log_scale) + self.bias
        ld = dc.sum(self.log_scale)
        return y, dc.mul(Tensor(np.ones(x.shape[0], dtype=x.dtype)), dc.reshape(ld, (1,)))

    def inverse(self, y, label=None):
        return (y - self.bias) * dc.exp(-self.log_scale)

    def params(self):
        return [("log_scale", self.log_scale), ("bias", self.bias)]


class InvLinearLayer(Layer):
    """Invertible ``y = W x`` with ``W = P (L + I) (U + diag(sign * exp(log_s)))``.

    P and sign are fixed; L is strictly lower, U strictly upper.
    """

    kind = "invlinear"

    def __init__(self, dim: int, rng=None, weight=None, dtype=np.float64):
        self.dim = dim
        if weight is None:
            g = np.random.default_rng(rng).standard_normal((dim, dim))
            weight, _ = np.linalg.qr(g)
        weight = np.asarray(weight, dtype=np.float64)
        p, l, u = scipy.linalg.lu(weight)
        d = np.diag(u)
        if np.any(d == 0):
            raise FlowError("weight matrix is singular")
        self.p = p
        self.sign = np.sign(d)
        self.lower = Tensor(np.tril(l, -1), dtype=dtype)
        self.upper = Tensor(np.triu(u, 1), dtype=dtype)
        self.log_s = Tensor(np.log(np.abs(d)).reshape(1, dim), dtype=dtype)
        self._lmask = np.tril(np.ones((dim, dim)), -1)
        self._umask = np.triu(np.ones((dim, dim)), 1)

    @classmethod
    def from_weight(cls, weight, dtype=np.float64) -> InvLinearLayer:
        weight = np.asarray(weight, dtype=np.float64)
        return cls(weight.shape[0], weight=weight, dtype=dtype)

    def _factors(self) -> tuple[Tensor, Tensor]:
        eye = np.eye(self.dim, dtype=self.log_s.dtype)
        lmat = self.lower * self._lmask + eye
        diag = dc.mul(Tensor(self.sign.reshape(1, -1) * eye, dtype=self.log_s.dtype), dc.exp(self.log_s))
        umat = self.upper * self._umask + diag
        return lmat, umat

    def weight(self) -> np.ndarray:
        lmat, umat = self._factors()
        return self.p @ lmat.data @ umat.data

    def forward(self, x, label=None):
        lmat, umat = self._factors()
        w = Tensor(self.p, dtype=x.dtype) @ lmat @ umat
        y = x @ dc.transpose(w)
        ld = dc.sum(self.log_s)
        return y, dc.mul(Tensor(np.ones(x.shape[0], dtype=x.dtype)), dc.reshape(ld, (1,)))

    def inverse(self, y, label=None):
        lmat, umat = self._factors()
        eye = np.eye(self.dim)
        linv = scipy.linalg.solve_triangular(lmat.data, eye, lower=True, unit_diagonal=True)
        uinv = scipy.linalg.solve_triangular(umat.data, eye, lower=False)
        winv = (uinv @ linv @ self.p.T).astype(y.dtype)
        return y @ Tensor(winv.T.copy())

    def params(self):
        return [("lower", self.lower), ("upper", self.upper), ("log_s", self.log_s)]

    def buffers(self):
        return [("p", self.p), ("sign", self.sign)]


class FlowModel:
    """Composition ``F = f_l o ... o f_1`` with a standard normal prior."""

    def __init__(self, layers, dim: int, label_width: int = 0, dtype=np.float64):
        self.layers = list(layers)
        self.dim = dim
        self.label_width = label_width
        self.dtype = np.dtype(dtype).type
        for layer in self.layers:
            if layer.dim != dim:
                raise FlowError(f"layer {layer.kind} has width {layer.dim}, flow has {dim}")

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for _, p in layer.params()]

    def describe(self) -> dict:
        return {"dim": self.dim, "label_width": self.label_width,
                "layers": [layer.describe() for layer in self.layers]}

    def initialize(self, batch, labels=None) -> None:
        """Data-dependent actnorm initialization, layer by layer in order."""
        x, _ = _as_batch(batch, self.dtype)
        lab = _label_batch(labels, x.shape[0], self.label_width, self.dtype)
        for layer in self.layers:
            if isinstance(layer, ActNormLayer) and not layer.initialized:
                layer.initialize(x.data)
            x, _ = layer.forward(x, lab if isinstance(layer, CouplingLayer) else None)

    def forward(self, x, label=None) -> tuple[Tensor, Tensor]:
        xb, single = _as_batch(x, self.dtype)
        lab = _label_batch(label, xb.shape[0], self.label_width, xb.dtype)
        logdet = Tensor(np.zeros(xb.shape[0], dtype=xb.dtype))
        for layer in self.layers:
            xb, ld = layer.forward(xb, lab if isinstance(layer, CouplingLayer) else None)
            logdet = logdet + ld
        if single:
            return dc.reshape(xb, (self.dim,)), dc.reshape(logdet, ())
        return xb, logdet

    def inverse(self, z, label=None) -> Tensor:
        zb, single = _as_batch(z, self.dtype)
        lab = _label_batch(label, zb.shape[0], self.label_width, zb.dtype)
        for layer in reversed(self.layers):
            zb = layer.inverse(zb, lab if isinstance(layer, CouplingLayer) else None)
        return dc.reshape(zb, (self.dim,)) if single else zb

    def log_prob(self, x, label=None) -> Tensor:
        z, logdet = self.forward(x, label)
        axis = None if z.ndim == 1 else 1
        quad = dc.sum(z * z, axis=axis)
        return -0.5 * quad - 0.5 * self.dim * LOG_2PI + logdet


def coupling_forward(x, layer: CouplingLayer, label=None):
    xb, single = _as_batch(x, layer.w1.dtype)
    lab = _label_batch(label, xb.shape[0], layer.label_width, xb.dtype)
    y, ld = layer.forward(xb, lab)
    return (dc.reshape(y, (layer.dim,)), dc.reshape(ld, ())) if single else (y, ld)


def coupling_inverse(y, layer: CouplingLayer, label=None):
    yb, single = _as_batch(y, layer.w1.dtype)
    lab = _label_batch(label, yb.shape[0], layer.label_width, yb.dtype)
    x = layer.inverse(yb, lab)
    return dc.reshape(x, (layer.dim,)) if single else x


def actnorm_initialize(layer: ActNormLayer, batch) -> None:
    layer.initialize(batch)


def invlinear_forward(x, layer: InvLinearLayer):
    xb, single = _as_batch(x, layer.log_s.dtype)
    y, ld = layer.forward(xb)
    return (dc.reshape(y, (layer.dim,)), dc.reshape(ld, ())) if single else (y, ld)


def flow_forward(model: FlowModel, x, label=None):
    return model.forward(x, label)


def flow_inverse(model: FlowModel, z, label=None):
    return model.inverse(z, label)


def log_prob(model: FlowModel, x, label=None) -> Tensor:
    return model.log_prob(x, label)


def nll_objective(model: FlowModel, batch, labels=None) -> Tensor:
    """Mean negative log-likelihood in nats per sample."""
    xb, _ = _as_batch(batch, model.dtype)
    return -dc.mean(model.log_prob(xb, labels))


def sample(model: FlowModel, n: int, label=None, rng=None) -> np.ndarray:
    if n < 1:
        raise FlowError("n must be >= 1")
    rng = np.random.default_rng(rng)
    z = rng.standard_normal((n, model.dim)).astype(model.dtype)
    return model.inverse(z, label).data


def build_flow(dim: int, blocks: int = 12, hidden: int = 64, label_width: int = 0,
               clamp: float = 2.0, double_coupling: bool = True, actnorm: bool = False,
               invlinear: bool = False, permute: bool = True, seed: int = 0,
               dtype=np.float64) -> FlowModel:
    """Stack of coupling blocks, each followed by a random permutation.

    ``double_coupling`` transforms both halves per block (first half given the
    second, then the second given the updated first). ``dim == 1`` has no
    coupling and yields an actnorm + invertible-linear stack.
    """
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    if dim == 1:
        return FlowModel([ActNormLayer(1, dtype=dtype), InvLinearLayer(1, rng=rng, dtype=dtype)],
                         1, dtype=dtype)
    c = dim // 2
    for _ in range(blocks):
        if actnorm:
            layers.append(ActNormLayer(dim, dtype=dtype))
        kw = dict(hidden=hidden, label_width=label_width, clamp=clamp, dtype=dtype)
        if double_coupling:
            layers.append(CouplingLayer(dim, c, reverse=True, rng=rng, **kw))
        layers.append(CouplingLayer(dim, c, rng=rng, **kw))
        if permute:
            layers.append(PermutationLayer(dim, rng=rng))
        if invlinear:
            layers.append(InvLinearLayer(dim, rng=rng, dtype=dtype))
    return FlowModel(layers, dim, label_width=label_width, dtype=dtype)
