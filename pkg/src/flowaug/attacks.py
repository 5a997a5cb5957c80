"""Norm-ball projections and the latent / image-space perturbation procedures.

Every procedure works on a batch ``(N, C)`` (or one vector ``(C,)``) and draws
each row's randomness from its own generator, so results do not depend on
how samples are grouped into batches.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .classify import cross_entropy
from .diffcore import Tensor

log = logging.getLogger(__name__)

KINDS = ("none", "randomized_la", "adversarial_la", "pgd_image")
LATENT_KINDS = ("randomized_la", "adversarial_la")
NORMS = ("l2", "linf")
GRAD_FLOOR = 1e-12


class AttackError(RuntimeError):
    def __init__(self, msg: str, indices=()):
        super().__init__(msg)
        self.indices = list(indices)


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str = "none"
    norm: str = "l2"
    eps: float = 0.0
    alpha: float = 0.0
    steps: int = 0
    seed: int = 0
    truncate: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; expected one of {KINDS}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.kind in ("adversarial_la", "pgd_image"):
            if self.alpha <= 0:
                raise ValueError(f"{self.kind} needs alpha > 0")
            if self.steps < 0:
                raise ValueError("steps must be >= 0")

    @property
    def is_latent(self) -> bool:
        return self.kind in LATENT_KINDS

    def label(self) -> str:
        name = {"none": "Standard", "randomized_la": "Randomized-LA",
                "adversarial_la": "Adversarial-LA", "pgd_image": "PGD"}[self.kind]
        if self.kind == "none":
            return name
        parts = [f"{name}, {self.norm}, eps={self.eps:g}"]
        if self.kind != "randomized_la":
            parts.append(f"alpha={self.alpha:g}, k={self.steps}")
        elif not self.truncate:
            parts.append("untruncated")
        return ", ".join(parts)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    delta_z: np.ndarray | None
    loss: np.ndarray | None
    delta_norm: np.ndarray

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.loss)) if self.loss is not None else float("nan")


def _l2(v: np.ndarray, keepdims: bool = False) -> np.ndarray:
    """Row-wise l2 norm, rescaled by the row max so tiny or huge rows neither underflow nor overflow."""
    m = np.max(np.abs(v), axis=-1, keepdims=True)
    safe = np.where(m > 0, m, 1.0)
    out = m * np.sqrt(np.sum((v / safe) ** 2, axis=-1, keepdims=True))
    return out if keepdims else out[..., 0]


def _norm(v: np.ndarray, norm: str) -> np.ndarray:
    if norm == "l2":
        return _l2(v)
    return np.max(np.abs(v), axis=-1)


def project_l2(v, eps: float) -> np.ndarray:
    """Rescale rows with l2 norm above ``eps`` onto the sphere; others unchanged."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    v = np.asarray(v, dtype=float)
    n = _l2(v, keepdims=True)
    over = n > eps
    if not over.any():
        return v.copy()
    factor = np.where(over, eps / np.where(over, n, 1.0), 1.0)
    out = np.where(over, v * factor, v)
    # rounding can leave a scaled row an ulp outside the ball; shrink it until
    # it is inside so that projecting twice equals projecting once
    shrink = np.nextafter(1.0, 0.0)
    for _ in range(8):
        outside = over & (_l2(out, keepdims=True) > eps)
        if not outside.any():
            break
        out = np.where(outside, out * shrink, out)
    return out


def project_linf(v, eps: float) -> np.ndarray:
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return np.clip(np.asarray(v, dtype=float), -eps, eps)


def project(v, eps: float, norm: str) -> np.ndarray:
    return project_l2(v, eps) if norm == "l2" else project_linf(v, eps)


def sample_rngs(seed: int, indices, epoch: int | None = None) -> list[np.random.Generator]:
    """Independent per-sample generators keyed by (seed, [epoch,] index)."""
    key = [int(seed)] if epoch is None else [int(seed), int(epoch)]
    return [np.random.default_rng(np.random.SeedSequence([*key, int(i)])) for i in indices]


def _rows(x, dtype=np.float64) -> tuple[np.ndarray, bool]:
    a = np.asarray(x.data if isinstance(x, Tensor) else x)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(dtype)
    if a.ndim == 1:
        return a.reshape(1, -1), True
    if a.ndim != 2:
        raise ValueError(f"expected (C,) or (N, C) input, got {a.shape}")
    return a, False


def _rng_list(rng, n: int, seed: int) -> list:
    if rng is None:
        return sample_rngs(seed, range(n))
    if isinstance(rng, np.random.Generator):
        return [rng] * n
    if isinstance(rng, (int, np.integer)):
        return sample_rngs(int(rng), range(n))
    rngs = list(rng)
    if len(rngs) != n:
        raise ValueError(f"need {n} generators, got {len(rngs)}")
    return rngs


def _labels(label, n: int) -> np.ndarray:
    lab = np.atleast_1d(np.asarray(label)).astype(np.int64)
    if lab.size == 1 and n > 1:
        lab = np.repeat(lab, n)
    if lab.shape != (n,):
        raise ValueError(f"expected {n} labels, got {lab.shape}")
    return lab


def random_init(rngs, dim: int, eps: float, norm: str, dtype=np.float64) -> np.ndarray:
    """Random start inside the ball: uniform box for linf; Gaussian direction
    scaled to a uniformly drawn radius for l2."""
    out = np.empty((len(rngs), dim), dtype=dtype)
    for i, r in enumerate(rngs):
        if norm == "linf":
            out[i] = r.uniform(-eps, eps, dim)
        else:
            d = r.standard_normal(dim)
            nd = np.sqrt(np.sum(d * d))
            radius = r.uniform(0.0, eps)
            out[i] = d / nd * radius if nd > 0 else 0.0
    return project(out, eps, norm).astype(dtype, copy=False)


def _finish(x_adv: np.ndarray, delta, loss, dnorm, single: bool) -> AttackResult:
    if single:
        return AttackResult(x_adv[0], None if delta is None else delta[0],
                            None if loss is None else loss[0], dnorm[0])
    return AttackResult(x_adv, delta, loss, dnorm)


def _check_finite(x: np.ndarray, what: str) -> None:
    bad = ~np.all(np.isfinite(x), axis=1)
    if bad.any():
        idx = np.flatnonzero(bad)
        raise AttackError(f"non-finite {what} for samples {idx.tolist()}", idx)


def _flow_label(flow, label, n: int):
    if not flow.label_width:
        return None
    if label is None:
        raise ValueError("conditional flow needs labels")
    return _labels(label, n)


def randomized_la(flow, x, spec: PerturbationSpec, rng=None, label=None) -> AttackResult:
    """Decode ``F(x) + P(eps * N(0, I))``; P projects onto the norm ball when
    ``spec.truncate`` is set and is the identity otherwise. ``label`` is only
    used (and required) by a conditional flow."""
    if spec.kind != "randomized_la":
        raise ValueError(f"randomized_la called with kind {spec.kind!r}")
    xb, single = _rows(x, flow.dtype)
    n, c = xb.shape
    rngs = _rng_list(rng, n, spec.seed)
    lab = _flow_label(flow, label, n)
    z = flow.forward(xb, lab)[0].data
    noise = np.stack([r.standard_normal(c) for r in rngs]).astype(z.dtype)
    delta = spec.eps * noise
    if spec.truncate:
        delta = project(delta, spec.eps, spec.norm)
    x_adv = flow.inverse(z + delta, lab).data
    _check_finite(x_adv, "decode")
    return _finish(x_adv, delta, None, _norm(delta, spec.norm), single)


def _ascent(decode, clf, base: np.ndarray, labels: np.ndarray, spec: PerturbationSpec, rngs,
            box=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """k projected normalized-gradient (l2) or sign-gradient (linf) ascent steps
    on the summed cross-entropy of ``clf(decode(base + delta))``."""
    n, c = base.shape
    delta = random_init(rngs, c, spec.eps, spec.norm, dtype=base.dtype)
    if box is not None:
        delta = np.clip(delta, box[0], box[1])
    base_t = Tensor(base)

    def objective(d):
        return cross_entropy(clf.logits(decode(base_t + d)), labels, reduction="sum")

    for j in range(spec.steps):
        _, (g,) = dc.evaluate_with_gradients(objective, [Tensor(delta)])
        g = g.data
        gn = _norm(g, spec.norm)
        live = gn >= GRAD_FLOOR
        if not live.all():
            log.debug("step %d: zero gradient for samples %s, step skipped", j,
                      np.flatnonzero(~live).tolist())
        if spec.norm == "linf":
            step = np.sign(g)
        else:
            step = g / np.where(live, gn, 1.0)[:, None]
        cand = project(delta + spec.alpha * step, spec.eps, spec.norm)
        if box is not None:
            cand = np.clip(cand, box[0], box[1])
        delta = np.where(live[:, None], cand, delta)
        if not np.all(np.isfinite(delta)):
            _check_finite(delta, "perturbation")
    x_adv = decode(Tensor(base + delta)).data
    _check_finite(x_adv, "decode")
    loss = cross_entropy(clf.logits(x_adv), labels, reduction="none").data
    return delta, x_adv, loss


def adversarial_la(flow, clf, x, label, spec: PerturbationSpec, rng=None) -> AttackResult:
    """Latent-space PGD: maximize the classifier loss of ``F^-1(F(x) + delta)``
    over ``||delta||_p <= eps``, differentiating through the decoder."""
    if spec.kind != "adversarial_la":
        raise ValueError(f"adversarial_la called with kind {spec.kind!r}")
    xb, single = _rows(x, flow.dtype)
    labels = _labels(label, xb.shape[0])
    rngs = _rng_list(rng, xb.shape[0], spec.seed)
    lab = labels if flow.label_width else None
    z = flow.forward(xb, lab)[0].data
    delta, x_adv, loss = _ascent(lambda t: flow.inverse(t, lab), clf, z, labels, spec, rngs)
    return _finish(x_adv, delta, loss, _norm(delta, spec.norm), single)


def _identity(t: Tensor) -> Tensor:
    return t


def pgd_image(clf, x, label, spec: PerturbationSpec, rng=None, input_range=(0.0, 1.0)) -> AttackResult:
    """Image-space PGD. After each ball projection the perturbation is clipped
    so that ``x + delta`` stays inside ``input_range`` (None disables)."""
    if spec.kind != "pgd_image":
        raise ValueError(f"pgd_image called with kind {spec.kind!r}")
    xb, single = _rows(x)
    labels = _labels(label, xb.shape[0])
    rngs = _rng_list(rng, xb.shape[0], spec.seed)
    box = None
    if input_range is not None:
        box = (input_range[0] - xb, input_range[1] - xb)
    delta, x_adv, loss = _ascent(_identity, clf, xb, labels, spec, rngs, box=box)
    if input_range is not None:
        x_adv = np.clip(x_adv, input_range[0], input_range[1])
    return _finish(x_adv, None, loss, _norm(x_adv - xb, spec.norm), single)


def perturb(spec: PerturbationSpec, x, labels=None, flow=None, clf=None, rng=None) -> AttackResult:
    """Dispatch on ``spec.kind``; kind ``none`` passes samples through."""
    if spec.kind == "none":
        xb, single = _rows(x)
        zero = np.zeros(xb.shape[0])
        return _finish(xb.copy(), None, None, zero, single)
    if spec.is_latent and flow is None:
        raise ValueError(f"{spec.kind} needs a flow")
    if spec.kind == "randomized_la":
        return randomized_la(flow, x, spec, rng, labels)
    if spec.kind == "adversarial_la":
        return adversarial_la(flow, clf, x, labels, spec, rng)
    return pgd_image(clf, x, labels, spec, rng)
