"""Accuracy, perturbation size, robustness drop and Fréchet distance."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .attacks import AttackError, PerturbationSpec, perturb, sample_rngs

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def _xy(data):
    if hasattr(data, "x") and hasattr(data, "y"):
        return np.asarray(data.x), np.asarray(data.y)
    x, y = data
    return np.asarray(x), np.asarray(y)


def accuracy(clf, data, batch_size: int = 1000) -> float:
    """Percentage of argmax-correct predictions; ties go to the lowest class index."""
    x, y = _xy(data)
    if len(x) == 0:
        raise MetricError("accuracy of an empty dataset is undefined")
    correct = 0
    for i in range(0, len(x), batch_size):
        logits = clf.logits(x[i:i + batch_size]).data
        correct += int(np.sum(np.argmax(logits, axis=1) == y[i:i + batch_size]))
    return 100.0 * correct / len(x)


def perturbation_stats(pairs) -> tuple[float, float]:
    """Mean l2 and mean linf size of ``x_adv - x`` over (x, x_adv) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise MetricError("perturbation_stats needs at least one pair")
    l2, linf = [], []
    for x, xt in pairs:
        x, xt = np.asarray(x, dtype=float), np.asarray(xt, dtype=float)
        if x.shape != xt.shape:
            raise MetricError(f"shape mismatch {x.shape} vs {xt.shape}")
        d = (xt - x).reshape(-1)
        l2.append(np.sqrt(np.sum(d * d)))
        linf.append(np.max(np.abs(d)) if d.size else 0.0)
    return float(np.mean(l2)), float(np.mean(linf))


@dataclass
class RobustnessReport:
    attack: str
    clean_acc: float
    attacked_acc: float
    drop: float
    n: int
    n_failed: int = 0


def robustness_eval(clf, attack: PerturbationSpec, data, flow=None, batch_size: int = 256,
                    seed: int | None = None) -> RobustnessReport:
    """Clean accuracy, accuracy on per-sample perturbed inputs, and their difference.

    Samples whose attack fails are logged and excluded from the attacked accuracy.
    """
    x, y = _xy(data)
    if attack.is_latent and flow is None:
        raise MetricError(f"{attack.kind} needs a flow")
    seed = attack.seed if seed is None else seed
    clean = accuracy(clf, (x, y))
    if attack.kind == "none":
        return RobustnessReport(attack.label(), clean, clean, clean - clean, len(x))
    correct, used, failed = 0, 0, 0
    for i in range(0, len(x), batch_size):
        idx = np.arange(i, min(i + batch_size, len(x)))
        try:
            res = perturb(attack, x[idx], y[idx], flow=flow, clf=clf, rng=sample_rngs(seed, idx))
            xa, keep = res.x_adv, idx
        except AttackError:
            xa, keep = [], []
            for j in idx:
                try:
                    r = perturb(attack, x[j:j + 1], y[j:j + 1], flow=flow, clf=clf,
                                rng=sample_rngs(seed, [j]))
                except AttackError as exc:
                    log.warning("attack failed on sample %d: %s", j, exc)
                    failed += 1
                    continue
                xa.append(r.x_adv[0])
                keep.append(j)
            if not keep:
                continue
            xa, keep = np.stack(xa), np.asarray(keep)
        pred = np.argmax(clf.logits(xa).data, axis=1)
        correct += int(np.sum(pred == y[keep]))
        used += len(keep)
    attacked = 100.0 * correct / used if used else float("nan")
    return RobustnessReport(attack.label(), clean, attacked, clean - attacked, len(x), failed)


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray
    n: int = 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise MetricError("covariance shape does not match mean")
        if not np.allclose(self.cov, self.cov.T, atol=1e-10, rtol=0):
            raise MetricError("covariance is not symmetric")
        self.cov = 0.5 * (self.cov + self.cov.T)


def gaussian_summary(features) -> GaussianSummary:
    """Column means and unbiased (N-1) covariance."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise MetricError("gaussian_summary needs an (N>=2, D) feature matrix")
    m = f.mean(axis=0)
    d = f - m
    c = d.T @ d / (f.shape[0] - 1)
    return GaussianSummary(m, 0.5 * (c + c.T), f.shape[0])


def _psd_sqrt(c: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (c + c.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """``|m_a - m_b|^2 + Tr(C_a + C_b - 2 (C_a C_b)^(1/2))``.

    The trace of the cross term is computed from the eigenvalues of the
    symmetric matrix ``C_a^(1/2) C_b C_a^(1/2)``, negative ones clamped to 0.
    """
    if a.mean.shape != b.mean.shape:
        raise MetricError(f"dimension mismatch {a.mean.size} vs {b.mean.size}")
    try:
        ra = _psd_sqrt(a.cov)
        inner = ra @ b.cov @ ra
        w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    except np.linalg.LinAlgError as exc:
        raise MetricError(f"eigendecomposition failed: {exc}") from exc
    cross = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    dm = a.mean - b.mean
    d = float(dm @ dm) + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * cross
    return max(d, 0.0)


class FeatureExtractor:
    """Penultimate-layer activations of a classifier, or any callable x -> (N, D)."""

    def __init__(self, source):
        self.source = source

    def __call__(self, x) -> np.ndarray:
        if hasattr(self.source, "features"):
            return np.asarray(self.source.features(x).data)
        return np.asarray(self.source(x))


def classifier_frechet_distance(extractor, x_a, x_b) -> float:
    """Fréchet distance between classifier-feature Gaussians of two sample sets."""
    return frechet_distance(gaussian_summary(extractor(x_a)), gaussian_summary(extractor(x_b)))
