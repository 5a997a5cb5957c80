"""Optimizers and learning-rate schedules."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OPTIMIZERS = ("sgd", "sgd_momentum_nesterov", "adam", "adamax")
SCHEDULES = ("constant", "exponential", "milestones", "linear_warmup")


class OptimizerError(ValueError):
    pass


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    accumulators: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise OptimizerError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise OptimizerError("lr must be > 0 and weight_decay >= 0")
        if not 0 <= self.momentum < 1 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise OptimizerError("momentum and beta coefficients must lie in [0, 1)")


def optimizer_step(state: OptimizerState, params, grads, rate: float | None = None) -> None:
    """Update ``params`` (Tensors or arrays) in place.

    Weight decay enters as the additive gradient term ``weight_decay * theta``.
    All updates are computed first; if any is non-finite nothing is written.
    """
    rate = state.lr if rate is None else rate
    arrays = [p if isinstance(p, np.ndarray) else p.data for p in params]
    gs = [np.asarray(g if isinstance(g, np.ndarray) else getattr(g, "data", g)) for g in grads]
    if len(arrays) != len(gs):
        raise OptimizerError("params and grads differ in length")
    for a, g in zip(arrays, gs):
        if a.shape != g.shape:
            raise OptimizerError(f"grad shape {g.shape} != param shape {a.shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError("non-finite gradient")
    if not state.accumulators:
        n_slots = {"sgd": 0, "sgd_momentum_nesterov": 1, "adam": 2, "adamax": 2}[state.kind]
        state.accumulators = [[np.zeros_like(a) for _ in range(n_slots)] for a in arrays]
    t = state.step_count + 1
    new_acc, updates = [], []
    for a, g, acc in zip(arrays, gs, state.accumulators):
        if state.weight_decay:
            g = g + state.weight_decay * a
        if state.kind == "sgd":
            new_acc.append([])
            updates.append(rate * g)
        elif state.kind == "sgd_momentum_nesterov":
            buf = state.momentum * acc[0] + g
            new_acc.append([buf])
            updates.append(rate * (g + state.momentum * buf))
        elif state.kind == "adam":
            m = state.beta1 * acc[0] + (1 - state.beta1) * g
            v = state.beta2 * acc[1] + (1 - state.beta2) * g * g
            mhat = m / (1 - state.beta1 ** t)
            vhat = v / (1 - state.beta2 ** t)
            new_acc.append([m, v])
            updates.append(rate * mhat / (np.sqrt(vhat) + state.eps))
        else:
            m = state.beta1 * acc[0] + (1 - state.beta1) * g
            u = np.maximum(state.beta2 * acc[1], np.abs(g))
            new_acc.append([m, u])
            updates.append(rate / (1 - state.beta1 ** t) * m / (u + state.eps))
    if not all(np.all(np.isfinite(u)) for u in updates):
        raise OptimizerError("non-finite parameter update; parameters left untouched")
    for a, u in zip(arrays, updates):
        a -= u.astype(a.dtype, copy=False)
    state.accumulators = new_acc
    state.step_count = t


@dataclass(frozen=True)
class LrSchedule:
    """``exponential``: base * rate ** (step / interval).
    ``milestones``: base * factor ** (#milestones <= epoch).
    ``linear_warmup``: base * min(1, max(step, 1) / warmup_steps).
    """

    kind: str = "constant"
    base: float = 1e-3
    rate: float = 0.1
    interval: int = 10000
    milestones: tuple = ()
    factor: float = 0.1
    warmup_steps: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise OptimizerError(f"unknown schedule {self.kind!r}; expected one of {SCHEDULES}")
        if self.base <= 0:
            raise OptimizerError("base rate must be positive")
        if self.kind == "exponential" and (self.rate <= 0 or self.interval <= 0):
            raise OptimizerError("exponential decay needs rate > 0 and interval > 0")
        if self.kind == "milestones" and self.factor <= 0:
            raise OptimizerError("milestone factor must be positive")
        if self.kind == "linear_warmup" and self.warmup_steps < 1:
            raise OptimizerError("warmup_steps must be >= 1")
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))


def schedule_rate(schedule: LrSchedule, step: int = 0, epoch: int = 0) -> float:
    """Rate for the given step and epoch, never below the smallest positive float."""
    if step < 0 or epoch < 0:
        raise OptimizerError("step and epoch must be non-negative")
    return max(_raw_rate(schedule, step, epoch), np.finfo(np.float64).tiny)


def _raw_rate(schedule: LrSchedule, step: int, epoch: int) -> float:
    s = schedule
    if s.kind == "constant":
        return s.base
    if s.kind == "exponential":
        return s.base * s.rate ** (step / s.interval)
    if s.kind == "milestones":
        passed = sum(1 for m in s.milestones if epoch >= m)
        return s.base * s.factor ** passed
    return s.base * min(1.0, max(step, 1) / s.warmup_steps)
