"""Maximum-likelihood flow training and perturbation-augmented classifier training."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .attacks import AttackError, PerturbationSpec, perturb, sample_rngs
from .classify import Classifier, cross_entropy
from .flow import FlowModel, nll_objective
from .optim import LrSchedule, OptimizerState, optimizer_step, schedule_rate

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainPhase:
    perturbation: PerturbationSpec
    epochs: int

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("a training phase needs epochs >= 1")


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)
    phase_boundaries: list = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.records)

    def to_lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True) for r in self.records]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.to_lines():
                fh.write(line + "\n")

    @classmethod
    def read_jsonl(cls, path) -> TrainingHistory:
        with open(path) as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        bounds, prev = [], None
        for r in records:
            if r["phase"] != prev:
                bounds.append(r["epoch"])
                prev = r["phase"]
        return cls(records, bounds)


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_flow(model: FlowModel, data, labels=None, epochs: int = 10, batch_size: int = 100,
               optimizer: OptimizerState | None = None, schedule: LrSchedule | None = None,
               seed: int = 0) -> list[float]:
    """Fit ``model`` by minimizing the mean NLL; returns the per-epoch mean loss."""
    x = np.asarray(data, dtype=model.dtype)
    if labels is not None:
        labels = np.asarray(labels)
    optimizer = optimizer or OptimizerState("adam", lr=1e-3)
    schedule = schedule or LrSchedule("constant", base=optimizer.lr)
    params = model.params()
    rng = np.random.default_rng(seed)
    init_idx = rng.permutation(len(x))[: max(2, min(len(x), 4 * batch_size))]
    model.initialize(x[init_idx], None if labels is None else labels[init_idx])
    losses, step = [], 0
    for epoch in range(epochs):
        total, count = 0.0, 0
        for idx in _minibatches(len(x), batch_size, np.random.default_rng([seed, epoch])):
            lab = None if labels is None else labels[idx]
            value, grads = dc.evaluate_with_gradients(
                lambda *_: nll_objective(model, x[idx], lab), params)
            if not np.isfinite(value.data):
                raise TrainingError(f"non-finite flow NLL at epoch {epoch}")
            optimizer_step(optimizer, params, grads, schedule_rate(schedule, step, epoch))
            total += float(value.data) * len(idx)
            count += len(idx)
            step += 1
        losses.append(total / count)
        log.info("flow epoch %d nll %.4f", epoch, losses[-1])
    return losses


def evaluate_classifier(clf: Classifier, x, y, batch_size: int = 1000) -> tuple[float, float]:
    """(accuracy in percent, mean cross-entropy) on clean inputs."""
    correct, loss = 0, 0.0
    for i in range(0, len(x), batch_size):
        logits = clf.logits(x[i:i + batch_size])
        correct += int(np.sum(np.argmax(logits.data, axis=1) == y[i:i + batch_size]))
        loss += float(cross_entropy(logits, y[i:i + batch_size], reduction="sum").data)
    return 100.0 * correct / len(x), loss / len(x)


def spot_gradient_check(clf: Classifier, x, y, rng, step: float = 1e-5) -> float:
    """Relative error of one random parameter coordinate versus a central difference.

    The reference difference is always taken in float64 on a promoted copy of
    the parameters, so a float32 model is checked against an accurate oracle
    rather than against float32 round-off.
    """
    params = clf.params()
    _, grads = dc.evaluate_with_gradients(lambda *_: cross_entropy(clf.logits(x), y), params)
    pi = int(rng.integers(len(params)))
    ci = int(rng.integers(params[pi].data.size))
    analytic = float(grads[pi].data.reshape(-1)[ci])
    saved = [p.data for p in params]
    x64 = Tensor(np.asarray(x, dtype=np.float64))
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
        flat = params[pi].data.reshape(-1)
        orig = flat[ci]
        flat[ci] = orig + step
        fp = float(cross_entropy(clf.logits(x64), y).data)
        flat[ci] = orig - step
        fm = float(cross_entropy(clf.logits(x64), y).data)
    finally:
        for p, d in zip(params, saved):
            p.data = d
    numeric = (fp - fm) / (2 * step)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)


def train_classifier(clf: Classifier, train, phases, optimizer: OptimizerState,
                     schedule: LrSchedule | None = None, flow: FlowModel | None = None,
                     test=None, batch_size: int = 32, seed: int = 0,
                     grad_check_tol: float | None = None) -> TrainingHistory:
    """Train ``clf`` through consecutive phases.

    Every visited training sample is replaced by a fresh perturbation drawn
    according to the active phase, from a generator keyed by
    (seed, epoch, sample index). ``train``/``test`` are ``(x, y)`` pairs.
    """
    phases = list(phases)
    if not phases:
        raise TrainingError("at least one training phase is required")
    needs_flow = any(p.perturbation.is_latent for p in phases)
    if needs_flow and flow is None:
        raise TrainingError("latent perturbation phases need a flow")
    if flow is not None and not needs_flow:
        log.info("flow given but no latent phase; it is unused")
    x, y = np.asarray(train[0]), np.asarray(train[1]).astype(np.int64)
    schedule = schedule or LrSchedule("constant", base=optimizer.lr)
    params = clf.params()
    history = TrainingHistory()
    epoch, step = 0, 0
    for pi, phase in enumerate(phases):
        spec = phase.perturbation
        history.phase_boundaries.append(epoch)
        for _ in range(phase.epochs):
            rate = schedule_rate(schedule, step, epoch)
            total_loss, correct = 0.0, 0
            check_err = None
            for bi, idx in enumerate(_minibatches(len(x), batch_size,
                                                  np.random.default_rng([seed, epoch]))):
                xb, yb = x[idx], y[idx]
                if spec.kind != "none":
                    try:
                        res = perturb(spec, xb, yb, flow=flow, clf=clf,
                                      rng=sample_rngs(seed, idx, epoch=epoch))
                    except AttackError as exc:
                        bad = [int(idx[i]) for i in exc.indices]
                        log.error("attack failed at epoch %d for samples %s", epoch, bad)
                        raise TrainingError(f"attack failed for samples {bad}: {exc}") from exc
                    xb = res.x_adv
                if grad_check_tol is not None and bi == 0:
                    check_err = spot_gradient_check(clf, xb, yb, np.random.default_rng([seed, epoch, 7]))
                    if check_err > grad_check_tol:
                        raise TrainingError(f"gradient check failed at epoch {epoch}: "
                                            f"relative error {check_err:.2e}")

                seen = {}

                def objective(*_):
                    logits = seen["logits"] = clf.logits(xb)
                    return cross_entropy(logits, yb)

                value, grads = dc.evaluate_with_gradients(objective, params)
                optimizer_step(optimizer, params, grads, schedule_rate(schedule, step, epoch))
                total_loss += float(value.data) * len(idx)
                correct += int(np.sum(np.argmax(seen["logits"].data, axis=1) == yb))
                step += 1
            rec = {"epoch": epoch, "phase": pi, "perturbation": spec.label(), "lr": rate,
                   "train_acc": 100.0 * correct / len(x), "train_loss": total_loss / len(x)}
            if test is not None:
                rec["test_acc"], rec["test_loss"] = evaluate_classifier(clf, test[0], np.asarray(test[1]))
            if check_err is not None:
                rec["grad_check_rel_err"] = check_err
            history.records.append(rec)
            log.info("epoch %d phase %d %s", epoch, pi, json.dumps(rec, sort_keys=True))
            epoch += 1
    return history


def history_summary(history: TrainingHistory) -> dict:
    last = history.records[-1]
    return {k: last[k] for k in ("train_acc", "train_loss", "test_acc", "test_loss") if k in last}
