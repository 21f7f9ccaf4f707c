"""Entropy-thresholded early exit with per-iteration linear classifiers.

Heads are trained on a frozen, fine-tuned backbone at one fixed schedule; the
training loss is the sum over iteration boundaries of each head's
cross-entropy. At inference the first head whose predictive entropy (nats)
falls strictly below the threshold answers.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as M
from . import numerics as nm
from .checkpoint import Checkpoint, load_tensors, save_tensors
from .data import ClassificationSet
from .errors import ConfigError, DataError
from .euler import StepSchedule
from .numerics import Parameter
from .rng import stream
from .training import TrainConfig, TrainLog, _optimise


@dataclass
class ExitHeads:
    weights: list
    biases: list
    schedule: StepSchedule
    num_classes: int

    @property
    def iters(self) -> int:
        return len(self.weights)

    def parameters(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def logits(self, i: int, pooled: np.ndarray) -> np.ndarray:
        return pooled @ self.weights[i].value + self.biases[i].value

    def check(self, schedule: StepSchedule) -> None:
        if (schedule.scales != self.schedule.scales
                or schedule.base_step != self.schedule.base_step):
            raise ConfigError(
                f"exit heads were trained at scales {self.schedule.scales}, got {schedule.scales}")

    def save(self, path) -> None:
        arrays = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"exit.{i}.W"] = w.value
            arrays[f"exit.{i}.b"] = b.value
        meta = {"kind": "exit-heads", "num_classes": self.num_classes,
                "schedule": {"base_step": self.schedule.base_step,
                             "scales": self.schedule.scales,
                             "total_time": self.schedule.total_time}}
        save_tensors(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "ExitHeads":
        arrays, meta = load_tensors(path)
        if meta.get("kind") != "exit-heads":
            raise DataError(f"{path} does not hold exit heads")
        n = len(meta["schedule"]["scales"])
        return cls([Parameter(arrays[f"exit.{i}.W"], f"exit.{i}.W") for i in range(n)],
                   [Parameter(arrays[f"exit.{i}.b"], f"exit.{i}.b") for i in range(n)],
                   StepSchedule(**meta["schedule"]), meta["num_classes"])


@dataclass
class ExitPolicy:
    threshold: float

    def __post_init__(self):
        if not self.threshold >= 0:
            raise ConfigError(f"entropy threshold must be >= 0, got {self.threshold}")


@dataclass
class ExitStats:
    threshold: float
    avg_iterations: float
    accuracy: float
    exit_indices: np.ndarray

    @property
    def compute(self) -> float:
        """Average block evaluations per example (one unit per iteration)."""
        return self.avg_iterations


def entropy(logits: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of softmax(logits) over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    return -(np.exp(logp) * logp).sum(axis=-1)


def _pooled_path(ckpt: Checkpoint, schedule: StepSchedule, X: np.ndarray, batch: int = 128):
    """Final-normed pooled state at every boundary 1..iters: shape (N, iters, d)."""
    config, bank = ckpt.config, ckpt.bank
    out = []
    with nm.no_grad():
        for lo in range(0, len(X), batch):
            _, traj = M.run_backbone(bank, X[lo:lo + batch], schedule, config)
            pooled = [M.final_norm(bank, M.pool(nm.Var(h), config)).value
                      for h in traj.states[1:]]
            out.append(np.stack(pooled, axis=1))
    return np.concatenate(out)


def train_exit_heads(ckpt: Checkpoint, schedule: StepSchedule, data: ClassificationSet,
                     tc: TrainConfig, log: TrainLog | None = None) -> ExitHeads:
    """Train one linear head per iteration boundary; the backbone is never touched."""
    if "cls.W" not in ckpt.bank.heads:
        raise ConfigError("exit heads need a fine-tuned checkpoint with a task head")
    M.check_schedule(schedule, ckpt.config)
    num_classes = ckpt.bank.heads["cls.W"].shape[1]
    if data.num_classes != num_classes:
        raise DataError(f"data has {data.num_classes} classes, task head {num_classes}")
    feats = _pooled_path(ckpt, schedule, data.X)
    rng = stream(tc.seed, "exit-heads")
    d = ckpt.config.d_model
    heads = ExitHeads(
        [Parameter(rng.normal(0, 0.02, (d, num_classes)), f"exit.{i}.W")
         for i in range(schedule.iters)],
        [Parameter(np.zeros(num_classes), f"exit.{i}.b") for i in range(schedule.iters)],
        schedule, num_classes)
    batch_rng = stream(tc.seed, "exit-batches")

    def loss_fn(step):
        idx = batch_rng.integers(0, len(data), size=tc.batch)
        total = None
        for i in range(heads.iters):
            logits = nm.linear(feats[idx, i], heads.weights[i], heads.biases[i])
            ce = nm.cross_entropy(logits, data.y[idx])
            total = ce if total is None else nm.add(total, ce)
        return total

    _optimise(heads.parameters(), loss_fn, tc, TrainLog() if log is None else log, "exit-head training")
    return heads


def infer_with_exit(ckpt: Checkpoint, heads: ExitHeads, policy: ExitPolicy, x: np.ndarray,
                    schedule: StepSchedule | None = None):
    """Run one example iteration by iteration; return ``(prediction, exit_index)``.

    ``exit_index`` counts iterations executed (1-based).
    """
    schedule = heads.schedule if schedule is None else schedule
    heads.check(schedule)
    config, bank = ckpt.config, ckpt.bank
    x = np.asarray(x)[None, :]
    with nm.no_grad():
        h = M.embed_tokens(bank, x, config)
        for i in range(schedule.iters):
            h = M.integrate(bank, h, schedule, config, start=i, stop=i + 1)
            pooled = M.final_norm(bank, M.pool(h, config)).value
            logits = heads.logits(i, pooled)[0]
            if i == schedule.iters - 1 or entropy(logits) < policy.threshold:
                return int(np.argmax(logits)), i + 1
    raise AssertionError("unreachable")


def exit_path(ckpt: Checkpoint, heads: ExitHeads, X: np.ndarray):
    """Logits of every head on every example: shape (N, iters, C)."""
    feats = _pooled_path(ckpt, heads.schedule, X)
    return np.stack([heads.logits(i, feats[:, i]) for i in range(heads.iters)], axis=1)


def decide(path_logits: np.ndarray, threshold: float):
    """Exit index (1-based) and prediction per example from precomputed head logits."""
    ent = entropy(path_logits)
    n, iters = ent.shape
    hit = ent[:, :-1] < threshold
    first = np.where(hit.any(axis=1), hit.argmax(axis=1), iters - 1)
    preds = np.argmax(path_logits[np.arange(n), first], axis=-1)
    return first + 1, preds


def sweep(ckpt: Checkpoint, heads: ExitHeads, thresholds, eval_set: ClassificationSet):
    """One :class:`ExitStats` per threshold (thresholds must be ascending)."""
    if len(eval_set) == 0:
        raise DataError("empty evaluation set")
    thresholds = [float(t) for t in thresholds]
    if thresholds != sorted(thresholds):
        raise ConfigError("thresholds must be ascending")
    for t in thresholds:
        ExitPolicy(t)
    path = exit_path(ckpt, heads, eval_set.X)
    out = []
    for t in thresholds:
        idx, preds = decide(path, t)
        out.append(ExitStats(t, float(idx.mean()), float(np.mean(preds == eval_set.y)), idx))
    return out


def write_sweep_csv(path, stats) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "avg_iterations", "accuracy", "compute"])
        for s in stats:
            w.writerow([repr(s.threshold), repr(s.avg_iterations), repr(s.accuracy),
                        repr(s.compute)])
