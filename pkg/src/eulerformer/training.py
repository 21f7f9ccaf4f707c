"""Pre-training, classifier fine-tuning and evaluation at toy scale."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import model as M
from . import numerics as nm
from .checkpoint import Checkpoint
from .data import ClassificationSet, Corpus
from .errors import ConfigError, DataError, NumericError
from .euler import StepSchedule
from .numerics import Parameter
from .rng import stream


@dataclass
class TrainConfig:
    steps: int = 300
    batch: int = 8
    seq_len: int = 32
    peak_lr: float = 3e-3
    min_lr: float = 3e-4
    warmup_ratio: float = 0.05
    decay: str = "cosine"
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 10
    mask_prob: float = 0.15
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1 or self.seq_len < 1:
            raise ConfigError("steps, batch and seq_len must be positive")
        if not 0 <= self.warmup_ratio <= 1:
            raise ConfigError(f"warmup_ratio must lie in [0, 1], got {self.warmup_ratio}")
        if not self.peak_lr > self.min_lr >= 0:
            raise ConfigError(f"need peak_lr > min_lr >= 0, got {self.peak_lr}, {self.min_lr}")
        if self.decay not in ("linear", "cosine"):
            raise ConfigError(f"decay must be linear or cosine, got {self.decay!r}")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_ratio * self.steps)))


def learning_rate(step: int, tc: TrainConfig) -> float:
    """LR at 0-based ``step``.

    Linear warmup reaches ``peak_lr`` at step ``warmup_steps - 1``; the decay
    then ends at ``min_lr`` on the final step ``steps - 1``.
    """
    W = tc.warmup_steps
    if step < W:
        return tc.peak_lr * (step + 1) / W
    span = tc.steps - W
    if span <= 0:
        return tc.peak_lr
    p = min(1.0, (step - W + 1) / span)
    if tc.decay == "linear":
        return tc.min_lr + (tc.peak_lr - tc.min_lr) * (1.0 - p)
    return tc.min_lr + 0.5 * (tc.peak_lr - tc.min_lr) * (1.0 + math.cos(math.pi * p))


def global_norm(params) -> float:
    return math.sqrt(math.fsum(float(np.vdot(p.grad, p.grad)) for p in params))


def clip_gradients(params, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_norm(params)
    if norm > max_norm:
        c = max_norm / norm
        for p in params:
            p.grad = p.grad * c
    return norm


class AdamW:
    """Adam with decoupled weight decay (applied to matrices only)."""

    def __init__(self, params, tc: TrainConfig):
        self.params = list(params)
        self.tc = tc
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        tc = self.tc
        self.t += 1
        c1 = 1 - tc.beta1 ** self.t
        c2 = 1 - tc.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= tc.beta1
            m += (1 - tc.beta1) * g
            v *= tc.beta2
            v += (1 - tc.beta2) * g * g
            if p.value.ndim >= 2 and tc.weight_decay:
                p.value *= 1 - lr * tc.weight_decay
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + tc.adam_eps)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, step, lr, loss, grad_norm):
        self.rows.append((step, lr, loss, grad_norm))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "train_loss", "grad_norm"])
            for row in self.rows:
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


def mask_tokens(tokens: np.ndarray, rng: np.random.Generator, prob: float):
    """Replace a random subset of positions with the reserved id 0.

    Returns ``(inputs, weights)``; at least one position per batch is masked.
    """
    weights = (rng.random(tokens.shape) < prob).astype(np.float64)
    if not weights.any():
        weights.flat[int(rng.integers(weights.size))] = 1.0
    return np.where(weights > 0, 0, tokens), weights


def lm_batch_loss(bank, config: M.ModelConfig, window: np.ndarray, schedule: StepSchedule,
                  rng: Optional[np.random.Generator] = None, mask_prob: float = 0.15):
    """Loss of one batch of windows of length ``seq_len + 1``.

    Returns ``(loss, trajectory, predicted_positions)``.
    """
    if config.objective == "causal-lm":
        logits, traj = M.forward(bank, window[:, :-1], schedule, config)
        return M.loss(logits, window[:, 1:], "causal-lm"), traj, window[:, 1:].size
    tokens = window[:, :-1]
    inputs, weights = mask_tokens(tokens, rng, mask_prob)
    logits, traj = M.forward(bank, inputs, schedule, config)
    return M.loss(logits, tokens, "masked-lm", weights), traj, float(weights.sum())


def _optimise(params, loss_fn, tc: TrainConfig, log: TrainLog, what: str):
    opt = AdamW(params, tc)
    last = float("nan")
    for step in range(tc.steps):
        nm.zero_grads(params)
        loss = loss_fn(step)
        last = float(loss.value)
        if not math.isfinite(last):
            raise NumericError(f"{what} diverged at step {step} (loss {last})")
        nm.backward(loss)
        norm = clip_gradients(params, tc.grad_clip)
        if not math.isfinite(norm):
            raise NumericError(f"{what} diverged at step {step} (grad norm {norm})")
        lr = learning_rate(step, tc)
        opt.step(lr)
        if step % tc.log_every == 0 or step == tc.steps - 1:
            log.add(step, lr, last, norm)
    return last


def pretrain(config: M.ModelConfig, corpus: Corpus, tc: TrainConfig,
             log: Optional[TrainLog] = None) -> Checkpoint:
    """Language-model pre-training on random corpus windows with the unit schedule."""
    if corpus.vocab_size > config.vocab_size:
        raise ConfigError(f"corpus vocabulary {corpus.vocab_size} exceeds model {config.vocab_size}")
    if tc.seq_len > config.max_seq_len:
        raise ConfigError(f"seq_len {tc.seq_len} exceeds max_seq_len {config.max_seq_len}")
    log = TrainLog() if log is None else log
    bank = M.init_bank(config, tc.seed)
    data_rng = stream(tc.seed, "data")
    mask_rng = stream(tc.seed, "mask")
    schedule = config.unit_schedule()
    params = bank.parameters()

    def loss_fn(step):
        window = corpus.sample(data_rng, tc.batch, tc.seq_len + 1)
        return lm_batch_loss(bank, config, window, schedule, mask_rng, tc.mask_prob)[0]

    last = _optimise(params, loss_fn, tc, log, "pre-training")
    return Checkpoint(config=config, bank=bank, train_config=tc.to_dict(), seed=tc.seed,
                      corpus_id=corpus.id,
                      provenance={"final_train_loss": last, "task": "pretrain"})


# --------------------------------------------------------------------------
# classification
# --------------------------------------------------------------------------

def classifier_logits(bank, config: M.ModelConfig, X: np.ndarray, schedule: StepSchedule,
                      head: str = "cls"):
    h, traj = M.run_backbone(bank, X, schedule, config)
    pooled = M.final_norm(bank, M.pool(h, config))
    return nm.linear(pooled, bank.heads[f"{head}.W"], bank.heads[f"{head}.b"]), traj


def add_head(bank, d_model: int, num_classes: int, rng, name: str = "cls") -> None:
    bank.heads[f"{name}.W"] = Parameter(rng.normal(0, 0.02, (d_model, num_classes)),
                                        f"head.{name}.W")
    bank.heads[f"{name}.b"] = Parameter(np.zeros(num_classes), f"head.{name}.b")


def finetune_classifier(ckpt: Checkpoint, train_set: ClassificationSet,
                        valid_set: ClassificationSet, tc: TrainConfig,
                        freeze_backbone: bool = False, log: Optional[TrainLog] = None):
    """Attach a linear head on the pooled final state and train it.

    Returns ``(checkpoint, validation_accuracy)``; the input checkpoint is not
    modified.
    """
    config = ckpt.config
    for ds in (train_set, valid_set):
        if ds.X.max() >= config.vocab_size:
            raise DataError(f"task tokens exceed the model vocabulary {config.vocab_size}")
        if ds.X.shape[1] > config.max_seq_len:
            raise DataError(f"task sequences longer than max_seq_len {config.max_seq_len}")
    if valid_set.num_classes != train_set.num_classes:
        raise DataError("train and validation sets disagree on the class count")
    log = TrainLog() if log is None else log
    bank = M.ParameterBank.from_state(ckpt.bank.state(), len(ckpt.bank.theta))
    add_head(bank, config.d_model, train_set.num_classes, stream(tc.seed, "head-init"))
    schedule = config.unit_schedule()
    params = ([p for k, p in bank.heads.items() if k.startswith("cls.")] if freeze_backbone
              else bank.parameters())
    rng = stream(tc.seed, "finetune-batches")

    def loss_fn(step):
        idx = rng.integers(0, len(train_set), size=tc.batch)
        if freeze_backbone:
            with nm.no_grad():
                h, _ = M.run_backbone(bank, train_set.X[idx], schedule, config)
            pooled = M.final_norm(bank, nm.Var(M.pool(h, config).value))
            logits = nm.linear(pooled, bank.heads["cls.W"], bank.heads["cls.b"])
        else:
            logits, _ = classifier_logits(bank, config, train_set.X[idx], schedule)
        return nm.cross_entropy(logits, train_set.y[idx])

    last = _optimise(params, loss_fn, tc, log, "fine-tuning")
    out = Checkpoint(config=config, bank=bank, train_config=tc.to_dict(), seed=tc.seed,
                     corpus_id=ckpt.corpus_id,
                     provenance={**ckpt.provenance, "task": train_set.name,
                                 "num_classes": train_set.num_classes,
                                 "finetune_loss": last, "frozen_backbone": freeze_backbone})
    acc = evaluate(out, schedule, valid_set)
    out.provenance["valid_accuracy"] = acc
    return out, acc


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass
class LMEvalSet:
    """Windows of ``seq_len + 1`` tokens scored by perplexity."""

    windows: np.ndarray
    vocab_size: int
    seed: int = 0
    mask_prob: float = 0.15

    @classmethod
    def from_corpus(cls, corpus: Corpus, seq_len: int, count: int = 16, **kw) -> "LMEvalSet":
        return cls(corpus.windows(seq_len + 1, count), corpus.vocab_size, **kw)


def evaluate(ckpt: Checkpoint, schedule: StepSchedule, eval_set, batch: int = 64) -> float:
    """Perplexity for :class:`LMEvalSet`, accuracy for :class:`ClassificationSet`."""
    config, bank = ckpt.config, ckpt.bank
    M.check_schedule(schedule, config)
    with nm.no_grad():
        if isinstance(eval_set, LMEvalSet):
            if eval_set.vocab_size > config.vocab_size:
                raise ConfigError(
                    f"eval vocabulary {eval_set.vocab_size} exceeds model {config.vocab_size}")
            rng = stream(eval_set.seed, "eval-mask")
            total, count = 0.0, 0.0
            for lo in range(0, len(eval_set.windows), batch):
                w = eval_set.windows[lo:lo + batch]
                loss, _, n = lm_batch_loss(bank, config, w, schedule, rng, eval_set.mask_prob)
                total += float(loss.value) * n
                count += n
            return math.exp(total / count)
        if isinstance(eval_set, ClassificationSet):
            if eval_set.X.max() >= config.vocab_size:
                raise ConfigError("task tokens exceed the model vocabulary")
            return float(np.mean(predict(ckpt, schedule, eval_set.X, batch) == eval_set.y))
    raise ConfigError(f"unsupported eval set {type(eval_set).__name__}")


def predict(ckpt: Checkpoint, schedule: StepSchedule, X: np.ndarray, batch: int = 64):
    out = []
    with nm.no_grad():
        for lo in range(0, len(X), batch):
            logits, _ = classifier_logits(ckpt.bank, ckpt.config, X[lo:lo + batch], schedule)
            out.append(np.argmax(logits.value, axis=-1))
    return np.concatenate(out)
