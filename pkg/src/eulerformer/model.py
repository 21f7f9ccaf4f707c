"""Pre-norm transformer read as an Euler discretisation of an ODE in depth.

A block at time ``t`` computes the derivative

    f(h) = ATT(LN1(h)) + FFN(LN2(h + ATT(LN1(h))))

so that ``h + f(h)`` is the usual pre-norm block. The backbone integrates
``h <- h + beta_i * s * f_{P(t_i)}(h)`` where ``P`` interpolates linearly
between ``n`` parameter sets placed uniformly on ``[0, (L - 1) s]``.
Embeddings, the final layer norm and the (tied) output projection sit outside
the ODE and are never scaled.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DomainError
from .euler import StepSchedule
from .numerics import Parameter, Var
from .rng import stream

BLOCK_KEYS = (
    "ln1_g", "ln1_b",
    "wq", "bq", "wk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b",
    "w1", "b1", "w2", "b2",
)
OBJECTIVES = ("causal-lm", "masked-lm")
_SNAP = 1e-9


@dataclass
class ModelConfig:
    L: int = 8
    s: float = 1.0
    n: int = 1
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 32
    max_seq_len: int = 64
    objective: str = "causal-lm"
    init_std: float = 0.02

    def __post_init__(self):
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if not 1 <= self.n <= self.L:
            raise ConfigError(f"n must lie in [1, L={self.L}], got {self.n}")
        if not self.s > 0:
            raise ConfigError(f"step size must be positive, got {self.s}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")

    @property
    def total_time(self) -> float:
        return self.L * self.s

    @property
    def spacing(self) -> float:
        """Distance between consecutive parameter sets on the time axis."""
        return (self.L - 1) * self.s / (self.n - 1) if self.n > 1 else math.inf

    def unit_schedule(self) -> StepSchedule:
        return StepSchedule(self.s, [1.0] * self.L, self.total_time)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParameterBank:
    """All trainable tensors: ``n`` block parameter sets plus embeddings and heads."""

    theta: list
    embed: Parameter
    pos: Parameter
    lnf_g: Parameter
    lnf_b: Parameter
    heads: dict = field(default_factory=dict)

    def named(self) -> dict:
        out = {}
        for k, blk in enumerate(self.theta):
            for key in BLOCK_KEYS:
                out[f"theta.{k}.{key}"] = blk[key]
        out["embed"] = self.embed
        out["pos"] = self.pos
        out["lnf_g"] = self.lnf_g
        out["lnf_b"] = self.lnf_b
        for name, p in self.heads.items():
            out[f"head.{name}"] = p
        return out

    def parameters(self) -> list:
        return list(self.named().values())

    def backbone_parameters(self) -> list:
        return [p for name, p in self.named().items() if not name.startswith("head.")]

    def state(self) -> dict:
        return {k: p.value.copy() for k, p in self.named().items()}

    @classmethod
    def from_state(cls, arrays: dict, n: int) -> "ParameterBank":
        theta = [{key: Parameter(arrays[f"theta.{k}.{key}"], f"theta.{k}.{key}")
                  for key in BLOCK_KEYS} for k in range(n)]
        heads = {name[5:]: Parameter(a, name) for name, a in arrays.items()
                 if name.startswith("head.")}
        return cls(theta, Parameter(arrays["embed"], "embed"), Parameter(arrays["pos"], "pos"),
                   Parameter(arrays["lnf_g"], "lnf_g"), Parameter(arrays["lnf_b"], "lnf_b"),
                   heads)


@dataclass
class Trajectory:
    """Hidden states at every iteration boundary and the derivatives between them."""

    states: list
    derivs: list
    times: list
    schedule: StepSchedule

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def init_block(config: ModelConfig, rng: np.random.Generator, prefix: str = "") -> dict:
    d, dff, std = config.d_model, config.d_ff, config.init_std
    out_std = std / math.sqrt(2 * config.L)
    shapes = {
        "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
        "wq": rng.normal(0, std, (d, d)), "bq": np.zeros(d),
        "wk": rng.normal(0, std, (d, d)),
        "wv": rng.normal(0, std, (d, d)), "bv": np.zeros(d),
        "wo": rng.normal(0, out_std, (d, d)), "bo": np.zeros(d),
        "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
        "w1": rng.normal(0, std, (d, dff)), "b1": np.zeros(dff),
        "w2": rng.normal(0, out_std, (dff, d)), "b2": np.zeros(d),
    }
    return {k: Parameter(shapes[k], f"{prefix}{k}") for k in BLOCK_KEYS}


def init_bank(config: ModelConfig, seed: int) -> ParameterBank:
    """Deterministic scaled-normal initialisation from ``seed``."""
    rng = stream(seed, "init")
    theta = [init_block(config, rng, f"theta.{k}.") for k in range(config.n)]
    d = config.d_model
    return ParameterBank(
        theta=theta,
        embed=Parameter(rng.normal(0, config.init_std, (config.vocab_size, d)), "embed"),
        pos=Parameter(rng.normal(0, config.init_std, (config.max_seq_len, d)), "pos"),
        lnf_g=Parameter(np.ones(d), "lnf_g"),
        lnf_b=Parameter(np.zeros(d), "lnf_b"),
    )


# --------------------------------------------------------------------------
# parameter interpolation
# --------------------------------------------------------------------------

def interp_coords(t: float, config: ModelConfig):
    """Return ``(l, r, w)`` so that ``P(t) = theta_l + w (theta_r - theta_l)``.

    Times beyond ``(L - 1) s`` clamp to the last set; positions within 1e-9
    of a grid point snap onto it so that accumulated rounding in ``t`` still
    lands exactly on stored parameters.
    """
    if t < 0:
        raise DomainError(f"interpolation time must be >= 0, got {t}")
    if config.n == 1:
        return 0, 0, 0.0
    u = t / config.spacing
    k = round(u)
    if abs(u - k) <= _SNAP:
        u = float(k)
    if u >= config.n - 1:
        return config.n - 1, config.n - 1, 0.0
    l, r = math.floor(u), math.ceil(u)
    if l == r:
        return l, l, 0.0
    return l, r, u - l


def interpolate_params(bank: ParameterBank, t: float, config: ModelConfig) -> dict:
    """Block parameters at time ``t``; gradients flow to both neighbouring sets."""
    l, r, w = interp_coords(t, config)
    if l == r or w == 0.0:
        return bank.theta[l]
    a, b = bank.theta[l], bank.theta[r]
    return {key: nm.lerp(a[key], b[key], w) for key in BLOCK_KEYS}


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------

def block_derivative(params: dict, h, n_heads: int, mask=None) -> Var:
    """``f(h) = ATT(LN1(h)) + FFN(LN2(h + ATT(LN1(h))))``."""
    p = params
    a = nm.attention(nm.layer_norm(h, p["ln1_g"], p["ln1_b"]),
                     p["wq"], p["bq"], p["wk"], p["wv"], p["bv"], p["wo"], p["bo"],
                     n_heads=n_heads, mask=mask)
    x = nm.add(h, a)
    ff = nm.feed_forward(nm.layer_norm(x, p["ln2_g"], p["ln2_b"]),
                         p["w1"], p["b1"], p["w2"], p["b2"])
    return nm.add(a, ff)


def attention_mask(config: ModelConfig, seq: int):
    return nm.causal_mask(seq) if config.objective == "causal-lm" else None


def check_schedule(schedule: StepSchedule, config: ModelConfig) -> None:
    if not math.isclose(schedule.base_step, config.s, rel_tol=1e-12):
        raise ConfigError(f"schedule base step {schedule.base_step} != model step {config.s}")
    if abs(schedule.covered_time() - config.total_time) > 0.5 * config.s + 1e-12:
        raise ConfigError(
            f"schedule covers {schedule.covered_time():.6g}, model time is {config.total_time:.6g}")


def embed_tokens(bank: ParameterBank, tokens, config: ModelConfig) -> Var:
    tokens = np.asarray(tokens)
    seq = tokens.shape[-1]
    if seq > config.max_seq_len:
        raise ConfigError(f"sequence length {seq} exceeds max_seq_len {config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ConfigError(f"token ids must lie in [0, {config.vocab_size})")
    return nm.add(nm.embed(tokens, bank.embed), nm.embed(np.arange(seq), bank.pos))


def integrate(bank: ParameterBank, h, schedule: StepSchedule, config: ModelConfig,
              start: int = 0, stop: Optional[int] = None, traj: Optional[Trajectory] = None):
    """Run Euler steps ``start .. stop-1`` of ``schedule`` from state ``h``.

    Appends to ``traj`` when given. Returns the new state.
    """
    stop = schedule.iters if stop is None else stop
    times = schedule.times()
    mask = attention_mask(config, h.shape[-2])
    for i in range(start, stop):
        t = times[i]
        params = interpolate_params(bank, t, config)
        f = block_derivative(params, h, config.n_heads, mask)
        h = nm.add(h, nm.scale(f, schedule.scales[i] * schedule.base_step))
        if traj is not None:
            traj.derivs.append(f.value)
            traj.states.append(h.value)
    return h


def run_backbone(bank: ParameterBank, tokens, schedule: StepSchedule, config: ModelConfig):
    """Embed and integrate; returns ``(h_T, trajectory)``."""
    check_schedule(schedule, config)
    h = embed_tokens(bank, tokens, config)
    traj = Trajectory(states=[h.value], derivs=[], times=schedule.times(), schedule=schedule)
    h = integrate(bank, h, schedule, config, traj=traj)
    return h, traj


def final_norm(bank: ParameterBank, h) -> Var:
    return nm.layer_norm(h, bank.lnf_g, bank.lnf_b)


def lm_head(bank: ParameterBank, h) -> Var:
    return nm.matmul_t(final_norm(bank, h), bank.embed)


def forward(bank: ParameterBank, tokens, schedule: StepSchedule, config: ModelConfig):
    """Token logits and the recorded trajectory."""
    h, traj = run_backbone(bank, tokens, schedule, config)
    return lm_head(bank, h), traj


def loss(logits, targets, objective: str = "causal-lm", weights=None) -> Var:
    """Mean cross-entropy over the predicted positions.

    For ``causal-lm`` the caller passes already-shifted targets. For
    ``masked-lm`` ``weights`` must mark the masked positions.
    """
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}")
    if objective == "masked-lm" and weights is None:
        raise ConfigError("masked-lm loss needs the mask positions as weights")
    return nm.cross_entropy(logits, targets, weights)


def pool(h, config: ModelConfig) -> Var:
    """First position for masked-lm, last position for causal-lm."""
    return nm.select(h, 0 if config.objective == "masked-lm" else -1, axis=-2)
