"""Trajectory diagnostics: terminal-state gaps, derivative alignment, relative change.

Norms are L2 over the flattened (sequence x d_model) final state of each
example, averaged over the batch. Final states are taken after the iterated
block and before the final layer norm.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DomainError
from .euler import bound_constant
from . import model as M
from . import numerics as nm
from .model import Trajectory
from .rng import stream

REDUCTION_NOTE = "L2 over flattened (seq x d_model) pre-final-norm state; mean over examples"


@dataclass
class DiffReport:
    absolute: float
    relative: float


@dataclass
class CosineProfile:
    values: list
    zero_flags: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else float("nan")


def _per_example(a: np.ndarray) -> np.ndarray:
    """Reshape to (examples, features); a 2-D state is one example."""
    return a.reshape(1, -1) if a.ndim <= 2 else a.reshape(a.shape[0], -1)


def hidden_diff(full: Trajectory, reduced: Trajectory) -> DiffReport:
    """Mean ``||h_T - h~_T||`` and mean ``||h_T - h~_T|| / ||h_T||`` over examples."""
    if not np.array_equal(full.states[0], reduced.states[0]):
        raise ConfigError("trajectories start from different inputs")
    tol = 0.5 * full.schedule.base_step + 1e-12
    if abs(full.schedule.covered_time() - reduced.schedule.covered_time()) > tol:
        raise ConfigError("trajectories end at different times")
    a, b = _per_example(full.final), _per_example(reduced.final)
    gap = np.linalg.norm(a - b, axis=1)
    ref = np.linalg.norm(a, axis=1)
    rel = np.divide(gap, ref, out=np.zeros_like(gap), where=ref > 0)
    return DiffReport(float(gap.mean()), float(rel.mean()))


def cosine(u: np.ndarray, v: np.ndarray):
    """Cosine of flattened vectors; ``(0.0, True)`` if either has zero norm."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0, True
    return float(np.clip(np.vdot(u, v) / (nu * nv), -1.0, 1.0)), False


def cosine_profile(traj: Trajectory) -> CosineProfile:
    """``cos(f(h_i), f(h_{i-1}))`` for i = 1 .. iters-1, averaged over examples."""
    if len(traj.derivs) < 2:
        raise ConfigError("need at least two derivative records")
    values, flags = [], []
    for prev, cur in zip(traj.derivs, traj.derivs[1:]):
        P, C = _per_example(prev), _per_example(cur)
        cs, fl = zip(*(cosine(c, p) for c, p in zip(C, P)))
        values.append(float(np.mean(cs)))
        flags.append(any(fl))
    return CosineProfile(values, flags)


def relative_change(p_reduced: float, p_orig: float) -> float:
    """Percentage change ``100 (p_reduced - p_orig) / p_orig``."""
    if p_orig == 0:
        raise DomainError("relative change undefined for a zero baseline")
    return 100.0 * (p_reduced - p_orig) / p_orig


def write_cosine_csv(path, profile: CosineProfile) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# cosine between consecutive derivatives; {REDUCTION_NOTE}\n")
        w = csv.writer(fh)
        w.writerow(["layer", "cosine", "zero_norm"])
        for i, (v, z) in enumerate(zip(profile.values, profile.zero_flags), start=1):
            w.writerow([i, repr(v), int(z)])


def write_diff_csv(path, rows) -> None:
    """``rows``: iterable of ``(iters, DiffReport)``."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {REDUCTION_NOTE}\n")
        w = csv.writer(fh)
        w.writerow(["iters", "absolute", "relative"])
        for iters, rep in rows:
            w.writerow([iters, repr(rep.absolute), repr(rep.relative)])


def estimate_lipschitz(bank, config, traj: Trajectory, probes: int = 4, rel: float = 1e-3,
                       seed: int = 0) -> float:
    """Largest observed ``||f(h + d) - f(h)|| / ||d||`` along a trajectory.

    ``d`` is a random perturbation of relative size ``rel`` applied per example
    at every recorded state, with the block parameters of that state's time.
    A sampled lower estimate of the true Lipschitz constant, not a certificate.
    """
    rng = stream(seed, "lipschitz")
    best = 0.0
    with nm.no_grad():
        for h, t in zip(traj.states[:-1], traj.times[:-1]):
            params = M.interpolate_params(bank, t, config)
            mask = M.attention_mask(config, h.shape[-2])
            f0 = M.block_derivative(params, h, config.n_heads, mask).value
            for _ in range(probes):
                d = _per_example(rng.normal(size=h.shape))
                d *= (rel * np.linalg.norm(_per_example(h), axis=1)
                      / np.linalg.norm(d, axis=1))[:, None]
                d = d.reshape(h.shape)
                f1 = M.block_derivative(params, h + d, config.n_heads, mask).value
                ratio = (np.linalg.norm(_per_example(f1 - f0), axis=1)
                         / np.linalg.norm(_per_example(d), axis=1))
                best = max(best, float(ratio.max()))
    return best


def empirical_bound_constant(traj: Trajectory, lipschitz: Optional[float] = None) -> float:
    """An empirical K from a unit-step trajectory.

    ``M ~ max ||f_i - f_{i-1}|| / step`` (a finite-difference estimate of
    ``|h''|``). ``R`` is ``lipschitz`` when given (see
    :func:`estimate_lipschitz`); otherwise the crude ``M / max ||f||``. Both are
    diagnostic scales, not certified bounds.
    """
    steps = traj.schedule.steps()
    fs = [_per_example(f) for f in traj.derivs]
    M = max(float(np.linalg.norm(b - a, axis=1).max()) / h
            for a, b, h in zip(fs, fs[1:], steps))
    if lipschitz is None:
        F = max(float(np.linalg.norm(f, axis=1).max()) for f in fs)
        lipschitz = M / F if F > 0 else 0.0
    return bound_constant(lipschitz, M, traj.schedule.covered_time())
