"""Explicit Euler integration with per-step scale factors, and error-theory checks.

The integrator advances ``y <- y + beta_i * s * f(y, t)``. Helpers measure local
(one-step) and global truncation errors, fit the convergence order, and compare
the gap between a scaled and a unit-step solve against the worst-case bound
``K (1 + beta*) s`` with ``K = (e^{RT} - 1) / R * M / 2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError


@dataclass
class StepSchedule:
    """Base step ``s`` with per-iteration scales covering ``total_time``."""

    base_step: float
    scales: list
    total_time: float

    def __post_init__(self):
        self.scales = [float(b) for b in self.scales]
        if not self.base_step > 0:
            raise ConfigError(f"base_step must be positive, got {self.base_step}")
        if not self.scales:
            raise ConfigError("schedule needs at least one step")
        if any(not b > 0 for b in self.scales):
            raise ConfigError(f"scales must be positive, got {self.scales}")
        if self.coverage_gap() > 0.5 * self.base_step + 1e-12:
            raise ConfigError(
                f"schedule covers {self.covered_time():.6g} but total_time is "
                f"{self.total_time:.6g} (tolerance {0.5 * self.base_step:.3g})")

    @classmethod
    def uniform(cls, base_step: float, n: int, total_time: Optional[float] = None):
        return cls(base_step, [1.0] * n, n * base_step if total_time is None else total_time)

    @property
    def iters(self) -> int:
        return len(self.scales)

    @property
    def beta_star(self) -> float:
        return max(self.scales)

    def steps(self) -> list:
        return [b * self.base_step for b in self.scales]

    def times(self) -> list:
        """Start time of every step plus the terminal time (length iters + 1)."""
        out = [0.0]
        acc = []
        for b in self.scales:
            acc.append(b)
            out.append(self.base_step * math.fsum(acc))
        return out

    def covered_time(self) -> float:
        return self.base_step * math.fsum(self.scales)

    def coverage_gap(self) -> float:
        return abs(self.covered_time() - self.total_time)


@dataclass
class AnalyticField:
    """A vector field ``f(y, t)`` with bounds used by the error theory.

    ``lipschitz`` bounds |df/dy| (R) and ``curvature`` bounds |y''| (M) on the
    region the solution and its Euler approximations visit.
    """

    f: Callable[[np.ndarray, float], np.ndarray]
    lipschitz: float = 0.0
    curvature: float = 0.0
    exact: Optional[Callable[[float], np.ndarray]] = None
    name: str = ""

    def __post_init__(self):
        if self.lipschitz < 0 or self.curvature < 0:
            raise ConfigError(
                f"bounds must be non-negative (R={self.lipschitz}, M={self.curvature})")


@dataclass
class ErrorBoundReport:
    beta_star: float
    K: float
    observed_gap: float
    bound_value: float
    step: float
    coverage_gaps: tuple = field(default=(0.0, 0.0))

    @property
    def holds(self) -> bool:
        return self.observed_gap <= self.bound_value


def euler_solve(field: AnalyticField, y0, schedule: StepSchedule):
    """Integrate and return ``(times, states)`` with ``len(states) == iters + 1``."""
    y = np.array(y0, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(y)):
        raise NumericError("initial state is not finite")
    times = schedule.times()
    states = [y.copy()]
    for i, h in enumerate(schedule.steps()):
        y = y + h * np.asarray(field.f(y, times[i]), dtype=np.float64)
        if not np.all(np.isfinite(y)):
            raise NumericError(f"non-finite state after step {i}")
        states.append(y.copy())
    return times, states


def _require_exact(field: AnalyticField):
    if field.exact is None:
        raise ConfigError(f"field {field.name or '<anonymous>'} has no exact solution")


def local_error(field: AnalyticField, y0, t0: float, s: float) -> float:
    """``|exact(t0 + s) - (y0 + s f(y0, t0))|`` with ``y0`` taken on the exact path."""
    _require_exact(field)
    y0 = np.asarray(y0, dtype=np.float64)
    approx = y0 + s * np.asarray(field.f(y0, t0))
    return float(np.linalg.norm(np.atleast_1d(field.exact(t0 + s) - approx)))


def fit_order(steps: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(step); NaN if any error is 0."""
    e = np.asarray(errors, dtype=np.float64)
    if np.any(e <= 0):
        return float("nan")
    slope, _ = np.polyfit(np.log(np.asarray(steps, dtype=np.float64)), np.log(e), 1)
    return float(slope)


def _check_steps(steps):
    steps = [float(s) for s in steps]
    if len(steps) < 3:
        raise ConfigError("an order scan needs at least 3 step sizes")
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise ConfigError(f"step sizes must be strictly decreasing: {steps}")
    return steps


def global_error(field: AnalyticField, y0, T: float, s: float,
                 reference: Optional[np.ndarray] = None) -> float:
    n = int(round(T / s))
    _, states = euler_solve(field, y0, StepSchedule(s, [1.0] * n, T))
    target = field.exact(T) if reference is None else reference
    return float(np.linalg.norm(np.atleast_1d(states[-1] - target)))


def error_order_scan(field: AnalyticField, y0, T: float, steps: Sequence[float]):
    """Global error at ``T`` for each step size and the fitted order.

    Fields without a closed form are compared against fixed-step Euler with
    ``min(steps) / 1000``.
    """
    steps = _check_steps(steps)
    reference = None
    if field.exact is None:
        reference = reference_solution(field, y0, T, min(steps) / 1000)
    rows = [(s, global_error(field, y0, T, s, reference)) for s in steps]
    return rows, fit_order(*zip(*rows))


def local_order_scan(field: AnalyticField, y0, steps: Sequence[float], t0: float = 0.0):
    """Single-step error for each step size and the fitted order (expected 2)."""
    steps = _check_steps(steps)
    if field.exact is None:
        rows = []
        for s in steps:
            ref = reference_solution(field, y0, s, s / 1000, t0=t0)
            one = np.asarray(y0, dtype=np.float64) + s * np.asarray(field.f(np.asarray(y0, dtype=np.float64), t0))
            rows.append((s, float(np.linalg.norm(np.atleast_1d(one - ref)))))
    else:
        rows = [(s, local_error(field, y0, t0, s)) for s in steps]
    return rows, fit_order(*zip(*rows))


def reference_solution(field: AnalyticField, y0, T: float, h: float, t0: float = 0.0):
    """Fixed-step Euler at a fine step; the oracle for fields with no closed form."""
    n = int(round(T / h))
    h = T / n
    y = np.array(y0, dtype=np.float64, copy=True)
    for i in range(n):
        y = y + h * np.asarray(field.f(y, t0 + i * h))
    return y


def bound_constant(R: float, M: float, T: float) -> float:
    """``K = (e^{RT} - 1) / R * M / 2``, with the R -> 0 limit ``M T / 2``."""
    if R < 0 or M < 0:
        raise ConfigError(f"bounds must be non-negative (R={R}, M={M})")
    if R == 0:
        return M * T / 2
    return math.expm1(R * T) / R * M / 2


def verify_bound(field: AnalyticField, y0, s: float, scaled: StepSchedule) -> ErrorBoundReport:
    """Compare the scaled-schedule endpoint with the unit-step endpoint.

    Both solves start from ``y0`` at t = 0 and target ``scaled.total_time``.
    """
    if field.lipschitz < 0 or field.curvature < 0:
        raise ConfigError("bounds must be non-negative")
    if not math.isclose(scaled.base_step, s):
        raise ConfigError(f"scaled schedule base step {scaled.base_step} != {s}")
    T = scaled.total_time
    n = int(round(T / s))
    if abs(n * s - T) > 1e-9 * max(1.0, T) or scaled.coverage_gap() > 1e-9 * max(1.0, T):
        raise ConfigError(
            f"the bound compares states at one time: T={T} must be a whole number of "
            f"unit steps s={s} and the scaled schedule must end exactly at T")
    unit = StepSchedule(s, [1.0] * n, T)
    _, ys = euler_solve(field, y0, unit)
    _, yt = euler_solve(field, y0, scaled)
    gap = float(np.linalg.norm(np.atleast_1d(yt[-1] - ys[-1])))
    K = bound_constant(field.lipschitz, field.curvature, T)
    return ErrorBoundReport(
        beta_star=scaled.beta_star, K=K, observed_gap=gap,
        bound_value=K * (1 + scaled.beta_star) * s, step=s,
        coverage_gaps=(unit.coverage_gap(), scaled.coverage_gap()))


# --------------------------------------------------------------------------
# stock fields
# --------------------------------------------------------------------------

def exponential_growth(T: float = 1.0, y0: float = 1.0) -> AnalyticField:
    """``y' = y``; on [0, T] with y0 > 0, R = 1 and M = y0 e^T."""
    return AnalyticField(lambda y, t: y, lipschitz=1.0, curvature=abs(y0) * math.exp(T),
                         exact=lambda t: np.array([y0 * math.exp(t)]), name="y'=y")


def exponential_decay(y0: float = 1.0) -> AnalyticField:
    """``y' = -y``; R = 1 and M = |y0| for t >= 0."""
    return AnalyticField(lambda y, t: -y, lipschitz=1.0, curvature=abs(y0),
                         exact=lambda t: np.array([y0 * math.exp(-t)]), name="y'=-y")


def constant_field(c: float = 0.0, y0: float = 0.0) -> AnalyticField:
    return AnalyticField(lambda y, t: np.full_like(y, c), lipschitz=0.0, curvature=0.0,
                         exact=lambda t: np.array([y0 + c * t]), name=f"y'={c}")


def sine_forced(y0: float = 0.0, T: float = 1.0) -> AnalyticField:
    """``y' = sin(y) + t`` (no closed form).

    |f_y| = |cos y| <= 1, and |y''| = |cos(y)(sin(y) + t) + 1| <= 2 + T.
    """
    return AnalyticField(lambda y, t: np.sin(y) + t, lipschitz=1.0, curvature=2.0 + T,
                         exact=None, name="y'=sin(y)+t")
