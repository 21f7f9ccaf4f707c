"""Search over per-iteration step scales at a reduced iteration count.

Scales live on the grid {1.0, 1.1, ..., 3.0}. Internally they are held as
integer tenths so the time-coverage constraint ``|sum(beta) s - T| <= s / 2``
is checked exactly: ``|sum(k) - 10 T / s| <= 5``.

The search evaluates the uniform schedule first, then random on-grid
schedules repaired to the constraint, then coordinate hill-climbing around
the incumbent (single +-0.1 moves and +-0.1 transfers between two
coordinates). When the budget covers the whole feasible set, the set is
enumerated instead.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, SearchError
from .euler import StepSchedule
from .rng import stream

GRID_LO, GRID_HI = 10, 30  # tenths


def grid_values() -> list:
    return [k / 10 for k in range(GRID_LO, GRID_HI + 1)]


@dataclass
class SearchSpace:
    target_iters: int
    total_time: float
    base_step: float
    grid: list = field(default_factory=grid_values)

    def __post_init__(self):
        if self.target_iters < 1:
            raise ConfigError("target_iters must be >= 1")
        if self.grid != sorted(self.grid) or self.grid[0] < 1.0 or self.grid[-1] > 3.0:
            raise ConfigError("grid must be ascending within [1.0, 3.0]")
        lo = self.target_iters * self.grid[0] * self.base_step
        hi = self.target_iters * self.grid[-1] * self.base_step
        if not lo - 0.5 * self.base_step <= self.total_time <= hi + 0.5 * self.base_step:
            raise ConfigError(
                f"{self.target_iters} iterations with scales in [{self.grid[0]}, {self.grid[-1]}] "
                f"cannot cover T={self.total_time} at s={self.base_step}")

    @property
    def ticks(self) -> list:
        return [int(round(g * 10)) for g in self.grid]

    @property
    def target_tenths(self) -> float:
        return 10 * self.total_time / self.base_step

    def feasible(self, ks) -> bool:
        return (abs(sum(ks) - self.target_tenths) <= 5 + 1e-9
                and all(k in self._tickset for k in ks))

    @property
    def _tickset(self):
        return set(self.ticks)

    def schedule(self, ks) -> StepSchedule:
        return StepSchedule(self.base_step, [k / 10 for k in ks], self.total_time)


@dataclass
class Trial:
    index: int
    ticks: tuple
    metric: Optional[float]
    phase: str
    error: str = ""

    @property
    def betas(self) -> list:
        return [k / 10 for k in self.ticks]

    @property
    def failed(self) -> bool:
        return self.metric is None


@dataclass
class SearchResult:
    schedule: StepSchedule
    metric: float
    trials: list
    budget_used: int
    maximize: bool = True

    def write_audit(self, path) -> None:
        """CSV of (trial, betas, sum_beta_s, metric, phase)."""
        s = self.schedule.base_step
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "betas", "sum_beta_s", "metric", "phase"])
            for t in self.trials:
                w.writerow([t.index, " ".join(f"{b:.1f}" for b in t.betas),
                            repr(s * math.fsum(t.betas)),
                            "" if t.failed else repr(t.metric), t.phase])


def _snap(ks, ticks):
    arr = np.asarray(ticks)
    return [int(arr[np.argmin(np.abs(arr - k))]) for k in ks]


def _shortfall(total: int, target: float) -> int:
    """Smallest integer shift that brings ``total`` within 5 tenths of ``target``."""
    diff = target - total
    if diff > 5:
        return math.ceil(diff - 5 - 1e-9)
    if diff < -5:
        return math.floor(diff + 5 + 1e-9)
    return 0


def repair(ks, space: SearchSpace) -> list:
    """Proportional rescale, snap to the grid, then shift coordinates from the end."""
    ticks = space.ticks
    target = space.target_tenths
    total = sum(ks)
    ks = [k * target / total for k in ks] if total > 0 else [target / len(ks)] * len(ks)
    ks = _snap(ks, ticks)
    for step in range(len(ks) * len(ticks)):
        if space.feasible(ks):
            return ks
        j = len(ks) - 1 - step % len(ks)
        want = min(max(ks[j] + _shortfall(sum(ks), target), ticks[0]), ticks[-1])
        ks[j] = _snap([want], ticks)[0]
    if not space.feasible(ks):
        raise ConfigError("could not repair schedule onto the feasible set")
    return ks


def uniform_ticks(space: SearchSpace) -> list:
    n = space.target_iters
    ticks = space.ticks
    k = _snap([space.target_tenths / n], ticks)[0]
    ks = [k] * n
    ks[-1] = _snap([ks[-1] + _shortfall(sum(ks), space.target_tenths)], ticks)[0]
    if not space.feasible(ks):
        ks = repair(ks, space)
    return ks


def uniform_schedule(space: SearchSpace) -> StepSchedule:
    """All scales equal to ``T / (iters s)`` snapped to the grid; last entry adjusted."""
    return space.schedule(uniform_ticks(space))


def feasible_set(space: SearchSpace, limit: Optional[int] = None):
    """Every feasible tick vector (None if there are more than ``limit``)."""
    ticks = space.ticks
    n = space.target_iters
    out = []

    def rec(prefix, acc):
        left = n - len(prefix)
        if left == 0:
            if abs(acc - space.target_tenths) <= 5 + 1e-9:
                out.append(tuple(prefix))
            return
        for k in ticks:
            lo = acc + k + (left - 1) * ticks[0]
            hi = acc + k + (left - 1) * ticks[-1]
            if lo > space.target_tenths + 5 + 1e-9 or hi < space.target_tenths - 5 - 1e-9:
                continue
            prefix.append(k)
            rec(prefix, acc + k)
            prefix.pop()
            if limit is not None and len(out) > limit:
                return

    rec([], 0)
    if limit is not None and len(out) > limit:
        return None
    return out


def _better(a: Trial, b: Optional[Trial], sign: float) -> bool:
    """Is ``a`` preferred over ``b``? Higher signed metric, then smaller max beta, then lexicographic."""
    if a.failed:
        return False
    if b is None or b.failed:
        return True
    ma, mb = sign * a.metric, sign * b.metric
    if ma != mb:
        return ma > mb
    if max(a.ticks) != max(b.ticks):
        return max(a.ticks) < max(b.ticks)
    return a.ticks < b.ticks


def search_schedule(eval_fn: Callable[[StepSchedule], float], space: SearchSpace,
                    budget: int, seed: int = 0, maximize: bool = True,
                    random_fraction: float = 0.3, workers: int = 1) -> SearchResult:
    """Find the schedule with the best metric within ``budget`` trials after the baseline.

    ``eval_fn`` failures are recorded and skipped. Schedules already tried are
    not re-evaluated and do not consume budget.
    """
    if budget < 0:
        raise ConfigError("budget must be >= 0")
    sign = 1.0 if maximize else -1.0
    rng = stream(seed, "search")
    trials: list = []
    seen: dict = {}
    best: Optional[Trial] = None

    def run(batch, phase):
        nonlocal best
        fresh = []
        for ks in batch:
            ks = tuple(ks)
            if ks not in seen and ks not in fresh:
                fresh.append(ks)
        if workers > 1 and len(fresh) > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(lambda k: _evaluate(eval_fn, space, k), fresh))
        else:
            results = [_evaluate(eval_fn, space, k) for k in fresh]
        for ks, (metric, err) in zip(fresh, results):
            t = Trial(len(trials), ks, metric, phase, err)
            trials.append(t)
            seen[ks] = t
            if _better(t, best, sign):
                best = t

    run([uniform_ticks(space)], "baseline")
    remaining = lambda: budget + 1 - len(trials)  # noqa: E731

    everything = feasible_set(space, limit=budget)
    if everything is not None:
        run(everything, "enumerate")
    else:
        n_random = int(round(budget * random_fraction))
        cands = []
        for _ in range(n_random):
            raw = rng.choice(space.ticks, size=space.target_iters)
            cands.append(repair(list(raw), space))
        run(cands[:remaining()], "random")
        _hill_climb(space, rng, run, lambda: best, remaining, seen)

    ok = [t for t in trials if not t.failed]
    if not ok:
        raise SearchError(f"all {len(trials)} trials failed; first error: {trials[0].error}")
    return SearchResult(space.schedule(best.ticks), best.metric, trials,
                        budget_used=len(trials) - 1, maximize=maximize)


def _evaluate(eval_fn, space, ks):
    try:
        metric = float(eval_fn(space.schedule(ks)))
    except Exception as exc:  # a failed trial must not stop the search
        return None, f"{type(exc).__name__}: {exc}"
    if not math.isfinite(metric):
        return None, f"non-finite metric {metric}"
    return metric, ""


def _neighbours(ks, space: SearchSpace, rng):
    n = len(ks)
    lo, hi = space.ticks[0], space.ticks[-1]
    moves = []
    for i in range(n):
        for d in (1, -1):
            if lo <= ks[i] + d <= hi:
                moves.append((i, d, None))
            for j in range(n):
                if j != i and lo <= ks[i] + d <= hi and lo <= ks[j] - d <= hi:
                    moves.append((i, d, j))
    order = rng.permutation(len(moves))
    for m in order:
        i, d, j = moves[m]
        out = list(ks)
        out[i] += d
        if j is not None:
            out[j] -= d
        if space.feasible(out):
            yield tuple(out)


def _hill_climb(space, rng, run, get_best, remaining, seen):
    while remaining() > 0:
        incumbent = get_best()
        if incumbent is None:
            return
        improved = False
        for cand in _neighbours(incumbent.ticks, space, rng):
            if remaining() <= 0:
                return
            if cand in seen:
                continue
            run([cand], "climb")
            if get_best() is not incumbent:
                improved = True
                break
        if not improved:
            # local optimum: spend the rest on random restarts
            restart = repair(list(rng.choice(space.ticks, size=space.target_iters)), space)
            if tuple(restart) in seen:
                restart = _random_feasible_unseen(space, rng, seen)
                if restart is None:
                    return
            run([restart], "restart")


def _random_feasible_unseen(space, rng, seen, tries: int = 200):
    for _ in range(tries):
        ks = tuple(repair(list(rng.choice(space.ticks, size=space.target_iters)), space))
        if ks not in seen:
            return ks
    return None
