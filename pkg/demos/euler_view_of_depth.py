"""
Depth as integration time
=========================

A residual update ``h <- h + f(h)`` is one forward-Euler step of size 1 on
``dh/dt = f(h)``.  This script checks the numerical facts the rest of the
package leans on, using fields whose exact solutions are known:

* halving the step halves the global error (order one);
* one step's error shrinks four-fold when the step halves (order two);
* replacing k unit steps with fewer, larger steps costs an error that stays
  under ``K (1 + beta*) s``.

Run:  python demos/euler_view_of_depth.py
"""
import numpy as np

from eulerformer import euler as E
from eulerformer.euler import StepSchedule

steps = [0.1, 0.05, 0.025]

# --- convergence order -------------------------------------------------------
for field, y0 in [(E.exponential_growth(1.0), [1.0]), (E.sine_forced(0.0, 1.0), [0.0])]:
    rows, order = E.error_order_scan(field, y0, 1.0, steps)
    print(f"{field.name}: global errors",
          ", ".join(f"s={s:g}: {e:.2e}" for s, e in rows), f"-> fitted order {order:.3f}")
    local, _ = E.local_order_scan(field, y0, steps)
    ratios = [a / b for (_, a), (_, b) in zip(local, local[1:])]
    print("   one-step error ratio when halving s:", ", ".join(f"{r:.3f}" for r in ratios))

# --- skipping iterations with scaled steps -----------------------------------
# Twelve unit steps of s=0.1 reach T=1.2.  Cover the same span with six steps
# of 2s, or with a few enlarged steps up front, and compare the end states.
s, T = 0.1, 1.2
field = E.exponential_growth(T)
print(f"\nscaled schedules on {field.name}, s={s}, T={T}")
for scales in ([1.0] * 12, [2.0] * 6, [3.0] * 4, [2.0, 2.0, 1, 1, 1, 1, 1, 1, 1, 1]):
    rep = E.verify_bound(field, [1.0], s, StepSchedule(s, scales, T))
    print(f"  {len(scales):2d} iterations, beta*={rep.beta_star:.1f}: gap {rep.observed_gap:.4f}"
          f" <= bound {rep.bound_value:.4f}  ({'ok' if rep.holds else 'VIOLATED'})")

# The gap grows roughly linearly in beta*, as the bound predicts.
gaps = [E.verify_bound(field, [1.0], s, StepSchedule(s, [b] * round(12 / b), T)).observed_gap
        for b in (1.5, 2.0, 3.0, 4.0)]
print("  gap per unit of (beta*-1):", np.round(np.array(gaps) / np.array([0.5, 1, 2, 3]), 4))
