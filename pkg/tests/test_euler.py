import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eulerformer import euler as E
from eulerformer.errors import ConfigError, NumericError


def test_exponential_ten_unit_steps():
    _, ys = E.euler_solve(E.exponential_growth(), [1.0], E.StepSchedule(0.1, [1.0] * 10, 1.0))
    assert ys[-1][0] == pytest.approx(1.1 ** 10, abs=1e-12)
    assert ys[-1][0] == pytest.approx(2.5937424601, abs=1e-10)


def test_zero_field_keeps_initial_state():
    _, ys = E.euler_solve(E.constant_field(0.0), [3.0, -1.0], E.StepSchedule(0.3, [1.5, 2.0, 1.0], 1.35))
    np.testing.assert_array_equal(ys[-1], [3.0, -1.0])


def test_scaled_steps_of_two():
    times, ys = E.euler_solve(E.exponential_growth(2.0), [1.0], E.StepSchedule(0.5, [2, 2], 2.0))
    assert ys[-1][0] == 4.0
    assert times == [0.0, 1.0, 2.0]


def test_unit_scales_match_textbook_euler_bitwise():
    field = E.sine_forced()
    _, ys = E.euler_solve(field, [0.3], E.StepSchedule(0.05, [1.0] * 20, 1.0))
    y = np.array([0.3])
    for i in range(20):
        y = y + 0.05 * (np.sin(y) + i * 0.05)
    assert ys[-1].tobytes() == y.tobytes()


def test_textbook_loop_on_autonomous_field_is_bit_identical():
    field = E.exponential_decay()
    _, ys = E.euler_solve(field, [1.0], E.StepSchedule(0.1, [1.0] * 10, 1.0))
    y = np.array([1.0])
    for _ in range(10):
        y = y + 0.1 * (-y)
    assert ys[-1].tobytes() == y.tobytes()


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_state_names_step():
    blow = E.AnalyticField(lambda y, t: y * 1e200, name="blow-up")
    with pytest.raises(NumericError, match="step 1"):
        E.euler_solve(blow, [1.0], E.StepSchedule(1.0, [1.0] * 3, 3.0))


def test_schedule_coverage_is_enforced():
    E.StepSchedule(1.0, [1.0, 1.0], 2.5)  # within s / 2
    with pytest.raises(ConfigError):
        E.StepSchedule(1.0, [1.0, 1.0], 2.6)
    with pytest.raises(ConfigError):
        E.StepSchedule(0.0, [1.0], 0.0)


# ---------------------------------------------------------------- local / global error

def test_local_error_closed_forms():
    g = E.exponential_growth()
    assert E.local_error(g, [1.0], 0.0, 0.1) == pytest.approx(math.exp(0.1) - 1.1, abs=1e-15)
    assert E.local_error(g, [1.0], 0.0, 0.1) == pytest.approx(0.0051709, abs=1e-7)
    assert E.local_error(g, [1.0], 0.0, 0.05) == pytest.approx(0.0012711, abs=1e-7)
    ratio = E.local_error(g, [1.0], 0.0, 0.1) / E.local_error(g, [1.0], 0.0, 0.05)
    assert ratio == pytest.approx(4.07, abs=0.01)


def test_local_error_of_constant_field_is_zero():
    assert E.local_error(E.constant_field(2.0, 1.0), [1.0], 0.0, 0.1) == pytest.approx(0.0, abs=1e-15)


def test_local_error_needs_exact_solution():
    with pytest.raises(ConfigError):
        E.local_error(E.sine_forced(), [0.0], 0.0, 0.1)


def test_global_order_on_exponential():
    rows, order = E.error_order_scan(E.exponential_growth(), [1.0], 1.0, [0.1, 0.05, 0.025])
    for s, err in rows:
        assert err == pytest.approx(math.e - (1 + s) ** round(1 / s), rel=1e-9)
    assert 0.9 <= order <= 1.1


def test_local_order_on_exponential():
    _, order = E.local_order_scan(E.exponential_growth(), [1.0], [0.1, 0.05, 0.025])
    assert 1.9 <= order <= 2.1


def test_constant_field_scan_is_degenerate():
    rows, order = E.error_order_scan(E.constant_field(1.0), [0.0], 1.0, [0.1, 0.05, 0.025])
    assert all(err < 1e-14 for _, err in rows)
    # exact-zero errors cannot be fitted; tiny rounding residues fit to noise
    rows0, order0 = E.error_order_scan(E.constant_field(0.0), [0.0], 1.0, [0.1, 0.05, 0.025])
    assert all(err == 0 for _, err in rows0)
    assert math.isnan(order0)


def test_scan_input_validation():
    g = E.exponential_growth()
    with pytest.raises(ConfigError):
        E.error_order_scan(g, [1.0], 1.0, [0.1, 0.05])
    with pytest.raises(ConfigError):
        E.error_order_scan(g, [1.0], 1.0, [0.05, 0.1, 0.025])


@pytest.mark.parametrize("field,y0", [(E.sine_forced(), [0.0]), (E.sine_forced(0.5), [0.5])])
def test_halving_halves_global_error(field, y0):
    for s in (0.1, 0.05):
        ref = E.reference_solution(field, y0, 1.0, s / 2 / 1000)
        ratio = E.global_error(field, y0, 1.0, s, ref) / E.global_error(field, y0, 1.0, s / 2, ref)
        assert 1.8 <= ratio <= 2.2, (s, ratio)


def test_halving_quarters_single_step_error():
    field = E.sine_forced()
    rows, _ = E.local_order_scan(field, [0.0], [0.1, 0.05, 0.025])
    for (_, a), (_, b) in zip(rows, rows[1:]):
        assert 3.7 <= a / b <= 4.3


# ---------------------------------------------------------------- the bound

def test_bound_constant_limit():
    assert E.bound_constant(0.0, 2.0, 3.0) == 3.0
    assert E.bound_constant(1e-9, 2.0, 3.0) == pytest.approx(3.0, rel=1e-8)
    assert E.bound_constant(1.0, 2.0, 1.0) == pytest.approx(math.e - 1, rel=1e-14)
    with pytest.raises(ConfigError):
        E.bound_constant(-1.0, 1.0, 1.0)


def _scaled(s, beta_star, T):
    """Front-loaded beta_star steps, unit steps elsewhere, ending exactly at T."""
    k = 2 if beta_star % 1 else 1
    n_rest = round(T / s - k * beta_star)
    return E.StepSchedule(s, [beta_star] * k + [1.0] * n_rest, T)


@pytest.mark.parametrize("beta", [1.5, 2.0, 3.0])
@pytest.mark.parametrize("s", [0.1, 0.05])
def test_bound_holds_on_analytic_fields(beta, s):
    T = 1.2
    for field in (E.exponential_growth(T), E.exponential_decay(), E.sine_forced(0.0, T)):
        for sched in (_scaled(s, beta, T), E.StepSchedule(s, [beta] * round(T / s / beta), T)):
            rep = E.verify_bound(field, [1.0] if field.name != "y'=sin(y)+t" else [0.0], s, sched)
            assert rep.holds, (field.name, beta, s, rep)
            assert rep.observed_gap > 0


def test_zero_field_gap_is_zero():
    rep = E.verify_bound(E.constant_field(0.0), [2.0], 0.1, E.StepSchedule(0.1, [2.0] * 5, 1.0))
    assert rep.observed_gap == 0.0
    assert rep.holds


def test_contractive_field_gap_far_below_bound():
    s, beta = 0.1, 2.0
    rep = E.verify_bound(E.exponential_decay(), [1.0], s, E.StepSchedule(s, [beta] * 5, 1.0))
    closed = abs((1 - beta * s) ** 5 - (1 - s) ** 10)
    assert rep.observed_gap == pytest.approx(closed, rel=1e-12)
    assert rep.observed_gap < 0.25 * rep.bound_value


def test_negative_bounds_rejected():
    with pytest.raises(ConfigError):
        E.AnalyticField(lambda y, t: y, lipschitz=-1.0, curvature=1.0)
    with pytest.raises(ConfigError):
        E.AnalyticField(lambda y, t: y, lipschitz=1.0, curvature=-1.0)


def test_bound_needs_a_common_end_time():
    with pytest.raises(ConfigError, match="one time"):
        E.verify_bound(E.exponential_growth(), [1.0], 0.1, E.StepSchedule(0.1, [1.1] * 5, 0.55))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(10, 30), min_size=1, max_size=6), st.sampled_from([0.1, 0.05]))
def test_bound_never_violated_for_random_schedules(ticks, s):
    # pad with one extra step so the schedule ends on a whole number of unit steps
    pad = -sum(ticks) % 10
    ticks = ticks + ([10 + pad] if pad else [])
    T = s * (sum(ticks) // 10)
    sched = E.StepSchedule(s, [k / 10 for k in ticks], T)
    field = E.exponential_growth(T + 0.5 * s)
    rep = E.verify_bound(field, [1.0], s, sched)
    assert rep.holds
