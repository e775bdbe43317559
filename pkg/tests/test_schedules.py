import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saclt import (
    RegimeTag,
    StepSchedule,
    check_averaging_condition,
    classify_sa_regime,
)

schedules = st.builds(
    StepSchedule,
    gamma_star=st.floats(0.05, 20.0),
    exponent_a=st.floats(0.51, 1.0),
    offset=st.integers(0, 50),
)


def test_gamma_direct_values():
    assert StepSchedule(1.0, 1.0).gamma(10) == 0.1
    assert StepSchedule(2.0, 0.7).gamma(1) == 2.0


def test_gamma_against_high_precision_oracle():
    # independent evaluation of 1000**-0.7 at 50 digits
    mpmath.mp.dps = 50
    expected = float(mpmath.power(1000, mpmath.mpf("-0.7")))
    got = StepSchedule(1.0, 0.7).gamma(1000)
    assert got == pytest.approx(expected, rel=1e-15)


def test_construction_validation():
    with pytest.raises(ValueError):
        StepSchedule(0.0, 0.7)
    with pytest.raises(ValueError):
        StepSchedule(1.0, 0.5)
    with pytest.raises(ValueError):
        StepSchedule(1.0, 1.0001)
    with pytest.raises(ValueError):
        StepSchedule(1.0, 0.7, offset=-1)
    with pytest.raises(ValueError):
        StepSchedule(1.0, 0.7).gamma(0)


@settings(max_examples=60, deadline=None)
@given(schedules, st.integers(1, 10**6))
def test_gamma_positive_and_strictly_decreasing(schedule, n):
    g1 = schedule.gamma(n)
    g2 = schedule.gamma(n + 1)
    assert g1 > 0
    assert g2 < g1


@settings(max_examples=20, deadline=None)
@given(schedules, st.integers(1, 2000))
def test_gamma_array_matches_scalar_bitwise(schedule, horizon):
    arr = schedule.gamma_array(horizon)
    probes = {1, horizon, max(1, horizon // 2), max(1, horizon // 3)}
    for n in probes:
        assert arr[n - 1] == schedule.gamma(n)


def test_dict_round_trip():
    s = StepSchedule(2.5, 0.8, offset=3)
    assert StepSchedule.from_dict(s.to_dict()) == s


def test_classify_examples():
    assert classify_sa_regime(StepSchedule(1.0, 0.7), 1.0).tag is RegimeTag.SLOW
    fast = classify_sa_regime(StepSchedule(1.0, 1.0), 1.0)
    assert fast.tag is RegimeTag.FAST
    assert fast.gamma_star_lower_bound == 0.5
    bad = classify_sa_regime(StepSchedule(0.25, 1.0), 1.0)
    assert bad.tag is RegimeTag.INVALID
    assert "1/(2L)" in bad.reason


def test_classify_rejects_nonpositive_decay():
    with pytest.raises(ValueError):
        classify_sa_regime(StepSchedule(1.0, 0.7), 0.0)


def test_classify_boundary_is_strict():
    # gamma_star exactly 1/(2L) does not qualify for the fast regime
    L = 2.0
    assert classify_sa_regime(StepSchedule(0.25, 1.0), L).tag is RegimeTag.INVALID
    assert classify_sa_regime(StepSchedule(0.25 + 1e-9, 1.0), L).tag is RegimeTag.FAST


@settings(max_examples=100, deadline=None)
@given(
    st.floats(0.05, 20.0),
    st.floats(0.05, 20.0),
    st.sampled_from([0.8, 1.0]),
)
def test_classify_stable_under_tiny_perturbation(gamma_star, L, a):
    # flips are only allowed within perturbation distance of the boundary
    boundary = 1.0 / (2.0 * L)
    if a == 1.0 and abs(gamma_star - boundary) < 1e-9:
        return
    base = classify_sa_regime(StepSchedule(gamma_star, a), L).tag
    for eps in (-1e-12, 1e-12):
        assert classify_sa_regime(StepSchedule(gamma_star + eps, a), L).tag is base


def test_averaging_condition_analytic_verdicts():
    assert check_averaging_condition(StepSchedule(1.0, 0.7), 10**4).analytic_ok
    assert not check_averaging_condition(StepSchedule(1.0, 1.0), 10**4).analytic_ok
    with pytest.raises(ValueError):
        check_averaging_condition(StepSchedule(1.0, 0.7), 9)


def test_averaging_partial_sums_decay_for_slow_exponent():
    diag = check_averaging_condition(StepSchedule(1.0, 0.6), 10**6)
    at = dict(zip(diag.checkpoints.tolist(), diag.step_sums.tolist()))
    n_small = max(n for n in at if n <= 10**3)
    assert at[10**6] < at[n_small]
    ratio_at = dict(zip(diag.checkpoints.tolist(), diag.ratio_sums.tolist()))
    assert ratio_at[10**6] < ratio_at[n_small]


def test_averaging_ratio_sum_does_not_decay_at_exponent_one():
    diag = check_averaging_condition(StepSchedule(1.0, 1.0), 10**6)
    # (1/sqrt(n)) sum gamma_k^{-1/2} |1 - gamma_k/gamma_{k+1}| tends to 2 here
    assert diag.ratio_sums[-1] > 1.5
    assert diag.ratio_sums[-1] >= diag.ratio_sums[0]


@pytest.mark.parametrize("a", [0.6, 0.7, 1.0])
@pytest.mark.parametrize("offset", [0, 5])
def test_log_ratio_times_n_converges_to_exponent(a, offset):
    s = StepSchedule(1.0, a, offset=offset)
    n = 10**6
    value = np.log(s.gamma(n - 1) / s.gamma(n)) * n
    assert value == pytest.approx(a, rel=1e-3)


@pytest.mark.parametrize("a", [0.6, 0.75, 0.9])
def test_slow_exponent_satisfies_averaging_premise(a):
    # n * gamma_n diverges and the ratio sum decays between 1e3 and 1e6
    s = StepSchedule(1.0, a)
    assert 10**6 * s.gamma(10**6) > 10**3 * s.gamma(10**3)
    diag = check_averaging_condition(s, 10**6)
    ratio_at = dict(zip(diag.checkpoints.tolist(), diag.ratio_sums.tolist()))
    n_small = max(n for n in ratio_at if n <= 10**3)
    assert ratio_at[10**6] <= ratio_at[n_small]
