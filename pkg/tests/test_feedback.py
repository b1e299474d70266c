import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shotnoise_twin.calibration import OutOfRangeError
from shotnoise_twin.feedback import (
    FeedbackParams,
    ReferenceSignal,
    TargetSpec,
    error_prime,
    fit_loss_curve,
    invert_for_ideal_loss,
    loss_pulses,
    refit_gains,
    under_target,
)

EPS = 1e-5


def test_loss_pulses_arithmetic():
    assert loss_pulses(0.0, FeedbackParams(1e4, 0.3, 0.1, 12)) == 12
    assert loss_pulses(0.1, FeedbackParams(1e4, 0.0, 0.0, 0)) == 1000
    assert loss_pulses(0.00005, FeedbackParams(1e4, 0.0, 0.0, 0)) == 1  # 0.5 rounds away from zero
    assert loss_pulses(-0.2, FeedbackParams(1e4, 0.0, 0.0, 100)) == 0


def test_under_target_flag():
    p = FeedbackParams(1e4, 0.0, 0.0, 100)
    assert under_target(-0.02, p)
    assert not under_target(-0.005, p)
    assert not under_target(0.1, p)


def test_negative_default_rejected():
    with pytest.raises(ValueError):
        FeedbackParams(1.0, 0.0, 0.0, -1.0)


@given(st.floats(-1, 1), st.floats(0, 1e5), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0, 1e4))
@settings(max_examples=300, deadline=None)
def test_loss_pulses_never_negative(e, g, q, c, d):
    n = loss_pulses(e, FeedbackParams(g, q, c, d))
    assert isinstance(n, int) and n >= 0


@given(st.lists(st.floats(-0.4, 0.4), min_size=2, max_size=20))
@settings(max_examples=100, deadline=None)
def test_loss_pulses_monotone_for_small_curvature(es):
    p = FeedbackParams(2e4, 0.1, 0.05, 5000)
    es = sorted(es)
    n = [loss_pulses(e, p) for e in es]
    assert n == sorted(n)


def test_reference_signal():
    rng = np.random.default_rng(0)
    runs = [1.0 + 0.01 * rng.standard_normal(50) for _ in range(25)]
    a, b = ReferenceSignal.freeze(runs), ReferenceSignal.freeze(runs)
    assert a == b
    assert a.n_runs == 25
    assert ReferenceSignal.from_dict(a.to_dict()) == a
    assert error_prime(a.mean, a) == 0.0
    assert error_prime(1.05 * a.mean, a) == pytest.approx(0.05, rel=1e-12)
    with pytest.raises(ValueError):
        ReferenceSignal.freeze(runs[:19])


def test_error_prime_rejects_bad_reference():
    with pytest.raises(ValueError):
        error_prime(1.0, ReferenceSignal((0.0, 0.0), 20, "x"))


def test_target_spec():
    t = TargetSpec(0.5)
    assert t.f_ideal(1.0) == 0.5
    assert list(t.reachable([0.4, 0.6])) == [False, True]
    with pytest.raises(ValueError):
        TargetSpec(0.0)


def _exponential_trials(n=40, r=0.7):
    n_loss = np.linspace(0, 3e4, n)
    s1 = np.ones(n)
    return n_loss, s1, r * (1 - EPS) ** n_loss


def test_loss_curve_approximates_exponential():
    n_loss, s1, s2 = _exponential_trials()
    curve = fit_loss_curve(n_loss, s1, s2)
    assert curve.max_rel_residual < 0.005
    assert curve.monotone


def test_loss_curve_needs_spread():
    with pytest.raises(ValueError):
        fit_loss_curve(np.zeros(20), np.ones(20), np.ones(20))
    with pytest.raises(ValueError):
        fit_loss_curve(np.arange(5.0), np.ones(5), np.ones(5))


def test_loss_curve_warns_when_not_monotone():
    n = np.linspace(0, 10, 20)
    with pytest.warns(UserWarning):
        curve = fit_loss_curve(n, np.ones(20), 1 + (n - 5) ** 2)
    assert not curve.monotone


def test_inversion():
    n_loss, s1, s2 = _exponential_trials(r=1.0)
    curve = fit_loss_curve(n_loss, s1, s2)
    assert invert_for_ideal_loss(curve, float(curve(0.0))) == pytest.approx(0.0, abs=1e-6)
    assert invert_for_ideal_loss(curve, 0.9) == pytest.approx(-math.log(0.9) / EPS, rel=0.01)
    with pytest.raises(OutOfRangeError) as exc:
        invert_for_ideal_loss(curve, 0.1)
    assert "achievable range" in str(exc.value)


def test_inversion_linear_curve():
    n = np.linspace(0, 2e4, 12)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        curve = fit_loss_curve(n, np.ones(12), 1 - EPS * n)
    assert invert_for_ideal_loss(curve, 0.9) == pytest.approx(1e4, rel=1e-9)


def test_refit_exact_cubic():
    truth = FeedbackParams(2.5e4, 0.3, -0.2, 9000)
    e = np.linspace(-0.4, 0.4, 15)
    fit = refit_gains(e, truth.raw(e))
    assert (fit.g, fit.q, fit.c, fit.d) == pytest.approx((truth.g, truth.q, truth.c, truth.d), rel=1e-9)


def test_refit_fixed_point():
    # refitting the ideal losses a law generates returns the same law
    truth = FeedbackParams(2e4, 0.1, 0.02, 8000)
    e = np.random.default_rng(1).uniform(-0.4, 0.4, 60)
    fit = refit_gains(e, truth.raw(e))
    assert truth.change(fit) < 0.01


def test_refit_rejects_degenerate_trials():
    with pytest.raises(ValueError):
        refit_gains(np.zeros(10), np.arange(10.0))
    with pytest.raises(ValueError):
        refit_gains(np.arange(5.0), np.arange(5.0))
    with pytest.raises(ValueError):
        refit_gains(np.linspace(-0.4, 0.4, 10), np.full(10, 3.0))


def test_refit_clamps_offset():
    e = np.linspace(-0.4, 0.4, 10)
    fit = refit_gains(e, 1e4 * e - 50)
    assert fit.d == 0.0


def test_change_metric():
    a = FeedbackParams(2e4, 0.0, 0.0, 1e4)
    assert a.change(a) == 0.0
    # a 10% gain change over E in [-0.4, 0.4] moves the law by 800 of a 16000 span
    assert a.change(FeedbackParams(2.2e4, 0.0, 0.0, 1e4)) == pytest.approx(800 / 17600)
    assert FeedbackParams.from_dict(a.to_dict()) == a
