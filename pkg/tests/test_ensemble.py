import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from shotnoise_twin.ensemble import (
    CTMC_MAX_ATOMS,
    DEFAULT_TRAJECTORY,
    CloudState,
    EvaporationParams,
    InitialCloud,
    LossSpec,
    NTTrajectory,
    background_evolution,
    binomial_loss,
    ctmc_loss_oracle,
    ctmc_loss_oracle_batch,
    spill_cooling,
    stochastic_loss_sigma,
    survival_from_pulses,
)


def test_cloud_state_rejects_bad_values():
    with pytest.raises(ValueError):
        CloudState(-1, 10.0)
    with pytest.raises(ValueError):
        CloudState(10, 0.0)


@pytest.mark.parametrize("p", [-0.1, 1.1, float("nan")])
def test_loss_spec_range(p):
    with pytest.raises(ValueError):
        LossSpec(p)


def test_binomial_loss_limits():
    rng = np.random.default_rng(1)
    s = CloudState(12345, 10.0)
    assert binomial_loss(s, 1.0, rng).n_atoms == 12345
    assert binomial_loss(s, 0.0, rng).n_atoms == 0


def test_binomial_loss_moments():
    rng = np.random.default_rng(2)
    n0, p = 1_000_000, 0.9
    n = np.array([binomial_loss(CloudState(n0, 10.0), p, rng).n_atoms for _ in range(4000)])
    assert abs(n.mean() - n0 * p) < 5 * math.sqrt(n0 * p * (1 - p) / len(n))
    var = n0 * p * (1 - p)
    # sample variance has relative standard error sqrt(2/(n-1))
    assert abs(n.var(ddof=1) / var - 1) < 5 * math.sqrt(2 / (len(n) - 1))


@given(st.integers(0, 10_000), st.floats(0, 1), st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_binomial_loss_never_gains(n0, p, seed):
    out = binomial_loss(CloudState(n0, 5.0), p, np.random.default_rng(seed))
    assert 0 <= out.n_atoms <= n0
    assert out.temperature == 5.0


def test_survival_from_pulses_values():
    assert survival_from_pulses(0) == 1.0
    assert survival_from_pulses(10_000) == pytest.approx(0.90, abs=0.001)
    with pytest.raises(ValueError):
        survival_from_pulses(-1)


def test_survival_from_pulses_matches_high_precision():
    mpmath.mp.dps = 40
    exact = (1 - mpmath.mpf("1e-5")) ** 20_000
    assert survival_from_pulses(20_000, 1e-5) == pytest.approx(float(exact), rel=1e-12)


def test_survival_from_pulses_deep_loss_does_not_underflow_badly():
    p = survival_from_pulses(1_000_000)
    assert 0 < p < 1e-4
    mpmath.mp.dps = 40
    exact = (1 - mpmath.mpf("1.05e-5")) ** 1_000_000
    assert p == pytest.approx(float(exact), rel=1e-9)


@pytest.mark.parametrize("n0", [100, 1000])
def test_ctmc_oracle_matches_binomial(n0):
    rate, duration = 0.3, 1.0
    rng = np.random.default_rng(n0)
    counts = np.bincount(ctmc_loss_oracle_batch(n0, rate, duration, 20_000, rng), minlength=n0 + 1)
    pmf = stats.binom.pmf(np.arange(n0 + 1), n0, math.exp(-rate * duration))
    expected = pmf * counts.sum()
    # pool sparse tails so every cell has at least 5 expected counts
    keep = expected >= 5
    obs = np.append(counts[keep], counts[~keep].sum())
    exp = np.append(expected[keep], expected[~keep].sum())
    _, pval = stats.chisquare(obs, exp * obs.sum() / exp.sum())
    assert pval > 0.001


def test_ctmc_scalar_and_batch_agree_in_mean():
    rng = np.random.default_rng(5)
    a = np.array([ctmc_loss_oracle(200, 0.5, 0.4, rng) for _ in range(2000)])
    b = ctmc_loss_oracle_batch(200, 0.5, 0.4, 2000, rng)
    m = 200 * math.exp(-0.2)
    assert abs(a.mean() - m) < 1.0
    assert abs(b.mean() - m) < 1.0


def test_ctmc_limits():
    rng = np.random.default_rng(0)
    assert ctmc_loss_oracle(50, 0.0, 1.0, rng) == 50
    with pytest.raises(ValueError):
        ctmc_loss_oracle(CTMC_MAX_ATOMS + 1, 1.0, 1.0, rng)


def test_stochastic_loss_sigma():
    assert stochastic_loss_sigma(4.75e6, 4.3e6) == pytest.approx(1.48e-4, rel=0.01)
    assert stochastic_loss_sigma(1e6, 5e5) == pytest.approx(1e-3, rel=1e-12)
    assert stochastic_loss_sigma(1e6, 1e6) == 0.0
    with pytest.raises(ValueError):
        stochastic_loss_sigma(1e6, 2e6)


def test_trajectory_anchor_points():
    assert float(DEFAULT_TRAJECTORY(4.3e6)) == pytest.approx(10.0, rel=0.01)
    assert float(DEFAULT_TRAJECTORY(6.7e6)) == pytest.approx(18.0, rel=0.01)
    assert DEFAULT_TRAJECTORY.check_positive()
    t = DEFAULT_TRAJECTORY(np.linspace(1.3e6, 6.7e6, 100))
    assert np.all(np.diff(t) > 0)


def test_trajectory_round_trip():
    tr = NTTrajectory.from_dict(DEFAULT_TRAJECTORY.to_dict())
    assert tr == DEFAULT_TRAJECTORY
    with pytest.raises(ValueError):
        NTTrajectory.through_points([(1e6, 1.0), (2e6, 2.0)])


def test_background_evolution_lands_on_no_loss_means():
    state = CloudState(6_700_000, 18.0)
    out = background_evolution(state, 10.0, DEFAULT_TRAJECTORY, EvaporationParams(), np.random.default_rng(0))
    assert out.n_atoms == pytest.approx(4.3e6, rel=0.01)
    assert out.temperature == pytest.approx(10.0, rel=0.05)
    assert out.clock == 10.0


def test_background_evolution_zero_duration_is_identity():
    s = CloudState(1000, 3.0)
    assert background_evolution(s, 0.0) is s


def test_background_evolution_stochastic_part_needs_rng():
    with pytest.raises(ValueError):
        background_evolution(CloudState(1000, 3.0), 1.0, params=EvaporationParams(stochastic_fraction=1.0))


def test_evaporation_split_recombines():
    ev = EvaporationParams(0.6, 10.0, 0.3)
    f, p = ev.split(10.0)
    assert f * p == pytest.approx(0.6)


def test_spill_cooling():
    s = CloudState(1000, 10.0)
    assert spill_cooling(s, 0.5, 0.1).temperature == pytest.approx(10.0 * 0.5**0.1)
    assert spill_cooling(s, 1.0) is s
    assert spill_cooling(s, 0.5, 0.0) is s
    with pytest.raises(ValueError):
        spill_cooling(s, 0.5, 1.5)


def test_sequential_losses_compose():
    # two binomial stages are one stage with the product survival
    rng = np.random.default_rng(9)
    n0 = 100_000
    a = np.array([binomial_loss(binomial_loss(CloudState(n0, 1.0), 0.8, rng), 0.7, rng).n_atoms
                  for _ in range(3000)])
    p = 0.56
    assert abs(a.mean() - n0 * p) < 5 * math.sqrt(n0 * p * (1 - p) / len(a))
    assert a.var(ddof=1) / (n0 * p * (1 - p)) == pytest.approx(1.0, abs=0.15)


def test_initial_cloud_is_seeded():
    ic = InitialCloud()
    a = [ic.sample(np.random.default_rng(3), k) for k in range(5)]
    b = [ic.sample(np.random.default_rng(3), k) for k in range(5)]
    assert a == b
    n = np.array([ic.sample(np.random.default_rng(k)).n_atoms for k in range(2000)])
    assert n.mean() == pytest.approx(6.7e6, rel=0.01)
    assert n.std() / n.mean() == pytest.approx(0.08, rel=0.1)
