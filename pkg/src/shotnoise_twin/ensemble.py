"""
Ground-truth stochastic model of the trapped cloud.

Atoms are lost independently of one another, so after any loss stage the
survivor count is binomially distributed.  The RF spill pulses used for
feedback and the background decay during the thermalization delay are both
expressed as survival probabilities applied to a :class:`CloudState`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

# RF spill pulse train (metadata only; loss is applied as aggregate survival)
RF_PULSE_ON_US = 8.4
RF_PULSE_PERIOD_US = 50.4
RF_DEPTH_FRACTION = 0.95
DEFAULT_PULSE_FRACTION = 1.05e-5

CTMC_MAX_ATOMS = 10_000


@dataclass(frozen=True)
class CloudState:
    """Ground truth of one cloud: atom count, temperature in uK, clock in s."""

    n_atoms: int
    temperature: float
    clock: float = 0.0

    def __post_init__(self):
        if self.n_atoms < 0:
            raise ValueError(f"n_atoms must be non-negative, got {self.n_atoms}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass(frozen=True)
class LossSpec:
    """Survival probability, given directly or derived from a number of RF pulses."""

    survival_probability: float

    def __post_init__(self):
        p = self.survival_probability
        if not (0.0 <= p <= 1.0) or math.isnan(p):
            raise ValueError(f"survival probability must lie in [0, 1], got {p}")

    @classmethod
    def from_pulses(cls, n_pulses: int, per_pulse_fraction: float = DEFAULT_PULSE_FRACTION):
        return cls(survival_from_pulses(n_pulses, per_pulse_fraction))


@dataclass(frozen=True)
class NTTrajectory:
    """
    Cubic mean-temperature trajectory T(N).

    Coefficients are in ascending order of ``N / n_scale`` and give T in uK.
    Evaluation outside ``validity`` holds the temperature at the nearest edge,
    since a cubic extrapolates badly.
    """

    coeffs: tuple[float, float, float, float]
    validity: tuple[float, float] = (0.5e6, 1.0e7)
    n_scale: float = 1.0e6

    def __call__(self, n):
        lo, hi = self.validity
        x = np.clip(np.asarray(n, dtype=float), lo, hi) / self.n_scale
        return np.polynomial.polynomial.polyval(x, self.coeffs)

    def check_positive(self, n_grid: int = 400) -> bool:
        n = np.linspace(*self.validity, n_grid)
        return bool(np.all(self(n) > 0))

    def to_dict(self) -> dict:
        return {"coeffs": list(self.coeffs), "validity": list(self.validity), "n_scale": self.n_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "NTTrajectory":
        return cls(tuple(d["coeffs"]), tuple(d["validity"]), d.get("n_scale", 1.0e6))

    @classmethod
    def through_points(cls, points, validity=(0.5e6, 1.0e7), n_scale=1.0e6) -> "NTTrajectory":
        """Least-squares cubic through ``(N, T)`` anchor points (at least 4)."""
        pts = np.asarray(points, dtype=float)
        if len(pts) < 4:
            raise ValueError("a cubic trajectory needs at least 4 points")
        c = np.polynomial.polynomial.polyfit(pts[:, 0] / n_scale, pts[:, 1], 3)
        return cls(tuple(float(v) for v in c), tuple(validity), n_scale)


# F1 start (6.7e6, 18 uK) and no-loss F2 (4.3e6, 10 uK) are the measured means.
# The two low-N points place the error-propagation maximum at 1.3e6 atoms.
DEFAULT_TRAJECTORY_POINTS = (
    (1.3e6, 2.4),
    (2.8e6, 5.867),
    (4.3e6, 10.0),
    (6.7e6, 18.0),
)
DEFAULT_TRAJECTORY = NTTrajectory.through_points(DEFAULT_TRAJECTORY_POINTS)


@dataclass(frozen=True)
class EvaporationParams:
    """
    Background decay during the F1 -> F2 delay.

    ``survival`` is the mean fraction kept over ``reference_duration``; the
    decay is exponential in time.  ``stochastic_fraction`` splits the
    log-survival between binomial single-particle loss (1.0) and a
    deterministic evaporative decay (0.0).
    """

    survival: float = 4.3 / 6.7
    reference_duration: float = 10.0
    stochastic_fraction: float = 0.0

    def __post_init__(self):
        if not 0 < self.survival <= 1:
            raise ValueError("survival must be in (0, 1]")
        if not 0 <= self.stochastic_fraction <= 1:
            raise ValueError("stochastic_fraction must be in [0, 1]")

    def survival_over(self, duration: float) -> float:
        return self.survival ** (duration / self.reference_duration)

    def split(self, duration: float) -> tuple[float, float]:
        """Return (deterministic factor, binomial survival) for ``duration``."""
        log_s = math.log(self.survival_over(duration))
        p_bin = math.exp(self.stochastic_fraction * log_s)
        f_det = math.exp((1.0 - self.stochastic_fraction) * log_s)
        return f_det, p_bin


def binomial_loss(state: CloudState, p: float, rng: np.random.Generator) -> CloudState:
    """Each atom survives independently with probability ``p``."""
    p = LossSpec(p).survival_probability
    if p == 1.0:
        return state
    n = int(rng.binomial(state.n_atoms, p))
    return replace(state, n_atoms=n)


def survival_from_pulses(n_pulses: int, per_pulse_fraction: float = DEFAULT_PULSE_FRACTION) -> float:
    """(1 - eps)**n evaluated as exp(n * log1p(-eps))."""
    if n_pulses < 0:
        raise ValueError("n_pulses must be >= 0")
    if not 0.0 <= per_pulse_fraction < 1.0:
        raise ValueError("per-pulse fraction must be in [0, 1)")
    if n_pulses == 0:
        return 1.0
    return math.exp(n_pulses * math.log1p(-per_pulse_fraction))


def background_evolution(
    state: CloudState,
    duration: float,
    traj: NTTrajectory = DEFAULT_TRAJECTORY,
    params: EvaporationParams = EvaporationParams(),
    rng: np.random.Generator | None = None,
    n_reference: float | None = None,
    n_expected: float | None = None,
) -> CloudState:
    """
    Evolve the cloud through the thermalization delay.

    The atom number decays by a deterministic evaporative factor and by
    binomial single-particle loss.  The temperature is rescaled along
    ``traj``: ``T_new = T * traj(N_new_mean) / traj(n_reference)``, where
    ``n_reference`` defaults to the current atom number.  A cloud starting on
    the trajectory therefore stays on it, while run-to-run number
    fluctuations only weakly move the temperature.

    ``N_new_mean`` is the expected count: ``n_expected`` (the mean atom number
    at the start of the delay, default the current count) times the mean
    survival.  Passing the pre-loss expectation keeps the temperature from
    tracking the binomial noise of an earlier loss stage.
    """
    if duration < 0:
        raise ValueError("duration must be >= 0")
    if duration == 0:
        return state
    f_det, p_bin = params.split(duration)
    n = state.n_atoms
    n_det = int(round(n * f_det))
    if p_bin < 1.0:
        if rng is None:
            raise ValueError("a random generator is required for stochastic background loss")
        n_new = int(rng.binomial(n_det, p_bin))
    else:
        n_new = n_det
    n_mean = (n if n_expected is None else n_expected) * f_det * p_bin
    n_ref = n if n_reference is None else n_reference
    if n_ref <= 0 or n_mean <= 0:
        t_new = state.temperature
    else:
        t_new = state.temperature * float(traj(n_mean)) / float(traj(n_ref))
    return CloudState(n_new, t_new, state.clock + duration)


def spill_cooling(state: CloudState, survival: float, coupling: float = 0.1) -> CloudState:
    """
    Temperature change from RF spill loss: ``T_new = T * p ** coupling``.

    Loss-induced temperature changes are about ten times smaller in relative
    terms than the atom-number change, hence the default coupling of 0.1.
    """
    p = LossSpec(survival).survival_probability
    if not 0 <= coupling <= 1:
        raise ValueError("coupling must lie in [0, 1]")
    if p in (0.0, 1.0) or coupling == 0:
        return state
    return replace(state, temperature=state.temperature * p**coupling)


def ctmc_loss_oracle(n0: int, rate: float, duration: float, rng: np.random.Generator) -> int:
    """
    Continuous-time Monte Carlo of independent single-particle loss.

    Steps through successive loss events: with n atoms left the waiting time
    to the next event is exponential with rate ``n * rate``.
    """
    if n0 > CTMC_MAX_ATOMS:
        raise ValueError(f"oracle is limited to {CTMC_MAX_ATOMS} atoms, got {n0}")
    if n0 < 0 or rate < 0 or duration < 0:
        raise ValueError("n0, rate and duration must be non-negative")
    n = n0
    t = 0.0
    if rate == 0:
        return n
    while n > 0:
        t += rng.exponential(1.0 / (n * rate))
        if t > duration:
            break
        n -= 1
    return n


def ctmc_loss_oracle_batch(
    n0: int, rate: float, duration: float, n_trials: int, rng: np.random.Generator, chunk: int = 4000
) -> np.ndarray:
    """
    Vectorized form of :func:`ctmc_loss_oracle` for many independent trials.

    Waiting times for the successive events (rates n0, n0-1, ..., 1 times
    ``rate``) are drawn for a block of trials at once; the survivor count is
    n0 minus the number of events completed before ``duration``.
    """
    if n0 > CTMC_MAX_ATOMS:
        raise ValueError(f"oracle is limited to {CTMC_MAX_ATOMS} atoms, got {n0}")
    if rate == 0 or n0 == 0:
        return np.full(n_trials, n0, dtype=np.int64)
    scales = 1.0 / (rate * np.arange(n0, 0, -1, dtype=float))
    out = np.empty(n_trials, dtype=np.int64)
    for start in range(0, n_trials, chunk):
        stop = min(start + chunk, n_trials)
        waits = rng.exponential(1.0, size=(stop - start, n0)) * scales
        times = np.cumsum(waits, axis=1)
        out[start:stop] = n0 - np.count_nonzero(times <= duration, axis=1)
    return out


def stochastic_loss_sigma(n1_mean: float, n2_mean: float) -> float:
    """Relative number noise sqrt((1 - N2/N1) / N2) left by binomial loss."""
    if n2_mean <= 0 or n1_mean <= 0:
        raise ValueError("atom numbers must be positive")
    if n2_mean > n1_mean:
        raise ValueError("N2 > N1: loss cannot increase the atom number")
    return math.sqrt((1.0 - n2_mean / n1_mean) / n2_mean)


@dataclass(frozen=True)
class InitialCloud:
    """Distribution of the cloud delivered by evaporation at F1."""

    n_mean: float = 6.7e6
    n_rel_std: float = 0.08
    temperature: float = 18.0
    # dlnT/dlnN within one dataset; T varies ~10x less than N
    temperature_coupling: float = 0.1
    drift_rel_amplitude: float = 0.0
    drift_period_runs: float = 40.0

    def sample(self, rng: np.random.Generator, run_index: int = 0) -> CloudState:
        drift = self.drift_rel_amplitude * math.sin(2 * math.pi * run_index / self.drift_period_runs)
        rel = self.n_rel_std * rng.standard_normal() + drift
        rel = max(rel, -0.9)
        n = int(round(self.n_mean * (1.0 + rel)))
        t = self.temperature * (1.0 + rel) ** self.temperature_coupling
        return CloudState(n, t, 0.0)
