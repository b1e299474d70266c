"""
Feedback controller: reference signal, error, cubic loss-pulse law and the
iterative calibration of its gains.
"""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .calibration import OutOfRangeError


@dataclass(frozen=True)
class FeedbackParams:
    """N_Loss = g E (1 + q E + c E^2) + d, in RF pulses."""

    g: float = 0.0
    q: float = 0.0
    c: float = 0.0
    d: float = 0.0

    def __post_init__(self):
        if self.d < 0:
            raise ValueError("default pulse count d must be >= 0")

    def raw(self, e):
        e = np.asarray(e, dtype=float)
        return self.g * e * (1.0 + self.q * e + self.c * e * e) + self.d

    def change(self, other: "FeedbackParams", e_range=(-0.4, 0.4)) -> float:
        """
        Relative difference between two pulse laws.

        Gains q and c can sit near zero, so parameters are not compared one
        by one; the laws are compared as curves over ``e_range``.  The largest
        deviation is scaled by the span of pulse counts, i.e. by the feedback
        action rather than the constant offset d.
        """
        e = np.linspace(*e_range, 201)
        a, b = self.raw(e), other.raw(e)
        scale = max(float(np.ptp(a)), float(np.ptp(b)), 1.0)
        return float(np.max(np.abs(a - b)) / scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeedbackParams":
        return cls(**{k: float(d[k]) for k in ("g", "q", "c", "d")})


INACTIVE = FeedbackParams()


def loss_pulses(e1_prime: float, params: FeedbackParams) -> int:
    """Cubic law clamped at 0 and rounded half away from zero."""
    v = float(params.raw(e1_prime))
    if not math.isfinite(v):
        raise ValueError("pulse law is not finite")
    if v <= 0:
        return 0
    return int(math.floor(v + 0.5))


def under_target(e1_prime: float, params: FeedbackParams) -> bool:
    """True when the law asks for a negative number of pulses."""
    return bool(params.raw(e1_prime) < 0)


@dataclass(frozen=True)
class ReferenceSignal:
    trace: tuple
    n_runs: int
    dataset_id: str

    MIN_RUNS = 20

    @classmethod
    def freeze(cls, traces, dataset_id: str | None = None) -> "ReferenceSignal":
        arr = np.array([np.asarray(getattr(t, "values", t), dtype=float) for t in traces])
        if arr.ndim != 2 or len(arr) < cls.MIN_RUNS:
            raise ValueError(f"a reference needs at least {cls.MIN_RUNS} runs of equal length")
        mean = arr.mean(axis=0)
        if dataset_id is None:
            dataset_id = hashlib.sha256(arr.tobytes()).hexdigest()[:16]
        return cls(tuple(float(v) for v in mean), len(arr), dataset_id)

    @property
    def mean(self) -> float:
        return float(np.mean(self.trace))

    def to_dict(self) -> dict:
        return {"trace": list(self.trace), "n_runs": self.n_runs, "dataset_id": self.dataset_id}

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceSignal":
        return cls(tuple(d["trace"]), int(d["n_runs"]), d["dataset_id"])


def error_prime(sigma_f1_mean: float, ref: ReferenceSignal) -> float:
    m = ref.mean
    if not m > 0:
        raise ValueError("reference mean signal must be positive")
    return float(sigma_f1_mean) / m - 1.0


@dataclass(frozen=True)
class TargetSpec:
    """Target F2 signal sum."""

    sigma_f2: float

    def __post_init__(self):
        if not self.sigma_f2 > 0:
            raise ValueError("target signal must be positive")

    def f_ideal(self, sigma_f1: float) -> float:
        return self.sigma_f2 / sigma_f1

    def reachable(self, no_loss_f2) -> np.ndarray:
        """Per run: is the target below what the run reaches without applied loss."""
        return np.asarray(no_loss_f2, dtype=float) > self.sigma_f2


@dataclass(frozen=True)
class LossCurve:
    """Cubic f(N_Loss) = Sigma_F2 / Sigma_F1 over the sampled pulse range."""

    poly: np.polynomial.Polynomial
    n_range: tuple[float, float]
    max_rel_residual: float
    monotone: bool

    def __call__(self, n_loss):
        return self.poly(n_loss)

    def f_range(self) -> tuple[float, float]:
        n = np.linspace(*self.n_range, 401)
        f = self.poly(n)
        return float(f.min()), float(f.max())


def fit_loss_curve(n_loss, sigma_f1, sigma_f2) -> LossCurve:
    n = np.asarray(n_loss, dtype=float)
    s1 = np.asarray(sigma_f1, dtype=float)
    s2 = np.asarray(sigma_f2, dtype=float)
    if len(n) < 8:
        raise ValueError("need at least 8 trial runs")
    if len(np.unique(n)) < 4 or np.ptp(n) == 0:
        raise ValueError("insufficient spread of applied loss pulses")
    f = s2 / s1
    poly = np.polynomial.Polynomial.fit(n, f, 3)
    lo, hi = float(n.min()), float(n.max())
    grid = np.linspace(lo, hi, 401)
    monotone = bool(np.all(poly.deriv()(grid) < 0))
    if not monotone:
        warnings.warn("fitted loss curve is not monotone decreasing over the sampled range", stacklevel=2)
    resid = float(np.max(np.abs(poly(n) / f - 1.0)))
    return LossCurve(poly, (lo, hi), resid, monotone)


def invert_for_ideal_loss(curve: LossCurve, f_ideal: float) -> float:
    """
    Pulse count at which the curve reaches ``f_ideal``.

    Among real roots inside the sampled interval the smallest non-negative
    one is taken; the result is clamped to [0, interval max].
    """
    lo, hi = curve.n_range
    tol = 1e-9 * max(abs(hi), 1.0)
    roots = (curve.poly - f_ideal).roots()
    real = roots[np.abs(roots.imag) <= 1e-9 * np.maximum(np.abs(roots.real), 1.0)].real
    inside = np.sort(real[(real >= lo - tol) & (real <= hi + tol)])
    nonneg = inside[inside >= -tol]
    if len(nonneg) == 0:
        fmin, fmax = curve.f_range()
        raise OutOfRangeError(f"f = {f_ideal:.6g} not reachable; achievable range is [{fmin:.6g}, {fmax:.6g}]")
    return float(min(max(nonneg[0], 0.0), hi))


def refit_gains(e1_prime, n_loss_ideal) -> FeedbackParams:
    """
    Least-squares fit of the pulse law to ideal losses.

    The law is linear in (d, g, gq, gc); q and c follow by division.  A
    negative fitted offset is clamped to zero pulses.
    """
    e = np.asarray(e1_prime, dtype=float)
    n = np.asarray(n_loss_ideal, dtype=float)
    if len(e) < 8:
        raise ValueError("need at least 8 trials")
    X = np.vander(e, 4, increasing=True)
    coef, _, rank, _ = np.linalg.lstsq(X, n, rcond=None)
    if rank < 4:
        raise ValueError("rank-deficient trial set for the cubic pulse law")
    d, g, gq, gc = (float(v) for v in coef)
    if abs(g) < 1e-12 * max(np.max(np.abs(n)), 1.0):
        raise ValueError("linear gain vanishes; q and c are undefined")
    return FeedbackParams(g, gq / g, gc / g, max(d, 0.0))
