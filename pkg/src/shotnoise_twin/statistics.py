"""
Noise estimators and model fits.

Two-sample (successive-difference) deviations are used throughout because
they are insensitive to slow drifts.  Per pair the deviation is
``|x[i+1] - x[i]| / sqrt(2)``; pairs are aggregated as a root mean square so
that a white-noise trace returns its own standard deviation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize


class FitError(RuntimeError):
    """A fit did not converge; ``diagnostics`` holds what is known about the attempt."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


MAX_ITER = 200
PARAM_TOL = 1e-12
N_STARTS = 8


def _values(trace) -> np.ndarray:
    return np.asarray(getattr(trace, "values", trace), dtype=float)


def pair_deviations(trace, relative: bool | None = None) -> np.ndarray:
    """Per-pair two-sample deviations, in acquisition order."""
    if relative is None:
        relative = getattr(trace, "relative", True)
    x = _values(trace)
    if x.ndim != 1 or len(x) < 2:
        raise ValueError("a two-sample deviation needs at least 2 samples in order")
    d = np.abs(np.diff(x)) / math.sqrt(2.0)
    if relative:
        d = d / (0.5 * (x[1:] + x[:-1]))
    return d


def two_sample_relative_deviation(trace, relative: bool | None = None) -> float:
    """
    Uncertainty of a single imaging series from its pulse-to-pulse scatter.

    For signal-sum traces each pair is normalized by its local mean (relative
    deviation); error traces are already relative and are used as they are.
    The rms pair deviation is scaled by ``1/sqrt(M-1)``.
    """
    d = pair_deviations(trace, relative)
    return float(np.sqrt(np.mean(d**2)) / math.sqrt(len(d)))


def successive_difference_deviation(residuals) -> float:
    """Standard deviation of successive differences over sqrt(2)."""
    r = np.asarray(residuals, dtype=float)
    if len(r) < 3:
        raise ValueError("need at least 3 runs in acquisition order")
    return float(np.std(np.diff(r), ddof=1) / math.sqrt(2.0))


def bootstrap_std(differences, n_resamples: int = 1000, rng: np.random.Generator | None = None):
    """
    Single-realization noise of a set of successive differences and its uncertainty.

    Returns ``(std(D)/sqrt(2), std of resampled stds / sqrt(2))``.
    """
    d = np.asarray(differences, dtype=float)
    if len(d) < 5:
        raise ValueError("bootstrap needs at least 5 differences")
    if rng is None:
        rng = np.random.default_rng(0)
    sigma = np.std(d, ddof=1) / math.sqrt(2.0)
    idx = rng.integers(0, len(d), size=(n_resamples, len(d)))
    stds = np.std(d[idx], axis=1, ddof=1)
    return float(sigma), float(np.std(stds, ddof=1) / math.sqrt(2.0))


# -- quadratic detrending of F1/F2 correlations --------------------------------

def quadratic_fit(e1, e2) -> np.ndarray:
    """Ordinary least-squares quadratic ``e2(e1)``; coefficients in ascending order."""
    e1 = np.asarray(e1, dtype=float)
    e2 = np.asarray(e2, dtype=float)
    if len(e1) != len(e2):
        raise ValueError("E1 and E2 must have equal length")
    if len(e1) < 5:
        raise ValueError("need at least 5 runs")
    scale = max(np.ptp(e1), 0.0)
    if scale == 0 or len(np.unique(e1)) < 3:
        raise ValueError("rank-deficient design: E1 has fewer than 3 distinct values")
    X = np.vander(e1, 3, increasing=True)
    coef, *_ = np.linalg.lstsq(X, e2, rcond=None)
    return coef


def quadratic_detrend(e1, e2) -> np.ndarray:
    """Residuals of E2 about its quadratic fit in E1, in the original run order."""
    coef = quadratic_fit(e1, e2)
    return np.asarray(e2, dtype=float) - np.polynomial.polynomial.polyval(np.asarray(e1, float), coef)


# -- four-term imaging noise model -----------------------------------------------

def noise_model_variance(t, A, B, C, D):
    t = np.asarray(t, dtype=float)
    return A / t + B * t + C * t**2 + D


@dataclass
class NoiseModelFit:
    """Fitted sigma_Mod(t) = sqrt(A/t + B t + C t^2 + D); t in ms."""

    A: float
    B: float
    C: float
    D: float
    errors: dict = field(default_factory=dict)
    residual_norm: float = 0.0
    constrained: bool = False

    def variance(self, t):
        return noise_model_variance(t, self.A, self.B, self.C, self.D)

    def sigma(self, t):
        return np.sqrt(self.variance(t))

    def terms(self, t) -> dict:
        t = np.asarray(t, dtype=float)
        return {
            "light": np.sqrt(self.A / t),
            "stochastic_loss": np.sqrt(self.B * t),
            "mean_loss": np.sqrt(self.C) * t,
            "technical": np.sqrt(self.D) * np.ones_like(t),
        }

    def t_opt(self, bounds=(1e-3, 1e3)) -> float:
        """Pulse duration minimizing sigma_Mod (upper bound if monotone)."""
        if self.B == 0 and self.C == 0:
            return bounds[1]
        res = optimize.minimize_scalar(lambda lt: float(self.variance(math.exp(lt))),
                                       bounds=tuple(math.log(b) for b in bounds), method="bounded",
                                       options={"xatol": 1e-10})
        return math.exp(res.x)

    def to_records(self) -> list[dict]:
        return [
            {"parameter": k, "value": getattr(self, k), "std_error": self.errors.get(k, float("nan")),
             "residual_norm": self.residual_norm}
            for k in "ABCD"
        ]


def fit_noise_model(t_values, sigma_values, constrain: bool = False, sigma_errors=None) -> NoiseModelFit:
    """
    Fit sigma_Mod to measured relative uncertainties.

    The fit is done on sigma^2, which is linear in (A, B, C, D): a non-negative
    weighted least-squares problem.  With ``constrain`` the loss terms are tied
    by C = 2 B^2 and (A, B, D) are fitted by bounded nonlinear least squares.
    Weights come from ``sigma_errors`` if given (var error = 2 sigma dsigma),
    otherwise relative weighting in sigma^2 is used.
    """
    t = np.asarray(t_values, dtype=float)
    s = np.asarray(sigma_values, dtype=float)
    if np.any(s <= 0) or np.any(t <= 0):
        raise ValueError("t and sigma must be positive")
    n_distinct = len(np.unique(t))
    if n_distinct < (3 if constrain else 4):
        raise ValueError("not enough distinct pulse durations for the noise model")
    y = s**2
    if sigma_errors is None:
        w = 1.0 / y
    else:
        w = 1.0 / (2.0 * s * np.asarray(sigma_errors, dtype=float))
    X = np.column_stack([1.0 / t, t, t**2, np.ones_like(t)])

    if not constrain:
        # column scaling keeps nnls well conditioned
        Xw = X * w[:, None]
        scale = np.linalg.norm(Xw, axis=0)
        p_scaled, rnorm = optimize.nnls(Xw / scale, y * w, maxiter=50 * X.shape[1])
        p = p_scaled / scale
        active = p > 0
        errs = np.zeros(4)
        dof = max(len(t) - int(active.sum()), 1)
        if active.any():
            J = Xw[:, active]
            cov = np.linalg.pinv(J.T @ J) * (rnorm**2 / dof)
            errs[active] = np.sqrt(np.clip(np.diag(cov), 0, None))
        A, B, C, D = (float(v) for v in p)
        return NoiseModelFit(A, B, C, D, dict(zip("ABCD", map(float, errs))), float(rnorm), False)

    def resid(q):
        A, B, D = q
        return (noise_model_variance(t, A, B, 2 * B**2, D) - y) * w

    def jac(q):
        _, B, _ = q
        return np.column_stack([1.0 / t, t + 4 * B * t**2, np.ones_like(t)]) * w[:, None]

    # scale-aware starting points from the unconstrained linear fit when it is defined
    if n_distinct >= 4:
        free = fit_noise_model(t, s, constrain=False, sigma_errors=sigma_errors)
        a_free, d_free = free.A, free.D
    else:
        a_free = d_free = 0.0
    a0 = max(a_free, 1e-3 * float(np.min(y * t)))
    d0 = max(d_free, 1e-3 * float(np.min(y)))
    b_top = math.sqrt(max(float(np.max(y)), 1e-300)) / float(np.max(t))
    best = None
    for b0 in np.geomspace(b_top * 1e-4, b_top, N_STARTS):
        r = optimize.least_squares(resid, [a0, b0, d0], jac=jac, bounds=([0, 0, 0], [np.inf] * 3),
                                   x_scale="jac", xtol=PARAM_TOL, ftol=PARAM_TOL, gtol=PARAM_TOL,
                                   max_nfev=MAX_ITER)
        if best is None or r.cost < best.cost:
            best = r
    if best is None or best.status <= 0:
        raise FitError("constrained noise-model fit did not converge",
                       {"status": getattr(best, "status", None), "message": getattr(best, "message", "")})
    A, B, D = (float(v) for v in best.x)
    cov = _covariance(best, len(t))
    eA, eB, eD = np.sqrt(np.clip(np.diag(cov), 0, None))
    errors = {"A": float(eA), "B": float(eB), "C": float(4 * B * eB), "D": float(eD)}
    return NoiseModelFit(A, B, 2 * B**2, D, errors, float(np.linalg.norm(best.fun)), True)


def _covariance(result, n_points: int) -> np.ndarray:
    J = result.jac
    dof = max(n_points - J.shape[1], 1)
    s2 = 2 * result.cost / dof
    return np.linalg.pinv(J.T @ J) * s2


# -- 1/N measurement error -----------------------------------------------------------

def measurement_error_model(n, b1, b2, b3):
    n = np.asarray(n, dtype=float)
    return np.sqrt((b1 / (n - b2)) ** 2 + b3**2)


@dataclass
class MeasurementErrorFit:
    """sigma(N) = sqrt((b1/(N - b2))^2 + b3^2)."""

    b1: float
    b2: float
    b3: float
    errors: dict = field(default_factory=dict)
    residual_norm: float = 0.0

    def __call__(self, n):
        return measurement_error_model(n, self.b1, self.b2, self.b3)

    def to_records(self) -> list[dict]:
        return [{"parameter": k, "value": getattr(self, k), "std_error": self.errors.get(k, float("nan")),
                 "residual_norm": self.residual_norm} for k in ("b1", "b2", "b3")]

    def to_dict(self) -> dict:
        return asdict(self)


def fit_measurement_error(n_values, sigma_values) -> MeasurementErrorFit:
    """
    Three-parameter fit of the imaging noise against atom number.

    Residuals are relative (model/data - 1).  b2 is bounded below the smallest
    fitted N; several starting values of b2 are tried and the lowest cost kept.
    """
    n = np.asarray(n_values, dtype=float)
    s = np.asarray(sigma_values, dtype=float)
    if len(n) < 4:
        raise ValueError("need at least 4 points")
    if np.any(s <= 0):
        raise ValueError("sigma values must be positive")
    n_min = float(n.min())
    b2_hi = n_min * (1 - 1e-6)

    def resid(q):
        b1, b2, b3 = q
        return measurement_error_model(n, b1, b2, b3) / s - 1.0

    def jac(q):
        b1, b2, b3 = q
        m = measurement_error_model(n, b1, b2, b3)
        u = b1 / (n - b2)
        dm_db1 = u / (n - b2) / m
        dm_db2 = u * b1 / (n - b2) ** 2 / m
        dm_db3 = b3 / m
        return np.column_stack([dm_db1, dm_db2, dm_db3]) / s[:, None]

    best = None
    b3_0 = float(np.min(s)) * 0.5
    for frac in np.geomspace(1e-3, 0.95, N_STARTS):
        b2_0 = frac * n_min
        # b1 from the largest sigma at the smallest N
        excess = max(float(np.max(s)) ** 2 - b3_0**2, float(np.max(s)) ** 2 * 1e-2)
        b1_0 = math.sqrt(excess) * (n_min - b2_0)
        try:
            r = optimize.least_squares(resid, [b1_0, b2_0, b3_0], jac=jac,
                                       bounds=([0, -np.inf, 0], [np.inf, b2_hi, np.inf]),
                                       x_scale="jac", xtol=PARAM_TOL, ftol=PARAM_TOL, gtol=PARAM_TOL,
                                       max_nfev=MAX_ITER)
        except ValueError:
            continue
        if best is None or r.cost < best.cost:
            best = r
    if best is None or best.status <= 0:
        raise FitError("measurement-error fit did not converge", {"n_points": len(n)})
    cov = _covariance(best, len(n))
    e = np.sqrt(np.clip(np.diag(cov), 0, None))
    b1, b2, b3 = (float(v) for v in best.x)
    return MeasurementErrorFit(b1, b2, b3, {"b1": float(e[0]), "b2": float(e[1]), "b3": float(e[2])},
                               float(np.linalg.norm(best.fun)))
