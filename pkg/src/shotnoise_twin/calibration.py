"""
Link between atom number, temperature and the Faraday signal sum.

The empirical surface ``sigma_S(N, T) = a1 (N - a5)**a2 / T**a3 + a4`` (T in
uK) converts relative atom-number fluctuations into relative signal-sum
fluctuations through the logarithmic derivative ``gamma_N``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import interpolate, optimize, spatial

from .ensemble import DEFAULT_TRAJECTORY, NTTrajectory
from .statistics import MAX_ITER, N_STARTS, PARAM_TOL, FitError

SCHEMA_VERSION = 1


class OutOfRangeError(ValueError):
    """Evaluation requested outside the region where a fitted model is valid."""


@dataclass(frozen=True)
class ValidityRegion:
    """Convex hull of fitted (N, T) points, expanded about its centroid."""

    points: tuple  # hull vertices, ((N, T), ...)

    @classmethod
    def from_data(cls, n, t, expand: float = 0.10) -> "ValidityRegion":
        pts = np.column_stack([np.asarray(n, float), np.asarray(t, float)])
        scaled = pts / pts.mean(axis=0)
        hull = spatial.ConvexHull(scaled)
        verts = pts[hull.vertices]
        centre = verts.mean(axis=0)
        verts = centre + (1.0 + expand) * (verts - centre)
        return cls(tuple(map(tuple, verts.tolist())))

    def contains(self, n, t) -> np.ndarray:
        verts = np.asarray(self.points)
        norm = verts.mean(axis=0)
        tri = spatial.Delaunay(verts / norm)
        q = np.column_stack([np.atleast_1d(n).astype(float), np.atleast_1d(t).astype(float)]) / norm
        return tri.find_simplex(q) >= 0


@dataclass(frozen=True)
class SignalSurface:
    a1: float
    a2: float
    a3: float
    a4: float
    a5: float
    errors: dict = field(default_factory=dict, compare=False)
    validity: ValidityRegion | None = field(default=None, compare=False)
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def params(self) -> tuple:
        return (self.a1, self.a2, self.a3, self.a4, self.a5)

    def scaled(self, k: float) -> "SignalSurface":
        return SignalSurface(self.a1 * k, self.a2, self.a3, self.a4 * k, self.a5)

    def to_dict(self) -> dict:
        return {
            "a1": self.a1, "a2": self.a2, "a3": self.a3, "a4": self.a4, "a5": self.a5,
            "errors": dict(self.errors),
            "validity": None if self.validity is None else [list(p) for p in self.validity.points],
            "diagnostics": dict(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SignalSurface":
        v = d.get("validity")
        return cls(d["a1"], d["a2"], d["a3"], d["a4"], d["a5"], d.get("errors", {}),
                   None if v is None else ValidityRegion(tuple(map(tuple, v))), d.get("diagnostics", {}))


# Fitted values quoted for the experiment; a1 rescaled for T in uK (see README)
SM_SURFACE = SignalSurface(
    a1=18.3e-12, a2=1.82, a3=1.51, a4=0.13, a5=8.0e5,
    errors={"a1": 1.6e-12, "a2": 0.03, "a3": 0.03, "a4": 0.05, "a5": 0.7e5},
)


def _check_domain(n, t, params: SignalSurface, check_region: bool):
    n = np.asarray(n, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(n <= params.a5):
        raise OutOfRangeError(f"N must exceed a5 = {params.a5:.3g}")
    if np.any(t <= 0):
        raise ValueError("temperature must be positive")
    if check_region and params.validity is not None and not np.all(params.validity.contains(n, t)):
        raise OutOfRangeError("(N, T) outside the fitted validity region")
    return n, t


def surface_eval(n, t, params: SignalSurface = SM_SURFACE, check_region: bool = True):
    n, t = _check_domain(n, t, params, check_region)
    out = params.a1 * (n - params.a5) ** params.a2 / t**params.a3 + params.a4
    return float(out) if out.ndim == 0 else out


def gamma_N(n, t, params: SignalSurface = SM_SURFACE, check_region: bool = True):
    """Error-propagation coefficient (dS/dN)(N/S) in closed form."""
    n, t = _check_domain(n, t, params, check_region)
    s = params.a1 * (n - params.a5) ** params.a2 / t**params.a3 + params.a4
    out = params.a2 * (1.0 - params.a4 / s) / (1.0 - params.a5 / n)
    return float(out) if out.ndim == 0 else out


def gamma_T(n, t, params: SignalSurface = SM_SURFACE, check_region: bool = True):
    """Magnitude of the temperature coefficient |(dS/dT)(T/S)| = a3 (1 - a4/S)."""
    s = surface_eval(n, t, params, check_region)
    return params.a3 * (1.0 - params.a4 / np.asarray(s))


def propagate_stochastic_noise(sigma_n: float, gamma: float) -> float:
    if sigma_n < 0:
        raise ValueError("sigma_N must be non-negative")
    return gamma * sigma_n


def shot_noise_band(n, t, params: SignalSurface = SM_SURFACE, check_region: bool = True):
    """Atom shot noise 1/sqrt(N) expressed as relative signal-sum noise."""
    return gamma_N(n, t, params, check_region) / np.sqrt(np.asarray(n, dtype=float))


@dataclass
class GammaCurve:
    """gamma_N tabulated along a mean N-T trajectory, PCHIP-interpolated in log N."""

    n: np.ndarray
    gamma: np.ndarray
    trajectory: NTTrajectory
    surface: SignalSurface = SM_SURFACE

    def __post_init__(self):
        self._interp = interpolate.PchipInterpolator(np.log(self.n), self.gamma)

    def __call__(self, n):
        return self._interp(np.log(np.asarray(n, dtype=float)))

    def peak(self) -> float:
        """Atom number of the gamma maximum, refined on the continuous curve."""
        i = int(np.argmax(self.gamma))
        lo, hi = self.n[max(i - 1, 0)], self.n[min(i + 1, len(self.n) - 1)]
        r = optimize.minimize_scalar(lambda x: -gamma_N(x, self.trajectory(x), self.surface, False),
                                     bounds=(lo, hi), method="bounded", options={"xatol": 1.0})
        return float(r.x)

    @classmethod
    def along(cls, params: SignalSurface = SM_SURFACE, trajectory: NTTrajectory = DEFAULT_TRAJECTORY,
              n_range: tuple | None = None, n_points: int = 200) -> "GammaCurve":
        lo, hi = n_range or trajectory.validity
        lo = max(lo, params.a5 * 1.001)
        n = np.geomspace(lo, hi, n_points)
        g = gamma_N(n, trajectory(n), params, check_region=False)
        return cls(n, g, trajectory, params)


# -- fits ---------------------------------------------------------------------------

def fit_nt_trajectory(n_means, t_means, validity: tuple | None = None) -> NTTrajectory:
    """Least-squares cubic T(N) through per-dataset means."""
    n = np.asarray(n_means, dtype=float)
    t = np.asarray(t_means, dtype=float)
    if len(n) < 4:
        raise ValueError("a cubic trajectory needs at least 4 datasets")
    if validity is None:
        validity = (float(n.min()), float(n.max()))
    return NTTrajectory.through_points(np.column_stack([n, t]), validity=validity)


def _surface_model(q, n, t):
    la1, a2, a3, a4, a5 = q
    return np.exp(la1 + a2 * np.log(n - a5) - a3 * np.log(t)) + a4


def fit_surface(n, t, s, loss_setting=None, weights=None) -> SignalSurface:
    """
    Fit the five surface parameters to (N, T, sigma_S) triples.

    Residuals are relative to the measured signal sum.  a1 is fitted in log
    form; a5 is bounded below the smallest N.  Multi-start over a5 and a4,
    keeping the lowest-cost solution.
    """
    n = np.asarray(n, dtype=float)
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if len(n) < 10:
        raise ValueError("need at least 10 (N, T, sigma_S) triples")
    if loss_setting is not None and len(np.unique(loss_setting)) < 2:
        raise ValueError("degenerate span: all triples come from a single loss setting")
    if np.ptp(n) <= 0.05 * np.mean(n):
        raise ValueError("degenerate span: atom numbers do not vary")
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=float)

    def resid(q):
        return (_surface_model(q, n, t) / s - 1.0) * w

    def jac(q):
        la1, a2, a3, a4, a5 = q
        core = np.exp(la1 + a2 * np.log(n - a5) - a3 * np.log(t))
        cols = [core, core * np.log(n - a5), -core * np.log(t), np.ones_like(n), -core * a2 / (n - a5)]
        return np.column_stack(cols) / s[:, None] * w[:, None]

    n_min = float(n.min())
    best = None
    s_min = float(s.min())
    for frac in np.geomspace(1e-3, 0.9, N_STARTS):
        for a4_0 in (0.0, 0.5 * s_min):
            a5_0 = frac * n_min
            # linear fit of log(s - a4) for the remaining parameters
            y = np.log(np.clip(s - a4_0, 1e-300, None))
            X = np.column_stack([np.ones_like(n), np.log(n - a5_0), -np.log(t)])
            q0, *_ = np.linalg.lstsq(X, y, rcond=None)
            x0 = [q0[0], q0[1], q0[2], a4_0, a5_0]
            lo = [-np.inf, 0.0, -np.inf, -np.inf, -np.inf]
            hi = [np.inf, np.inf, np.inf, s_min, n_min * (1 - 1e-9)]
            lo_a, hi_a = np.array(lo), np.array(hi)
            margin = np.where(np.isfinite(hi_a), 1e-9 * np.abs(hi_a) + 1e-12, 0.0)
            x0 = np.clip(x0, lo_a + 1e-12, hi_a - margin)
            try:
                r = optimize.least_squares(resid, x0, jac=jac, bounds=(lo, hi), x_scale="jac",
                                           xtol=PARAM_TOL, ftol=PARAM_TOL, gtol=PARAM_TOL, max_nfev=MAX_ITER)
            except (ValueError, FloatingPointError):
                continue
            if np.isfinite(r.cost) and (best is None or r.cost < best.cost):
                best = r
    if best is None or best.status <= 0:
        raise FitError("surface fit did not converge", {"n_points": len(n)})
    la1, a2, a3, a4, a5 = (float(v) for v in best.x)
    J = best.jac
    dof = max(len(n) - 5, 1)
    cov = np.linalg.pinv(J.T @ J) * (2 * best.cost / dof)
    e = np.sqrt(np.clip(np.diag(cov), 0, None))
    a1 = math.exp(la1)
    errors = {"a1": a1 * float(e[0]), "a2": float(e[1]), "a3": float(e[2]), "a4": float(e[3]), "a5": float(e[4])}
    diag = {"cost": float(best.cost), "nfev": int(best.nfev), "n_points": len(n),
            "rms_relative_residual": float(np.sqrt(2 * best.cost / len(n)))}
    return SignalSurface(a1, a2, a3, a4, a5, errors, ValidityRegion.from_data(n, t), diag)


# -- persistence -----------------------------------------------------------------------

def dataset_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=float)).tobytes())
    return h.hexdigest()[:16]


def save_calibration(path, surface: SignalSurface, trajectory: NTTrajectory, provenance: dict | None = None):
    doc = {
        "schema_version": SCHEMA_VERSION,
        "surface": surface.to_dict(),
        "trajectory": trajectory.to_dict(),
        "provenance": provenance or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def load_calibration(path) -> tuple[SignalSurface, NTTrajectory, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported calibration schema {doc.get('schema_version')}")
    return SignalSurface.from_dict(doc["surface"]), NTTrajectory.from_dict(doc["trajectory"]), doc["provenance"]
