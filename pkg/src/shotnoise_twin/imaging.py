"""
Synthetic dark-field Faraday imaging.

A frame is rendered from the cloud's rotation-angle profile: light that
leaks through the polarizer (fraction CS) plus the rotated fraction sin^2
theta reaches the camera.  Photon counts are Poisson, the EM register
doubles the variance, and read noise and a baseline are added.  The
reduction to the signal S and the signal sum mirrors what runs on the
acquisition hardware.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy import optimize

from .calibration import SM_SURFACE, OutOfRangeError, SignalSurface
from .ensemble import CloudState


class InvalidFrameError(ValueError):
    """The reference intensity is not positive after baseline subtraction."""


@dataclass(frozen=True)
class ImagingConfig:
    detuning_mhz: float = 1200.0
    detuning_jitter_mhz: float = 1.0
    pulse_duration_ms: float = 0.66
    cycle_period_ms: float = 7.0
    n_pulses: int = 50
    cube_suppression: float = 1e-3
    photon_rate: float = 1.5e6  # incident photons per pixel per ms
    em_gain: float = 10.0
    excess_noise: bool = True
    poisson: bool = True
    read_noise: float = 30.0  # counts rms
    baseline_offset: float = 500.0
    loss_per_pulse: float = 2.6e-3  # atom loss fraction for a pulse of loss_reference_ms
    loss_reference_ms: float = 0.66
    width_px_at_10uK: float = 6.0
    label: str = "F1"

    def __post_init__(self):
        if not self.pulse_duration_ms > 0:
            raise ValueError("pulse duration must be positive")
        if self.n_pulses < 2:
            raise ValueError("a series needs at least 2 pulses")
        if not 0 < self.cube_suppression < 1:
            raise ValueError("cube suppression must lie in (0, 1)")
        if not 0 <= self.loss_per_pulse < 1:
            raise ValueError("per-pulse imaging loss must lie in [0, 1)")
        if self.em_gain <= 0 or self.photon_rate < 0:
            raise ValueError("gain must be positive and photon rate non-negative")

    @property
    def n_incident(self) -> float:
        """Incident photons per pixel during one pulse."""
        return self.photon_rate * self.pulse_duration_ms

    @property
    def pulse_survival(self) -> float:
        return max(0.0, 1.0 - self.loss_per_pulse * self.pulse_duration_ms / self.loss_reference_ms)

    def noiseless(self) -> "ImagingConfig":
        return replace(self, poisson=False, excess_noise=False, read_noise=0.0, detuning_jitter_mhz=0.0)


F1_CONFIG = ImagingConfig()
F2_CONFIG = ImagingConfig(pulse_duration_ms=0.55, n_pulses=100, label="F2")


@dataclass(frozen=True)
class ROISet:
    """
    Region layout on the camera frame (rows x columns = height x width).

    The signal ROI is centred; the reference ROI is the ring between two
    centred squares; the offset ROI is a masked strip along the left edge.
    """

    height: int = 200
    width: int = 220
    signal_size: int = 29
    reference_inner: int = 61
    reference_outer: int = 101
    offset_columns: int = 20

    def __post_init__(self):
        if not self.signal_size < self.reference_inner < self.reference_outer:
            raise ValueError("need signal < reference inner < reference outer")
        if self.reference_outer > min(self.height, self.width):
            raise ValueError("reference ROI does not fit on the frame")
        left = (self.width - self.reference_outer) // 2
        if self.offset_columns <= 0 or self.offset_columns > left:
            raise ValueError("offset strip overlaps the reference ROI or is empty")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def centre(self) -> tuple[int, int]:
        return (self.height // 2, self.width // 2)

    def _square(self, size: int) -> tuple[slice, slice]:
        r, c = self.centre
        h = size // 2
        return slice(r - h, r - h + size), slice(c - h, c - h + size)

    @property
    def signal_slices(self) -> tuple[slice, slice]:
        return self._square(self.signal_size)

    @cached_property
    def signal_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, bool)
        m[self.signal_slices] = True
        return m

    @cached_property
    def reference_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, bool)
        m[self._square(self.reference_outer)] = True
        m[self._square(self.reference_inner)] = False
        return m

    @cached_property
    def offset_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, bool)
        m[:, : self.offset_columns] = True
        return m

    @property
    def n_signal(self) -> int:
        return self.signal_size**2

    @property
    def n_reference(self) -> int:
        return self.reference_outer**2 - self.reference_inner**2

    @property
    def n_offset(self) -> int:
        return self.height * self.offset_columns

    def pairwise_disjoint(self) -> bool:
        s, r, o = self.signal_mask, self.reference_mask, self.offset_mask
        return not ((s & r).any() or (s & o).any() or (r & o).any())


DEFAULT_ROIS = ROISet()


@dataclass
class Frame:
    pixels: np.ndarray

    def save_pgm(self, path):
        """16-bit binary PGM, counts clipped to [0, 65535]."""
        data = np.clip(np.rint(self.pixels), 0, 65535).astype(">u2")
        h, w = data.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
            fh.write(data.tobytes())


@dataclass
class SignalTrace:
    """Signal sums of one imaging series, in acquisition order."""

    values: np.ndarray
    series: str = "F1"
    run: int = 0
    n_atoms: np.ndarray | None = None  # ground truth at each pulse
    temperature: float | None = None

    relative = True

    def __len__(self):
        return len(self.values)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def mean_atoms(self) -> float:
        return float(np.mean(self.n_atoms)) if self.n_atoms is not None else float("nan")


@dataclass
class ErrorTrace:
    values: np.ndarray
    mean_error: float
    series: str = "F1"
    run: int = 0

    relative = False

    def __len__(self):
        return len(self.values)


# -- cloud profile ---------------------------------------------------------------------

def cloud_width_px(temperature: float, cfg: ImagingConfig) -> float:
    return cfg.width_px_at_10uK * math.sqrt(temperature / 10.0)


def _profile(shape, centre, sigma_px) -> np.ndarray:
    r = np.arange(shape[0])[:, None] - centre[0]
    c = np.arange(shape[1])[None, :] - centre[1]
    return np.exp(-(r**2 + c**2) / (2.0 * sigma_px**2))


def _signal_roi_profile(temperature, cfg, rois) -> np.ndarray:
    s = rois.signal_size
    return _profile((s, s), (s // 2, s // 2), cloud_width_px(temperature, cfg))


def peak_rotation_angle(n_atoms, temperature, calib: SignalSurface = SM_SURFACE,
                        cfg: ImagingConfig = F1_CONFIG, rois: ROISet = DEFAULT_ROIS) -> float:
    """
    Peak Faraday angle (rad) of the Gaussian cloud.

    Chosen so that the noise-free sum of sin^2(theta) over the signal ROI
    equals the atomic part of the calibration surface, ``S(N,T) - a4``.
    """
    if n_atoms <= calib.a5:
        raise OutOfRangeError(f"N = {n_atoms:.4g} is at or below the detection bound a5 = {calib.a5:.4g}")
    a1, a2, a3, _, a5 = calib.params
    target = a1 * (n_atoms - a5) ** a2 / temperature**a3
    g = _signal_roi_profile(temperature, cfg, rois).ravel()
    if target <= 0:
        return 0.0
    hi = math.pi / 2
    if np.sum(np.sin(hi * g) ** 2) < target:
        raise OutOfRangeError("signal exceeds what the rendered cloud can produce")
    f = lambda th: float(np.sum(np.sin(th * g) ** 2)) - target
    return optimize.brentq(f, 0.0, hi, xtol=1e-15, rtol=1e-14)


def _detuning_factor(cfg: ImagingConfig, rng) -> float:
    if cfg.detuning_jitter_mhz <= 0 or rng is None:
        return 1.0
    return cfg.detuning_mhz / (cfg.detuning_mhz + cfg.detuning_jitter_mhz * rng.standard_normal())


def _detect(expected_photons, cfg: ImagingConfig, rng):
    """Photon detection, EM amplification, read noise and baseline."""
    lam = np.asarray(expected_photons, dtype=float)
    photons = rng.poisson(lam) if cfg.poisson else lam
    if cfg.excess_noise:
        photons = np.asarray(photons, dtype=float)
        electrons = np.where(photons > 0, rng.gamma(np.maximum(photons, 1e-300), cfg.em_gain), 0.0)
    else:
        electrons = photons * cfg.em_gain
    counts = electrons + cfg.baseline_offset
    if cfg.read_noise > 0:
        counts = counts + cfg.read_noise * rng.standard_normal(lam.shape)
    return counts


def render_frame(state: CloudState, cfg: ImagingConfig = F1_CONFIG, rois: ROISet = DEFAULT_ROIS,
                 calib: SignalSurface = SM_SURFACE, rng: np.random.Generator | None = None) -> Frame:
    """
    Render one camera frame for the cloud in ``state``.

    Below the detection bound (N <= a5) the frame carries no atomic signal.
    Above it, the beam-profile offset a4 is spread evenly over the signal ROI.
    """
    if rng is None and (cfg.poisson or cfg.excess_noise or cfg.read_noise > 0 or cfg.detuning_jitter_mhz > 0):
        raise ValueError("a random generator is required for a noisy render")
    cs = cfg.cube_suppression
    s_map = np.zeros(rois.shape)
    if state.n_atoms > calib.a5:
        theta_p = peak_rotation_angle(state.n_atoms, state.temperature, calib, cfg, rois)
        k = _detuning_factor(cfg, rng)
        g = _profile(rois.shape, rois.centre, cloud_width_px(state.temperature, cfg))
        s_map = np.sin(k * theta_p * g) ** 2
        s_map[rois.signal_mask] += calib.a4 / rois.n_signal
    lam = cfg.n_incident * (s_map + cs)
    lam[rois.offset_mask] = 0.0
    if rng is None:
        rng = np.random.default_rng(0)  # unused when all noise is off
    counts = _detect(lam, cfg, rng)
    return Frame(np.clip(counts, 0.0, None))


def compute_signal(frame: Frame, rois: ROISet = DEFAULT_ROIS, cs: float = 1e-3) -> np.ndarray:
    """Per-pixel S over the signal ROI; negative values are kept."""
    px = frame.pixels
    if px.shape != rois.shape:
        raise ValueError(f"frame shape {px.shape} does not match ROI layout {rois.shape}")
    baseline = px[rois.offset_mask].mean()
    i_ref = px[rois.reference_mask].mean() - baseline
    if not i_ref > 0:
        raise InvalidFrameError("reference intensity is not positive after baseline subtraction")
    return ((px[rois.signal_slices] - baseline) / i_ref - 1.0) * cs


def signal_sum(s_map, rois: ROISet | None = None) -> float:
    s_map = np.asarray(s_map, dtype=float)
    if rois is not None and s_map.shape != (rois.signal_size, rois.signal_size):
        raise ValueError("S map does not match the signal ROI")
    return float(s_map.sum())


def sample_signal_sum(n_atoms: int, temperature: float, cfg: ImagingConfig, rois: ROISet,
                      calib: SignalSurface, rng: np.random.Generator) -> float:
    """
    Draw the signal sum of one frame without rendering every pixel.

    Only the ROI totals enter the signal sum, and each total has a closed-form
    distribution: a sum of Poisson counts is Poisson, Gamma EM amplification
    of a photon total is the sum of the per-pixel Gammas, and read noise adds
    in quadrature.  Detuning jitter rescales the atomic signal by k^2
    (small-angle form of sin^2(k theta)).
    """
    cs = cfg.cube_suppression
    n_sig, n_ref, n_off = rois.n_signal, rois.n_reference, rois.n_offset
    atomic = 0.0
    if n_atoms > calib.a5:
        a1, a2, a3, a4, a5 = calib.params
        k = _detuning_factor(cfg, rng)
        atomic = k * k * a1 * (n_atoms - a5) ** a2 / temperature**a3 + a4
    n_inc = cfg.n_incident
    lam = np.array([n_inc * (atomic + n_sig * cs), n_inc * cs * n_ref])
    if cfg.poisson:
        photons = rng.poisson(lam).astype(float)
    else:
        photons = lam
    if cfg.excess_noise:
        electrons = np.where(photons > 0, rng.gamma(np.maximum(photons, 1e-300), cfg.em_gain), 0.0)
    else:
        electrons = photons * cfg.em_gain
    totals = electrons + cfg.baseline_offset * np.array([n_sig, n_ref])
    off_total = cfg.baseline_offset * n_off
    if cfg.read_noise > 0:
        z = rng.standard_normal(3)
        totals = totals + cfg.read_noise * np.sqrt([n_sig, n_ref]) * z[:2]
        off_total += cfg.read_noise * math.sqrt(n_off) * z[2]
    baseline = off_total / n_off
    i_ref = totals[1] / n_ref - baseline
    if not i_ref > 0:
        raise InvalidFrameError("reference intensity is not positive after baseline subtraction")
    return float(cs * (totals[0] - n_sig * baseline) / i_ref - n_sig * cs)


def unobserved_loss_rel_var(cfg: ImagingConfig, n_atoms: float) -> float:
    """
    Relative atom-number variance from imaging loss that a series mean does not see.

    Losses in pulse j shift the series mean by (M - j)/M of their size, the
    atom number at the series end by all of it.  Summing the binomial
    variances of the mismatch gives about M (1 - s) / 3 atoms for per-pulse
    survival s, the same for the mismatch to the start of the series.
    """
    if n_atoms <= 0:
        return 0.0
    m = cfg.n_pulses
    lost = 1.0 - cfg.pulse_survival
    return m * lost * (1.0 - lost) * (m * m - 1) / (3.0 * m * m) / n_atoms


def run_series(state: CloudState, cfg: ImagingConfig = F1_CONFIG, rois: ROISet = DEFAULT_ROIS,
               calib: SignalSurface = SM_SURFACE, rng: np.random.Generator | None = None,
               run_index: int = 0, render: bool = False, frame_sink=None) -> tuple[SignalTrace, CloudState]:
    """
    Acquire one imaging series of ``cfg.n_pulses`` pulses.

    Each pulse is imaged, then the cloud loses atoms binomially with the
    per-pulse survival of ``cfg``.  ``render=True`` goes through full frames
    (and hands each to ``frame_sink`` if given); otherwise the ROI totals are
    sampled directly.
    """
    if rng is None:
        raise ValueError("run_series needs a random generator")
    m = cfg.n_pulses
    values = np.empty(m)
    atoms = np.empty(m, dtype=np.int64)
    n = state.n_atoms
    p = cfg.pulse_survival
    for k in range(m):
        atoms[k] = n
        if render:
            frame = render_frame(CloudState(n, state.temperature), cfg, rois, calib, rng)
            if frame_sink is not None:
                frame_sink(k, frame)
            values[k] = signal_sum(compute_signal(frame, rois, cfg.cube_suppression))
        else:
            values[k] = sample_signal_sum(n, state.temperature, cfg, rois, calib, rng)
        if p < 1.0:
            n = int(rng.binomial(n, p))
    trace = SignalTrace(values, cfg.label, run_index, atoms, state.temperature)
    new_state = CloudState(n, state.temperature, state.clock + m * cfg.cycle_period_ms * 1e-3)
    return trace, new_state


def mean_trace(traces) -> np.ndarray:
    """Per-pulse mean signal sum over a dataset of traces."""
    traces = list(traces)
    if len(traces) < 2:
        raise ValueError("a mean trace needs at least 2 runs")
    labels = {t.series for t in traces}
    lengths = {len(t) for t in traces}
    if len(labels) != 1 or len(lengths) != 1:
        raise ValueError("traces must share series label and length")
    return np.mean([t.values for t in traces], axis=0)


def error_trace(trace: SignalTrace, mean: np.ndarray) -> ErrorTrace:
    mean = np.asarray(mean, dtype=float)
    if len(mean) != len(trace.values):
        raise ValueError("trace and mean trace differ in length")
    e = trace.values / mean - 1.0
    return ErrorTrace(e, float(e.mean()), trace.series, trace.run)


def write_traces_csv(path, traces):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "series", "pulse", "sigma_sum"])
        for tr in traces:
            for k, v in enumerate(tr.values):
                w.writerow([tr.run, tr.series, k, repr(float(v))])
