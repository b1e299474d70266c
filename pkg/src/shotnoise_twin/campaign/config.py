"""
Campaign configuration.

The config is a JSON document; every field has a default, so a file only
needs the values it changes.  ``schema_version`` guards against silently
reading a file written for a different layout.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from ..calibration import SM_SURFACE, SignalSurface
from ..ensemble import (DEFAULT_PULSE_FRACTION, DEFAULT_TRAJECTORY_POINTS, EvaporationParams,
                        InitialCloud, NTTrajectory)
from ..imaging import F1_CONFIG, F2_CONFIG, ImagingConfig, ROISet

SCHEMA_VERSION = 1

# imaging defaults found by scripts/calibrate_imaging.py
PHOTON_RATE = 2.0e6
IMAGING_LOSS = 2.2e-3
DETUNING_JITTER_MHZ = 1.5


@dataclass
class NoiseScanConfig:
    t_grid: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.66, 0.8, 1.0, 1.3, 1.6, 2.0])
    runs: int = 20
    disable_loss: bool = False


@dataclass
class CorrelationConfig:
    survivals: list = field(default_factory=lambda: [1.0, 0.85, 0.7, 0.55, 0.42, 0.32])
    runs: int | None = None  # falls back to the global run count
    bootstrap_resamples: int = 1000


@dataclass
class CalibrateConfig:
    survival: float = 0.9
    reference_runs: int = 50
    trial_runs: int = 200
    max_iterations: int = 3
    tolerance: float = 0.05
    gain_perturbation: float = 0.0  # relative spread of the initial linear gain g


@dataclass
class StabilizeConfig:
    survivals: list = field(default_factory=lambda: [0.95, 0.9, 0.75, 0.55, 0.35])
    runs: int | None = None


@dataclass
class CampaignConfig:
    seed: int = 20140601
    runs: int = 50
    out: str = "out"
    workers: int = 1
    frame_dump_runs: int = 0
    initial: InitialCloud = field(default_factory=InitialCloud)
    trajectory_points: list = field(default_factory=lambda: [list(p) for p in DEFAULT_TRAJECTORY_POINTS])
    # None: choose the evaporation survival so the no-loss F2 mean is f2_mean_atoms
    evaporation_survival: float | None = None
    f2_mean_atoms: float = 4.3e6
    evaporation_stochastic_fraction: float = 0.0
    delay_s: float = 10.0
    spill_temperature_coupling: float = 0.1  # dlnT/dlnN for RF spill loss
    pulse_fraction: float = DEFAULT_PULSE_FRACTION
    f1: ImagingConfig = field(default_factory=lambda: replace(
        F1_CONFIG, photon_rate=PHOTON_RATE, loss_per_pulse=IMAGING_LOSS, detuning_jitter_mhz=DETUNING_JITTER_MHZ))
    f2: ImagingConfig = field(default_factory=lambda: replace(
        F2_CONFIG, photon_rate=PHOTON_RATE, loss_per_pulse=IMAGING_LOSS, detuning_jitter_mhz=DETUNING_JITTER_MHZ))
    rois: ROISet = field(default_factory=ROISet)
    surface: dict = field(default_factory=lambda: {k: getattr(SM_SURFACE, k) for k in ("a1", "a2", "a3", "a4", "a5")})
    noise_scan: NoiseScanConfig = field(default_factory=NoiseScanConfig)
    correlation: CorrelationConfig = field(default_factory=CorrelationConfig)
    calibrate: CalibrateConfig = field(default_factory=CalibrateConfig)
    stabilize: StabilizeConfig = field(default_factory=StabilizeConfig)

    def __post_init__(self):
        if self.runs < 2:
            raise ValueError("runs must be >= 2")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def trajectory(self) -> NTTrajectory:
        return NTTrajectory.through_points(self.trajectory_points)

    @property
    def truth_surface(self) -> SignalSurface:
        return SignalSurface(**self.surface)

    def evaporation(self) -> EvaporationParams:
        s = self.evaporation_survival
        if s is None:
            # the no-loss cloud reaches F2 with f2_mean_atoms after the F1 imaging loss
            f1_kept = self.f1.pulse_survival ** self.f1.n_pulses
            s = self.f2_mean_atoms / (self.initial.n_mean * f1_kept)
        return EvaporationParams(s, self.delay_s, self.evaporation_stochastic_fraction)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps() + "\n")


_NESTED = {
    "initial": InitialCloud,
    "f1": ImagingConfig,
    "f2": ImagingConfig,
    "rois": ROISet,
    "noise_scan": NoiseScanConfig,
    "correlation": CorrelationConfig,
    "calibrate": CalibrateConfig,
    "stabilize": StabilizeConfig,
}


def _build(cls, data: dict, default):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return replace(default, **data)


def from_dict(d: dict) -> CampaignConfig:
    d = dict(d)
    version = d.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValueError(f"config schema_version {version} is not supported (expected {SCHEMA_VERSION})")
    base = CampaignConfig()
    kwargs = {}
    for k, v in d.items():
        if k in _NESTED:
            kwargs[k] = _build(_NESTED[k], v, getattr(base, k))
        elif k == "surface":
            kwargs[k] = {**base.surface, **v}
        else:
            kwargs[k] = v
    known = {f.name for f in fields(CampaignConfig)}
    unknown = set(kwargs) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return replace(base, **kwargs)


def load(path) -> CampaignConfig:
    with open(path, encoding="utf-8") as fh:
        return from_dict(json.load(fh))
