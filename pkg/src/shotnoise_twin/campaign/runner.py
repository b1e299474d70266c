"""
One simulated experimental run and ordered execution of many.

A run is: initial cloud -> F1 imaging -> controller decides the number of
RF loss pulses -> RF spill loss -> thermalization delay -> F2 imaging.
Every run draws from its own generator, seeded from (master seed, stream,
run index), so results do not depend on execution order or worker count.
"""
from __future__ import annotations

import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..ensemble import background_evolution, binomial_loss, spill_cooling, survival_from_pulses
from ..feedback import FeedbackParams, ReferenceSignal, error_prime, loss_pulses, under_target
from ..imaging import SignalTrace, run_series
from .config import CampaignConfig


def stream_id(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def run_rng(seed: int, stream: str, run_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream_id(stream), run_index]))


@dataclass
class FixedLoss:
    n_pulses: int = 0

    def __call__(self, sigma_f1_mean):
        return self.n_pulses, float("nan"), False


@dataclass
class Feedback:
    params: FeedbackParams
    reference: ReferenceSignal

    def __call__(self, sigma_f1_mean):
        e = error_prime(sigma_f1_mean, self.reference)
        return loss_pulses(e, self.params), e, under_target(e, self.params)


@dataclass
class RunRecord:
    run: int
    seed: str
    n_loss: int
    survival: float
    e1_prime: float
    under_target: bool
    n1_start: int
    n1_mean: float
    t1: float
    n2_mean: float
    t2: float
    f1: SignalTrace = field(repr=False)
    f2: SignalTrace | None = field(default=None, repr=False)
    n_after_loss: int = -1  # right after the RF spill loss

    @property
    def sigma_f1(self) -> float:
        return self.f1.mean

    @property
    def sigma_f2(self) -> float:
        return self.f2.mean if self.f2 is not None else float("nan")


def simulate_run(cfg: CampaignConfig, stream: str, run_index: int, controller=None,
                 f1_only: bool = False, f1_override=None) -> RunRecord:
    rng = run_rng(cfg.seed, stream, run_index)
    f1_cfg = f1_override or cfg.f1
    truth = cfg.truth_surface
    state = cfg.initial.sample(rng, run_index)
    n_start = state.n_atoms
    tr1, state = run_series(state, f1_cfg, cfg.rois, truth, rng, run_index)
    if f1_only:
        return RunRecord(run_index, f"{cfg.seed}:{stream}:{run_index}", 0, 1.0, float("nan"), False,
                         n_start, float(tr1.n_atoms.mean()), tr1.temperature, float("nan"), float("nan"), tr1)
    controller = controller or FixedLoss(0)
    n_loss, e1p, under = controller(tr1.mean)
    p = survival_from_pulses(n_loss, cfg.pulse_fraction)
    n_before = state.n_atoms
    state = spill_cooling(binomial_loss(state, p, rng), p, cfg.spill_temperature_coupling)
    n_after_loss = state.n_atoms
    # evaporation carries the temperature along the trajectory as for a no-loss run
    state = background_evolution(state, cfg.delay_s, cfg.trajectory, cfg.evaporation(), rng,
                                 n_reference=n_start, n_expected=n_before)
    tr2, _ = run_series(state, cfg.f2, cfg.rois, truth, rng, run_index)
    return RunRecord(run_index, f"{cfg.seed}:{stream}:{run_index}", n_loss, p, e1p, under, n_start,
                     float(tr1.n_atoms.mean()), tr1.temperature, float(tr2.n_atoms.mean()), tr2.temperature,
                     tr1, tr2, n_after_loss)


def _job(args):
    return simulate_run(*args)


def run_many(cfg: CampaignConfig, stream: str, n_runs: int, controller=None, f1_only=False,
             f1_override=None) -> list[RunRecord]:
    """Simulate ``n_runs`` runs; records come back in run-index order."""
    jobs = [(cfg, stream, i, controller, f1_only, f1_override) for i in range(n_runs)]
    if cfg.workers > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            return list(ex.map(_job, jobs, chunksize=max(1, math.ceil(n_runs / (4 * cfg.workers)))))
    return [_job(j) for j in jobs]
