import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from shotnoise_twin import statistics as st
from shotnoise_twin.calibration import OutOfRangeError, surface_eval
from shotnoise_twin.campaign import config as config_mod
from shotnoise_twin.campaign import recipes
from shotnoise_twin.campaign.cli import main
from shotnoise_twin.campaign.runner import FixedLoss, run_many, run_rng, simulate_run
from shotnoise_twin.feedback import INACTIVE


@pytest.fixture
def small_cfg():
    cfg = config_mod.CampaignConfig(runs=12)
    return replace(cfg, calibrate=replace(cfg.calibrate, reference_runs=20, trial_runs=30),
                   noise_scan=replace(cfg.noise_scan, runs=6))


@pytest.fixture
def small_config_file(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps({"runs": 12, "noise_scan": {"runs": 6},
                                "calibrate": {"reference_runs": 20, "trial_runs": 30, "max_iterations": 2},
                                "stabilize": {"survivals": [0.9]}}))
    return str(path)


# -- config -------------------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = replace(config_mod.CampaignConfig(), seed=3, runs=17)
    path = tmp_path / "c.json"
    cfg.save(path)
    back = config_mod.load(path)
    assert back == cfg
    assert back.dumps() == cfg.dumps()


def test_config_partial_file_keeps_defaults():
    cfg = config_mod.from_dict({"runs": 30, "f1": {"n_pulses": 40}, "surface": {"a2": 1.9}})
    assert cfg.runs == 30
    assert cfg.f1.n_pulses == 40 and cfg.f1.pulse_duration_ms == 0.66
    assert cfg.truth_surface.a2 == 1.9 and cfg.truth_surface.a3 == 1.51


def test_config_rejects_unknown_keys_and_versions():
    with pytest.raises(ValueError, match="unknown"):
        config_mod.from_dict({"runz": 3})
    with pytest.raises(ValueError, match="unknown"):
        config_mod.from_dict({"f1": {"gain": 3}})
    with pytest.raises(ValueError, match="schema_version"):
        config_mod.from_dict({"schema_version": 99})
    with pytest.raises(ValueError):
        config_mod.CampaignConfig(runs=1)


def test_evaporation_survival_anchors_no_loss_mean():
    cfg = config_mod.CampaignConfig()
    recs = run_many(cfg, "anchor", 30)
    # the anchor is the cloud arriving at F2, before the F2 imaging loss
    n2_start = np.mean([r.f2.n_atoms[0] for r in recs])
    assert n2_start == pytest.approx(cfg.f2_mean_atoms, rel=0.03)


# -- runner -------------------------------------------------------------------------------

def test_run_rng_streams_differ():
    a = run_rng(1, "x", 0).random()
    assert a == run_rng(1, "x", 0).random()
    assert a != run_rng(1, "x", 1).random()
    assert a != run_rng(1, "y", 0).random()
    assert a != run_rng(2, "x", 0).random()


def test_runs_independent_of_order_and_workers(small_cfg):
    serial = run_many(small_cfg, "order", 4)
    single = simulate_run(small_cfg, "order", 2)
    assert single.sigma_f2 == serial[2].sigma_f2
    parallel = run_many(replace(small_cfg, workers=2), "order", 4)
    assert [r.sigma_f2 for r in parallel] == [r.sigma_f2 for r in serial]
    assert [r.run for r in parallel] == [0, 1, 2, 3]


def test_run_record_ground_truth(small_cfg):
    r = simulate_run(small_cfg, "truth", 0, FixedLoss(10_000))
    assert r.n_loss == 10_000
    assert r.survival == pytest.approx(0.9, abs=0.001)
    assert len(r.f1.n_atoms) == small_cfg.f1.n_pulses and len(r.f2.n_atoms) == small_cfg.f2.n_pulses
    assert r.n1_start > r.n_after_loss > r.f2.n_atoms[-1]


def test_measured_f2_follows_surface_within_envelope():
    cfg = config_mod.CampaignConfig()
    z = []
    for n_loss in (0, 20_000):
        for r in run_many(cfg, f"envelope:{n_loss}", 100, FixedLoss(n_loss)):
            pred = np.mean([surface_eval(n, r.t2, cfg.truth_surface, False) for n in r.f2.n_atoms])
            z.append((r.sigma_f2 / pred - 1) / st.two_sample_relative_deviation(r.f2))
    assert np.mean(np.abs(z) <= 3) >= 0.99


# -- recipes ------------------------------------------------------------------------------

def test_noise_scan_grid_must_cover_range(small_cfg):
    cfg = replace(small_cfg, noise_scan=replace(small_cfg.noise_scan, t_grid=[0.2, 0.5, 1.0, 1.5]))
    with pytest.raises(ValueError):
        recipes.recipe_noise_scan(cfg)


def test_noise_scan_without_loss_statistics_coincide():
    cfg = config_mod.CampaignConfig()
    cfg = replace(cfg, noise_scan=replace(cfg.noise_scan, disable_loss=True))
    table = recipes.recipe_noise_scan(cfg).tables["noise_scan"]
    c = table.columns
    diff = table.column(c[1]) - table.column(c[3])
    err = np.hypot(table.column(c[2]), table.column(c[4]))
    assert np.all(np.abs(diff) <= 3 * err)
    # light-noise term scales as 1/sqrt(t)
    t = table.column(c[0])
    fit = st.fit_noise_model(t, table.column(c[3]), sigma_errors=table.column(c[4]))
    assert fit.C == pytest.approx(0.0, abs=3 * fit.errors["C"] + 1e-12)


def test_correlation_needs_four_settings(small_cfg):
    cfg = replace(small_cfg, correlation=replace(small_cfg.correlation, survivals=[1.0, 0.8, 0.6]))
    with pytest.raises(ValueError):
        recipes.recipe_correlation(cfg)


def test_error_spread_of_free_running_campaign():
    cfg = config_mod.CampaignConfig()
    ref = recipes.build_reference(cfg)
    e = [r.sigma_f1 / ref.signal.mean - 1 for r in ref.records]
    assert 0.15 < max(np.abs(e)) < 0.6


def test_calibrate_from_its_own_output_is_a_fixed_point():
    cfg = config_mod.CampaignConfig()
    ref = recipes.build_reference(cfg)
    first = recipes.calibrate(cfg, ref, 0.9)
    again = recipes.calibrate(cfg, ref, 0.9, guess=first.params, tag="again")
    assert again.converged and again.iterations == 1


def test_stabilize_rejects_unreachable_target(small_cfg):
    cfg = replace(small_cfg, stabilize=replace(small_cfg.stabilize, survivals=[0.9, 1.2]))
    with pytest.raises(OutOfRangeError, match="achievable"):
        recipes.recipe_stabilize(cfg)


def test_stabilize_without_loss_is_inactive(small_cfg):
    cfg = replace(small_cfg, stabilize=replace(small_cfg.stabilize, survivals=[1.0]))
    res = recipes.recipe_stabilize(cfg)
    assert res.summary["feedback_params"]["1"] == INACTIVE.to_dict()
    row = res.tables["stabilize"].rows[0]
    assert row[7] == 1.0  # no applied loss


def test_stabilized_number_near_ninety_percent():
    cfg = config_mod.CampaignConfig(runs=40)
    cfg = replace(cfg, stabilize=replace(cfg.stabilize, survivals=[0.9]))
    table = recipes.recipe_stabilize(cfg).tables["stabilize"]
    ratio = table.column(table.columns[6])[0]
    slope, slope_err = table.column(table.columns[14])[0], table.column(table.columns[15])[0]
    assert ratio == pytest.approx(0.9, abs=0.03)
    assert abs(slope) <= 3 * slope_err


# -- CLI ----------------------------------------------------------------------------------

@pytest.mark.parametrize("cmd", ["scan-noise", "correlate", "calibrate", "stabilize"])
def test_cli_recipes_write_outputs(cmd, tmp_path, small_config_file, capsys):
    out = tmp_path / "out"
    code = main(["--config", small_config_file, "--seed", "5", "--out", str(out), cmd])
    assert code in (0, 1)
    d = out / cmd
    summary = json.loads((d / "summary.json").read_text())
    assert summary["recipe"] == cmd and summary["seed"] == 5
    assert (d / "config.json").exists()
    tables = list(d.glob("*.csv"))
    assert tables
    for path in tables:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) >= 2 and all(len(r) == len(rows[0]) for r in rows)
    assert "wrote" in capsys.readouterr().out


def test_cli_report(tmp_path, small_config_file, capsys):
    out = tmp_path / "out"
    assert main(["--config", small_config_file, "--out", str(out), "--runs", "10", "scan-noise"]) == 0
    capsys.readouterr()
    assert main(["--out", str(out), "report"]) == 0
    text = (out / "report.csv").read_text().splitlines()
    assert text[0] == "recipe,check,verdict"
    assert any(line.startswith("scan-noise,") for line in text[1:])
    assert json.loads((out / "report.json").read_text())["scan-noise"]["checks"]


def test_cli_report_without_results(tmp_path, capsys):
    assert main(["--out", str(tmp_path / "empty"), "report"]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_unreachable_target_exits_2(tmp_path, small_config_file, capsys):
    code = main(["--config", small_config_file, "--out", str(tmp_path), "stabilize", "--survivals", "1.5"])
    assert code == 2
    assert "achievable" in capsys.readouterr().err


def test_cli_frame_dump(tmp_path, small_config_file):
    out = tmp_path / "out"
    cfg = json.loads(open(small_config_file).read())
    cfg["noise_scan"]["t_grid"] = [0.1, 0.5, 1.0, 2.0]
    cfg["f1"] = {"n_pulses": 3}
    path = tmp_path / "frames.json"
    path.write_text(json.dumps(cfg))
    assert main(["--config", str(path), "--out", str(out), "--frames", "1", "scan-noise"]) == 0
    frames = sorted((out / "scan-noise" / "frames").glob("*.pgm"))
    assert len(frames) == 4 * 3
    assert frames[0].read_bytes().startswith(b"P5\n220 200\n65535\n")
