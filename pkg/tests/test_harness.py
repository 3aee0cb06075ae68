import dataclasses
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphsoar.dynamics import LOG_COLUMNS, FlightLog
from morphsoar.harness import (Scenario, ScenarioError, Schedule, batch, compute_metrics,
                               harmonic_response, load_manifest, load_scenario, run_scenario,
                               settling_time, simulate_scenario, trial_seed)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
COL = {c: i for i, c in enumerate(LOG_COLUMNS)}


def _log(t, **cols):
    data = np.zeros((len(t), len(LOG_COLUMNS)))
    data[:, 0] = t
    for k, v in cols.items():
        data[:, COL[k]] = v
    return FlightLog(list(data))


# ---- scenario files

finite = st.floats(0.0, 50.0, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.5, 120.0), st.integers(0, 2**31), st.floats(5.0, 15.0), st.floats(0.0, 0.5),
       st.sampled_from(["hover", "yaw_step", "yaw_sine", "z_sine", "y_square", "push"]),
       st.booleans(), st.tuples(finite, finite, finite))
def test_config_round_trip(duration, seed, v_air, turb, kind, comp, wind):
    sc = Scenario(name="rt", duration=duration, seed=seed, v_air=v_air, turbulence=turb,
                  crosswind=wind, delay_compensation=comp, schedule=Schedule(kind),
                  design=(("hover_angle", 0.4),), poles=(("attitude_wn", 9.0),))
    text = sc.to_config()
    back = Scenario.from_config(text)
    assert back == sc
    assert back.to_config() == text


def test_shipped_configs_parse():
    for path in CONFIGS.glob("*.ini"):
        if path.stem.startswith(("batch", "sweep", "design")) or path.stem == "sysid":
            continue
        sc = load_scenario(path)
        assert Scenario.from_config(sc.to_config()) == sc


@pytest.mark.parametrize("text,match", [
    ("[scenario]\nduration = -1\n", "duration"),
    ("[scenario]\nseed = 1.5\n", "seed"),
    ("[field]\nturbulence = 0.9\n", "turbulence"),
    ("[field]\ngusts = 1\n", "unknown field"),
    ("[design]\nwingspan = 1\n", "unknown design"),
    ("[controller]\npreset = lqr\n", "preset"),
    ("[schedule]\nkind = loop\n", "kind"),
    ("[schedule]\nkind = hover\nfrequency = 1\n", "unexpected"),
    ("[schedule]\nkind = crosswind\nstart = 5\nstop = 2\n", "window"),
    ("[extra]\n", "sections"),
    ("not an ini", "unreadable"),
])
def test_config_validation(text, match):
    with pytest.raises(ScenarioError, match=match):
        Scenario.from_config(text)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "none.ini")


# ---- schedules

def test_y_square_targets():
    s = Schedule("y_square", (("amplitude", 0.1), ("period", 10.0)))
    assert [s.target(t).position[1] for t in (0.0, 4.99, 5.0, 9.99, 10.0)] == [0.1, 0.1, -0.1, -0.1, 0.1]


def test_yaw_step_target():
    s = Schedule("yaw_step")
    assert s.target(0.99).yaw == 0.0
    assert s.target(1.0).yaw == pytest.approx(math.radians(110.0))


def test_yaw_sine_feedforward():
    s = Schedule("yaw_sine", (("frequency", 0.15),))
    tg = s.target(0.0)
    assert tg.yaw == 0.0
    assert tg.yaw_rate == pytest.approx(math.pi / 2 * 2 * math.pi * 0.15)


# ---- metric oracles

def test_perfect_tracking_metrics():
    t = np.arange(0.0, 10.0, 0.01)
    yaw = 0.5 * np.sin(2 * math.pi * 0.1 * t)
    log = _log(t, yaw=yaw, yaw_t=yaw, y=0.05, y_t=0.05)
    m = compute_metrics(log, Scenario(schedule=Schedule("yaw_sine", (("frequency", 0.1),))))
    assert m.position_rmse == (0.0, 0.0, 0.0) and m.attitude_rmse == (0.0, 0.0, 0.0)
    assert m.containment == 1.0
    (f, g, ph, d), = m.tracking
    assert g == pytest.approx(1.0, abs=1e-12) and abs(d) < 1e-9


def test_delayed_sine_phase_metric():
    t = np.arange(0.0, 40.0, 0.01)
    w = 2 * math.pi * 0.15
    log = _log(t, yaw_t=math.pi / 2 * np.sin(w * t), yaw=math.pi / 2 * np.sin(w * (t - 0.1)))
    m = compute_metrics(log, Scenario(schedule=Schedule("yaw_sine", (("frequency", 0.15),))))
    (_, g, ph, d), = m.tracking
    assert d == pytest.approx(0.1, rel=0.05)
    assert ph < 0.0 and g == pytest.approx(1.0, rel=1e-3)


def test_constant_offset_rmse():
    t = np.arange(0.0, 10.0, 0.01)
    m = compute_metrics(_log(t, z=0.02), Scenario())
    assert m.position_rmse[2] == pytest.approx(0.02)
    assert m.containment == 1.0


def test_containment_counts_box_exits():
    t = np.arange(0.0, 10.0, 0.01)
    x = np.where(t < 2.5, 0.15, 0.0)  # outside the 20 cm box for a quarter of the run
    assert compute_metrics(_log(t, x=x), Scenario()).containment == pytest.approx(0.75)


def test_metrics_window_longer_than_log():
    with pytest.raises(ValueError):
        compute_metrics(_log(np.arange(0.0, 1.0, 0.01)), Scenario(), skip=2.0)


def test_settling_time_first_order():
    t = np.arange(0.0, 5.0, 0.001)
    y = 1.0 - np.exp(-t / 0.2)
    ts, ok = settling_time(t, y, 0.0, 1.0)
    assert ok and ts == pytest.approx(0.2 * math.log(20.0), abs=2e-3)
    assert settling_time(t, 0.5 * y, 0.0, 1.0)[1] is False


def test_yaw_step_settling_from_log():
    t = np.arange(0.0, 4.0, 0.01)
    target = math.radians(110.0)
    yaw = np.where(t < 1.0, 0.0, target * (1 - np.exp(-(t - 1.0) / 0.1)))
    yaw = np.angle(np.exp(1j * yaw))  # logged yaw is wrapped
    m = compute_metrics(_log(t, yaw=yaw, yaw_t=np.where(t < 1.0, 0.0, target)), Scenario(schedule=Schedule("yaw_step")))
    assert m.settled and m.settling_time == pytest.approx(0.1 * math.log(20.0), abs=0.011)


def test_harmonic_response_gain():
    t = np.arange(0.0, 20.0, 0.01)
    g, ph, d = harmonic_response(t, np.sin(t), 0.5 * np.sin(t - 0.3) + 2.0, 1 / (2 * math.pi))
    assert g == pytest.approx(0.5) and ph == pytest.approx(-0.3)


# ---- runs and batches

def test_run_scenario_writes_files(tmp_path):
    log_path, metrics_path, res = run_scenario(CONFIGS / "hover_calm.ini", tmp_path)
    assert log_path.exists() and metrics_path.exists()
    assert FlightLog.from_csv(log_path).to_csv() == log_path.read_text()
    assert metrics_path.read_text().startswith("metric,value\nrmse_x,")
    assert res.metrics.containment == 1.0


def test_divergence_keeps_partial_log(tmp_path):
    log_path, metrics_path, res = run_scenario(CONFIGS / "diverge.ini", tmp_path)
    assert res.diverged and metrics_path is None
    assert log_path.exists() and 0 < len(res.log) < 1000


def test_rerun_is_byte_identical():
    sc = dataclasses.replace(load_scenario(CONFIGS / "hover.ini"), duration=3.0)
    assert simulate_scenario(sc).to_csv() == simulate_scenario(sc).to_csv()


def test_trial_seed_policy():
    seeds = {trial_seed(7, i, r) for i in range(3) for r in range(5)}
    assert len(seeds) == 15
    assert trial_seed(7, 1, 2) == trial_seed(7, 1, 2) != trial_seed(8, 1, 2)


def _manifest(tmp_path, body):
    base = dataclasses.replace(load_scenario(CONFIGS / "hover.ini"), duration=2.5)
    (tmp_path / "short.ini").write_text(base.to_config())
    p = tmp_path / "m.ini"
    p.write_text(body)
    return p


def test_batch_independent_of_worker_count(tmp_path):
    p = _manifest(tmp_path, "[batch]\nbase_seed = 3\n\n[run.a]\nconfig = short.ini\nrepeats = 3\n")
    one = batch(p, workers=1)
    many = batch(p, workers=3)
    assert one.to_csv() == many.to_csv()
    assert [s for _, _, s, _ in one.trials] == [trial_seed(3, 0, r) for r in range(3)]
    assert [r.log.to_csv() for *_, r in one.trials] == [r.log.to_csv() for *_, r in many.trials]


def test_batch_collects_failures(tmp_path):
    p = _manifest(tmp_path, "[run.ok]\nconfig = short.ini\n\n[run.bad]\nconfig = missing.ini\n")
    s = batch(p, out_dir=tmp_path / "out")
    assert len(s.trials) == 1 and len(s.failures) == 1
    assert s.failures[0][0] == "bad"
    assert (tmp_path / "out" / "summary.csv").exists()
    assert "bad" in (tmp_path / "out" / "failures.csv").read_text()


def test_empty_manifest(tmp_path):
    p = _manifest(tmp_path, "[batch]\nbase_seed = 1\n")
    s = batch(p)
    assert s.trials == [] and s.failures == []
    assert s.to_csv() == "entry,metric,n,mean,std\n"


def test_manifest_validation(tmp_path):
    p = _manifest(tmp_path, "[run.a]\nconfig = short.ini\nrepeats = 0\n")
    with pytest.raises(ScenarioError):
        load_manifest(p)
    p.write_text("[jobs]\n")
    with pytest.raises(ScenarioError):
        load_manifest(p)
