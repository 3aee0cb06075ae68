"""Scenario files, flight experiments, metrics and batches.

A scenario is a flat INI file with five sections::

    [scenario]   name, duration (s), seed
    [design]     any DesignParams field (SI units, angles in rad)
    [field]      v_air, turbulence, correlation_time, crosswind (x,y,z in m/s)
    [controller] preset (pole-placement | id-1 | id-2), delay_compensation,
                 envelope_inward, envelope_outward (rad), attitude_wn,
                 lateral_wn, yaw_wn, z_wn, z_integrator, zeta
    [schedule]   kind plus the keys of that kind (see SCHEDULE_KEYS)

Floats are written with ``repr`` so a parsed scenario re-serializes to an
identical file.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aerodynamics import CalibrationError, calibrate_hover
from .control import (DEFAULT_ENVELOPE, PoleTargets, Target, build_autopilot, id_preset,
                      synthesize_gains)
from .dynamics import AirflowField, DivergenceError, Disturbance, FlightLog, SimulationSetup, simulate
from .linearization import extract_constants
from .morphology import DesignError, DesignParams, build_design

OUTPUT_ENV = "MORPHSOAR_OUTPUT_DIR"
PRESETS = ("pole-placement", "id-1", "id-2")
SCHEDULE_KEYS = {
    "hover": ("position",),
    "yaw_step": ("position", "step_time", "yaw_from", "yaw_to"),
    "yaw_sine": ("position", "amplitude", "frequency"),
    "z_sine": ("position", "amplitude", "frequency"),
    "y_square": ("position", "amplitude", "period"),
    "crosswind": ("position", "start", "stop", "wind"),
    "push": ("position", "times", "impulse"),
}
SCHEDULE_DEFAULTS = {
    "position": (0.0, 0.0, 0.0), "step_time": 1.0, "yaw_from": 0.0, "yaw_to": math.radians(110.0),
    "amplitude": math.pi / 2, "frequency": 0.1, "period": 4.0, "start": 5.0, "stop": 10.0,
    "wind": (0.0, 1.0, 0.0), "times": (5.0,), "impulse": (0.0, 0.02, 0.0),
}
VECTOR_KEYS = {"position", "wind", "times", "impulse", "crosswind"}


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario (maps to CLI exit code 2)."""


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _vec(text, n=None):
    try:
        vals = tuple(float(x) for x in str(text).replace(",", " ").split())
    except ValueError as exc:
        raise ScenarioError(f"bad number list {text!r}") from exc
    if n is not None and len(vals) != n:
        raise ScenarioError(f"expected {n} numbers, got {text!r}")
    return vals


def _float(text, key):
    try:
        return float(text)
    except ValueError as exc:
        raise ScenarioError(f"{key}: not a number: {text!r}") from exc


@dataclass(frozen=True)
class Schedule:
    kind: str = "hover"
    params: tuple = ()  # sorted (key, value) pairs

    def __post_init__(self):
        if self.kind not in SCHEDULE_KEYS:
            raise ScenarioError(f"unknown schedule kind {self.kind!r}")
        allowed = SCHEDULE_KEYS[self.kind]
        p = dict(self.params)
        extra = set(p) - set(allowed)
        if extra:
            raise ScenarioError(f"schedule {self.kind}: unexpected keys {sorted(extra)}")
        full = {k: p.get(k, SCHEDULE_DEFAULTS[k]) for k in allowed}
        if len(full["position"]) != 3:
            raise ScenarioError("position needs three coordinates")
        if "frequency" in full and not full["frequency"] > 0.0:
            raise ScenarioError("frequency must be positive")
        if "period" in full and not full["period"] > 0.0:
            raise ScenarioError("period must be positive")
        if self.kind == "crosswind":
            if not full["stop"] > full["start"] >= 0.0:
                raise ScenarioError("crosswind window needs 0 <= start < stop")
            if len(full["wind"]) != 3:
                raise ScenarioError("wind needs three components")
        if self.kind == "push" and len(full["impulse"]) != 3:
            raise ScenarioError("impulse needs three components")
        object.__setattr__(self, "params", tuple(sorted(full.items())))

    def get(self, key):
        return dict(self.params)[key]

    def target(self, t):
        """Reference at time ``t`` (s)."""
        p = dict(self.params)
        pos = np.array(p["position"], dtype=float)
        yaw = yaw_rate = 0.0
        if self.kind == "yaw_step":
            yaw = p["yaw_to"] if t >= p["step_time"] else p["yaw_from"]
        elif self.kind == "yaw_sine":
            w = 2.0 * math.pi * p["frequency"]
            yaw = p["amplitude"] * math.sin(w * t)
            yaw_rate = p["amplitude"] * w * math.cos(w * t)
        elif self.kind == "z_sine":
            pos[2] += p["amplitude"] * math.sin(2.0 * math.pi * p["frequency"] * t)
        elif self.kind == "y_square":
            half = 0.5 * p["period"]
            pos[1] += p["amplitude"] * (1.0 if int(t // half) % 2 == 0 else -1.0)
        return Target(pos, yaw, yaw_rate)


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    duration: float = 30.0
    seed: int = 0
    design: tuple = ()  # sorted DesignParams overrides
    v_air: float = 10.0
    turbulence: float = 0.05
    correlation_time: float = 0.2
    crosswind: tuple = (0.0, 0.0, 0.0)
    preset: str = "pole-placement"
    delay_compensation: bool = True
    envelope_inward: float = DEFAULT_ENVELOPE[0]
    envelope_outward: float = DEFAULT_ENVELOPE[1]
    poles: tuple = ()  # sorted PoleTargets overrides
    schedule: Schedule = Schedule()

    def __post_init__(self):
        if not self.duration > 0.0:
            raise ScenarioError("duration must be positive")
        if self.preset not in PRESETS:
            raise ScenarioError(f"unknown controller preset {self.preset!r}")
        if not self.v_air > 0.0:
            raise ScenarioError("v_air must be positive")
        if not 0.0 <= self.turbulence <= 0.5:
            raise ScenarioError("turbulence must lie in [0, 0.5]")
        names = {f.name for f in dataclasses.fields(DesignParams)}
        bad = {k for k, _ in self.design} - names
        if bad:
            raise ScenarioError(f"unknown design keys {sorted(bad)}")
        pnames = {f.name for f in dataclasses.fields(PoleTargets)}
        bad = {k for k, _ in self.poles} - pnames
        if bad:
            raise ScenarioError(f"unknown pole targets {sorted(bad)}")
        object.__setattr__(self, "design", tuple(sorted(self.design)))
        object.__setattr__(self, "poles", tuple(sorted(self.poles)))
        object.__setattr__(self, "crosswind", tuple(float(c) for c in self.crosswind))

    # ---- serialization
    def to_config(self):
        cfg = configparser.ConfigParser()
        cfg["scenario"] = {"name": self.name, "duration": _fmt(self.duration), "seed": str(self.seed)}
        cfg["design"] = {k: _fmt(v) for k, v in self.design}
        cfg["field"] = {"v_air": _fmt(self.v_air), "turbulence": _fmt(self.turbulence),
                        "correlation_time": _fmt(self.correlation_time),
                        "crosswind": _fmt(self.crosswind)}
        ctl = {"preset": self.preset, "delay_compensation": _fmt(self.delay_compensation),
               "envelope_inward": _fmt(self.envelope_inward),
               "envelope_outward": _fmt(self.envelope_outward)}
        ctl.update({k: _fmt(v) for k, v in self.poles})
        cfg["controller"] = ctl
        sched = {"kind": self.schedule.kind}
        sched.update({k: _fmt(tuple(v) if k in VECTOR_KEYS else v) for k, v in self.schedule.params})
        cfg["schedule"] = sched
        buf = io.StringIO()
        cfg.write(buf)
        return buf.getvalue()

    @classmethod
    def from_config(cls, text):
        cfg = configparser.ConfigParser()
        try:
            cfg.read_string(text)
        except configparser.Error as exc:
            raise ScenarioError(f"unreadable scenario: {exc}") from exc
        known = {"scenario", "design", "field", "controller", "schedule"}
        extra = set(cfg.sections()) - known
        if extra:
            raise ScenarioError(f"unknown sections {sorted(extra)}")
        kw = {}
        s = cfg["scenario"] if "scenario" in cfg else {}
        if "name" in s:
            kw["name"] = s["name"]
        if "duration" in s:
            kw["duration"] = _float(s["duration"], "duration")
        if "seed" in s:
            try:
                kw["seed"] = int(s["seed"])
            except ValueError as exc:
                raise ScenarioError("seed must be an integer") from exc
        if "design" in cfg:
            kw["design"] = tuple((k, _float(v, k)) for k, v in cfg["design"].items())
        if "field" in cfg:
            f = cfg["field"]
            for k in ("v_air", "turbulence", "correlation_time"):
                if k in f:
                    kw[k] = _float(f[k], k)
            if "crosswind" in f:
                kw["crosswind"] = _vec(f["crosswind"], 3)
            extra = set(f) - {"v_air", "turbulence", "correlation_time", "crosswind"}
            if extra:
                raise ScenarioError(f"unknown field keys {sorted(extra)}")
        if "controller" in cfg:
            c = dict(cfg["controller"])
            if "preset" in c:
                kw["preset"] = c.pop("preset")
            if "delay_compensation" in c:
                try:
                    kw["delay_compensation"] = cfg["controller"].getboolean("delay_compensation")
                except ValueError as exc:
                    raise ScenarioError("delay_compensation must be a boolean") from exc
                c.pop("delay_compensation")
            for k in ("envelope_inward", "envelope_outward"):
                if k in c:
                    kw[k] = _float(c.pop(k), k)
            kw["poles"] = tuple((k, _float(v, k)) for k, v in c.items())
        if "schedule" in cfg:
            sc = dict(cfg["schedule"])
            kind = sc.pop("kind", "hover")
            params = []
            for k, v in sc.items():
                if k in VECTOR_KEYS:
                    params.append((k, _vec(v)))
                else:
                    params.append((k, _float(v, k)))
            kw["schedule"] = Schedule(kind, tuple(params))
        return cls(**kw)

    # ---- construction of simulation objects
    def design_params(self):
        return dataclasses.replace(DesignParams(), **dict(self.design))

    def pole_targets(self):
        return dataclasses.replace(PoleTargets(), **dict(self.poles))


def load_scenario(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from exc
    return Scenario.from_config(text)


class _CrosswindWindow:
    """Airflow field with an extra constant wind between two times."""

    def __init__(self, base: AirflowField, wind, start, stop):
        self.base = base
        self.wind = np.asarray(wind, dtype=float)
        self.start, self.stop = float(start), float(stop)

    def samples(self, times):
        t = np.atleast_1d(np.asarray(times, dtype=float))
        on = ((t >= self.start) & (t < self.stop)).astype(float)
        return self.base.samples(t) + on[:, None] * self.wind[None, :]

    def sample(self, position, time):
        return self.samples([time])[0]


@dataclass(frozen=True)
class Prepared:
    design: object
    constants: object
    gains: object


def prepare(scenario: Scenario) -> Prepared:
    """Calibrated design, its constants and the controller gains."""
    try:
        design = build_design(scenario.design_params())
        design, _ = calibrate_hover(design, scenario.v_air)
    except (DesignError, CalibrationError) as exc:
        raise ScenarioError(str(exc)) from exc
    constants = extract_constants(design, scenario.v_air)
    try:
        gains = synthesize_gains(constants, scenario.pole_targets())
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc
    if scenario.preset != "pole-placement":
        gains = id_preset(constants, int(scenario.preset[-1]), gains)
    return Prepared(design, constants, gains)


def simulate_scenario(scenario: Scenario, prepared: Prepared | None = None) -> FlightLog:
    """Run ``scenario``; raises :class:`DivergenceError` on divergence."""
    prep = prepared or prepare(scenario)
    envelope = (scenario.envelope_inward, scenario.envelope_outward)
    ap = build_autopilot(prep.design, prep.constants, prep.gains,
                         delay_compensation=scenario.delay_compensation, envelope=envelope)
    airflow = AirflowField(mean_vertical=scenario.v_air, crosswind=np.array(scenario.crosswind),
                           turbulence_intensity=scenario.turbulence,
                           turbulence_correlation_time=scenario.correlation_time,
                           rng_seed=scenario.seed)
    sched = scenario.schedule
    disturbances = ()
    if sched.kind == "crosswind":
        airflow = _CrosswindWindow(airflow, sched.get("wind"), sched.get("start"), sched.get("stop"))
    elif sched.kind == "push":
        disturbances = tuple(Disturbance.impulse(t, sched.get("impulse")) for t in sched.get("times"))
    setup = SimulationSetup(prep.design, airflow, ap, sched.target, scenario.duration,
                            disturbances=disturbances, seed=scenario.seed)
    log = simulate(setup)
    log.meta.update(scenario=scenario.name, seed=scenario.seed)
    return log


# ------------------------------------------------------------------ metrics

@dataclass(frozen=True)
class MetricsReport:
    position_rmse: tuple
    attitude_rmse: tuple
    containment: float
    box: float
    settling_time: float | None = None
    settled: bool | None = None
    tracking: tuple = ()  # (frequency Hz, gain, phase rad, delay s)

    def __post_init__(self):
        if not 0.0 <= self.containment <= 1.0:
            raise ValueError("containment fraction outside [0, 1]")

    def as_rows(self):
        rows = [("rmse_x", self.position_rmse[0]), ("rmse_y", self.position_rmse[1]),
                ("rmse_z", self.position_rmse[2]), ("rmse_roll", self.attitude_rmse[0]),
                ("rmse_pitch", self.attitude_rmse[1]), ("rmse_yaw", self.attitude_rmse[2]),
                ("containment", self.containment), ("box", self.box)]
        if self.settled is not None:
            rows.append(("settled", float(self.settled)))
            rows.append(("settling_time", self.settling_time if self.settled else float("nan")))
        for f, g, ph, d in self.tracking:
            rows += [("gain", g), ("phase", ph), ("delay", d), ("frequency", f)]
        return rows

    def to_csv(self, path=None):
        text = "metric,value\n" + "".join(f"{k},{float(v)!r}\n" for k, v in self.as_rows())
        if path is not None:
            Path(path).write_text(text)
        return text


def settling_time(t, response, initial, final, band=0.05):
    """Time from ``t[0]`` to the last entry into ``final +- band*|final-initial|``.

    Returns ``(time, settled)``; ``settled`` is False when the response ends
    outside the band."""
    tol = band * abs(final - initial)
    inside = np.abs(np.asarray(response) - final) <= tol
    if not inside[-1]:
        return float(t[-1] - t[0]), False
    outside = np.nonzero(~inside)[0]
    if len(outside) == 0:
        return 0.0, True
    return float(t[outside[-1] + 1] - t[0]), True


def harmonic_response(t, reference, response, frequency):
    """Gain, phase (rad, negative for lag) and delay (s) of ``response``
    relative to ``reference`` at ``frequency`` (Hz), by projection onto a
    sine/cosine pair."""
    w = 2.0 * math.pi * frequency
    basis = np.column_stack((np.sin(w * t), np.cos(w * t), np.ones_like(t)))
    cr, *_ = np.linalg.lstsq(basis, reference, rcond=None)
    cy, *_ = np.linalg.lstsq(basis, response, rcond=None)
    zr = complex(cr[0], cr[1])
    zy = complex(cy[0], cy[1])
    ratio = zy / zr
    # sin basis: a sin + b cos = |z| sin(wt + arg(a + ib))
    phase = math.atan2(ratio.imag, ratio.real)
    return abs(ratio), phase, -phase / w


def compute_metrics(log: FlightLog, scenario: Scenario, box=0.20, skip=2.0) -> MetricsReport:
    D = log.data
    if len(D) == 0:
        raise ValueError("empty log")
    t = D[:, 0]
    if t[-1] - t[0] <= skip:
        raise ValueError("steady-state window is longer than the log")
    ss = t >= t[0] + skip
    err = log.data[:, 1:4] - log.data[:, 21:24]
    pos_rmse = tuple(float(v) for v in np.sqrt(np.mean(err[ss] ** 2, axis=0)))
    yaw_err = np.angle(np.exp(1j * (log.column("yaw") - log.column("yaw_t"))))
    att = np.column_stack((log.column("roll"), log.column("pitch"), yaw_err))
    att_rmse = tuple(float(v) for v in np.sqrt(np.mean(att[ss] ** 2, axis=0)))
    contained = float(np.mean(np.all(np.abs(err) <= 0.5 * box, axis=1)))

    sched = scenario.schedule
    settle = settled = None
    tracking = ()
    if sched.kind == "yaw_step":
        after = t >= sched.get("step_time")
        yaw = np.unwrap(log.column("yaw"))
        settle, settled = settling_time(t[after], yaw[after], sched.get("yaw_from"), sched.get("yaw_to"))
    elif sched.kind in ("yaw_sine", "z_sine"):
        f = sched.get("frequency")
        if sched.kind == "yaw_sine":
            ref, out = log.column("yaw_t")[ss], np.unwrap(log.column("yaw"))[ss]
        else:
            ref, out = log.column("z_t")[ss], log.column("z")[ss]
        g, ph, d = harmonic_response(t[ss], ref, out, f)
        tracking = ((f, g, ph, d),)
    return MetricsReport(pos_rmse, att_rmse, contained, box, settle, settled, tracking)


# ------------------------------------------------------------------ running

def output_dir(default="output"):
    return Path(os.environ.get(OUTPUT_ENV) or default)


@dataclass
class RunResult:
    scenario: Scenario
    log: FlightLog | None
    metrics: MetricsReport | None
    error: str | None = None
    diverged: bool = False


def run(scenario: Scenario) -> RunResult:
    try:
        log = simulate_scenario(scenario)
    except DivergenceError as exc:
        return RunResult(scenario, exc.log, None, str(exc), True)
    return RunResult(scenario, log, compute_metrics(log, scenario))


def run_scenario(config_path, out_dir=None):
    """Run one scenario file and write ``<name>.log.csv`` and
    ``<name>.metrics.csv``.  Returns ``(log path, metrics path, result)``;
    the metrics path is None after a divergence."""
    scenario = load_scenario(config_path)
    out = Path(out_dir) if out_dir is not None else output_dir()
    out.mkdir(parents=True, exist_ok=True)
    res = run(scenario)
    log_path = out / f"{scenario.name}.log.csv"
    if res.log is not None:
        res.log.to_csv(log_path)
    if res.diverged:
        return log_path, None, res
    metrics_path = out / f"{scenario.name}.metrics.csv"
    res.metrics.to_csv(metrics_path)
    return log_path, metrics_path, res


# -------------------------------------------------------------------- batch

@dataclass(frozen=True)
class BatchEntry:
    name: str
    config: Path
    repeats: int = 1


def trial_seed(base_seed, entry_index, repeat):
    """Seed of one trial; independent of scheduling and thread count."""
    return int(np.random.SeedSequence([base_seed, entry_index, repeat]).generate_state(1)[0])


def load_manifest(path):
    """``[batch]`` with ``base_seed`` and ``workers``, then one
    ``[run.<name>]`` section per entry with ``config`` (relative to the
    manifest) and ``repeats``."""
    path = Path(path)
    cfg = configparser.ConfigParser()
    try:
        cfg.read_string(path.read_text())
    except (OSError, configparser.Error) as exc:
        raise ScenarioError(f"unreadable manifest {path}: {exc}") from exc
    b = cfg["batch"] if "batch" in cfg else {}
    try:
        base_seed = int(b.get("base_seed", 0))
        workers = int(b.get("workers", 0)) or None
    except ValueError as exc:
        raise ScenarioError("base_seed and workers must be integers") from exc
    entries = []
    for sec in cfg.sections():
        if sec == "batch":
            continue
        if not sec.startswith("run."):
            raise ScenarioError(f"unknown manifest section {sec!r}")
        s = cfg[sec]
        if "config" not in s:
            raise ScenarioError(f"{sec}: missing config")
        try:
            reps = int(s.get("repeats", 1))
        except ValueError as exc:
            raise ScenarioError(f"{sec}: repeats must be an integer") from exc
        if reps < 1:
            raise ScenarioError(f"{sec}: repeats must be >= 1")
        entries.append(BatchEntry(sec[4:], path.parent / s["config"], reps))
    return entries, base_seed, workers


@dataclass
class BatchSummary:
    trials: list  # (entry, repeat, seed, RunResult)
    failures: list  # (entry, repeat, message)

    def table(self):
        """Per-entry mean and standard deviation of every metric."""
        by_entry = {}
        for entry, _, _, res in self.trials:
            if res.metrics is None:
                continue
            for k, v in res.metrics.as_rows():
                by_entry.setdefault(entry, {}).setdefault(k, []).append(float(v))
        rows = []
        for entry in sorted(by_entry):
            for k, vals in by_entry[entry].items():
                a = np.array(vals)
                rows.append((entry, k, len(a), float(np.mean(a)), float(np.std(a))))
        return rows

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["entry", "metric", "n", "mean", "std"])
        for entry, k, n, m, s in self.table():
            w.writerow([entry, k, n, repr(m), repr(s)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def batch(manifest_path, out_dir=None, workers=None) -> BatchSummary:
    """Run every entry of a manifest concurrently.  Failures (config errors
    and divergences) are collected; the batch always completes."""
    entries, base_seed, mf_workers = load_manifest(manifest_path)
    jobs = []
    failures = []
    for i, e in enumerate(entries):
        try:
            sc = load_scenario(e.config)
        except ScenarioError as exc:
            failures.append((e.name, None, str(exc)))
            continue
        for r in range(e.repeats):
            seed = trial_seed(base_seed, i, r)
            jobs.append((e.name, r, seed, dataclasses.replace(sc, seed=seed, name=f"{e.name}-{r}")))

    def one(job):
        name, r, seed, sc = job
        try:
            return run(sc)
        except ScenarioError as exc:
            return RunResult(sc, None, None, str(exc))

    with ThreadPoolExecutor(max_workers=workers or mf_workers) as pool:
        results = list(pool.map(one, jobs))
    trials = []
    for (name, r, seed, sc), res in zip(jobs, results):
        trials.append((name, r, seed, res))
        if res.error is not None:
            failures.append((name, r, res.error))
    summary = BatchSummary(trials, failures)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary.to_csv(out / "summary.csv")
        with open(out / "failures.csv", "w") as fh:
            fh.write("entry,repeat,message\n")
            for name, r, msg in failures:
                fh.write(f"{name},{'' if r is None else r},\"{msg}\"\n")
    return summary
