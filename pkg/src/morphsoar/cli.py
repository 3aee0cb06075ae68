"""Command line entry point (``morphsoar``).

Exit codes: 0 success, 2 config error, 3 divergence, 4 partial batch
failure.  Output files go to ``$MORPHSOAR_OUTPUT_DIR`` (default
``./output``).
"""

from __future__ import annotations

import argparse
import configparser
import math
import sys
from pathlib import Path

import numpy as np

from . import design_studio as ds
from .aerodynamics import CalibrationError, calibrate_hover
from .harness import ScenarioError, batch, output_dir, run_scenario
from .linearization import extract_constants
from .morphology import DesignError, DesignParams, build_design

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_PARTIAL = 0, 2, 3, 4
SWEEP_DEFAULTS = {"kink": (0.0, math.radians(60.0), math.radians(2.5)),
                  "hover": (math.radians(10.0), math.radians(44.0), math.radians(2.0))}


class ConfigError(ValueError):
    pass


def _read_ini(path):
    cfg = configparser.ConfigParser()
    try:
        cfg.read_string(Path(path).read_text())
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return cfg


def _design_from(cfg):
    try:
        params = DesignParams.from_mapping(dict(cfg["design"])) if "design" in cfg else DesignParams()
        return build_design(params)
    except (DesignError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _section(cfg, name, defaults):
    sec = dict(cfg[name]) if name in cfg else {}
    extra = set(sec) - set(defaults)
    if extra:
        raise ConfigError(f"[{name}]: unknown keys {sorted(extra)}")
    out = dict(defaults)
    for k, v in sec.items():
        try:
            out[k] = type(defaults[k])(float(v)) if not isinstance(defaults[k], str) else v
        except ValueError as exc:
            raise ConfigError(f"[{name}] {k}: bad value {v!r}") from exc
    return out


def _calibrated(design, v_air):
    try:
        return calibrate_hover(design, v_air)[0]
    except CalibrationError as exc:
        raise ConfigError(str(exc)) from exc


def _out(args):
    out = output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args):
    log_path, metrics_path, res = run_scenario(args.config, _out(args))
    if res.diverged:
        print(f"diverged: {res.error}; partial log {log_path}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"log {log_path}\nmetrics {metrics_path}")
    for k, v in res.metrics.as_rows():
        print(f"{k} {v:.6g}")
    return EXIT_OK


def cmd_batch(args):
    summary = batch(args.manifest, _out(args), workers=args.workers)
    print(summary.to_csv(), end="")
    for name, r, msg in summary.failures:
        print(f"failed {name}[{r}]: {msg}", file=sys.stderr)
    return EXIT_PARTIAL if summary.failures else EXIT_OK


def cmd_sweep(args):
    cfg = _read_ini(args.config)
    start, stop, step = SWEEP_DEFAULTS[args.kind]
    opts = _section(cfg, "sweep", {"start": start, "stop": stop, "step": step, "v_air": 10.0,
                                   "margin": ds.DEFAULT_MARGIN})
    if not opts["step"] > 0.0 or opts["stop"] < opts["start"]:
        raise ConfigError("sweep needs start <= stop and step > 0")
    grid = np.arange(opts["start"], opts["stop"] + 0.5 * opts["step"], opts["step"])
    design = _design_from(cfg)
    try:
        if args.kind == "kink":
            res = ds.sweep_kink(design, grid, opts["v_air"], opts["margin"])
        else:
            res = ds.sweep_hover_angle(design, grid, opts["v_air"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    path = _out(args) / f"sweep_{args.kind}.csv"
    res.to_csv(path)
    opt = "none" if res.optimum is None else f"{math.degrees(res.optimum):.2f} deg"
    print(f"{res.parameter}: optimum {opt} ({res.rule})\ncsv {path}")
    return EXIT_OK


def cmd_sysid(args):
    from . import sysid
    cfg = _read_ini(args.config)
    opts = _section(cfg, "sysid", {"v_air": 10.0, "duration": 60.0, "seed": 0, "turbulence": 0.05,
                                   "excitation": 0.0, "band_low": sysid.DEFAULT_BAND[0],
                                   "band_high": sysid.DEFAULT_BAND[1]})
    design = _calibrated(_design_from(cfg), opts["v_air"])
    constants = extract_constants(design, opts["v_air"])
    try:
        res = sysid.identify_robot(design, constants, opts["duration"], opts["seed"], opts["turbulence"],
                                   (opts["band_low"], opts["band_high"]), opts["v_air"],
                                   opts["excitation"])
    except sysid.IdentificationError as exc:
        print(f"identification failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    path = _out(args) / "sysid.csv"
    text = sysid.report_csv(res, constants)
    path.write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_constants(args):
    cfg = _read_ini(args.design)
    design = _calibrated(_design_from(cfg), args.v_air)
    text = extract_constants(design, args.v_air).to_csv()
    (_out(args) / "constants.csv").write_text(text)
    print(f"cd_perp,{float(design.cd_perp)!r}")
    print(text, end="")
    return EXIT_OK


def cmd_spc(args):
    try:
        p, s = ds.specific_power(args.energy_wh, args.time_h, args.mass_kg, args.power_w)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"hover_power_w {p:.4g}\nspecific_power_w_per_kg {s:.3g}")
    return EXIT_OK


def cmd_scale(args):
    design = _design_from(_read_ini(args.design)) if args.design else build_design()
    design = _calibrated(design, args.v_air)
    try:
        rep = ds.scale_analysis(design, args.factor, args.mass, args.v_air)
    except (ValueError, CalibrationError) as exc:
        raise ConfigError(str(exc)) from exc
    for k in ("factor", "mass", "v_air", "reynolds", "linear_agility", "angular_agility",
              "linear_ratio", "angular_ratio"):
        print(f"{k} {getattr(rep, k):.6g}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="morphsoar", description="Morphing drag-flyer simulation toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one scenario file")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)
    b = sub.add_parser("batch", help="run a batch manifest")
    b.add_argument("manifest")
    b.add_argument("--workers", type=int, default=None)
    b.set_defaults(func=cmd_batch)
    s = sub.add_parser("sweep", help="kink-angle or hover-angle sweep")
    s.add_argument("kind", choices=("kink", "hover"))
    s.add_argument("config")
    s.set_defaults(func=cmd_sweep)
    i = sub.add_parser("sysid", help="two-variant roll identification on the simulator")
    i.add_argument("config")
    i.set_defaults(func=cmd_sysid)
    c = sub.add_parser("constants", help="dynamics constants of a design file")
    c.add_argument("design")
    c.add_argument("--v-air", type=float, default=10.0)
    c.set_defaults(func=cmd_constants)
    e = sub.add_parser("spc", help="specific power consumption")
    e.add_argument("--energy-wh", type=float)
    e.add_argument("--time-h", type=float)
    e.add_argument("--mass-kg", type=float, required=True)
    e.add_argument("--power-w", type=float)
    e.set_defaults(func=cmd_spc)
    k = sub.add_parser("scale", help="scaling-law report")
    k.add_argument("--factor", type=float, required=True)
    k.add_argument("--mass", type=float, required=True)
    k.add_argument("--design", default=None)
    k.add_argument("--v-air", type=float, default=10.0)
    k.set_defaults(func=cmd_scale)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, ScenarioError, DesignError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
