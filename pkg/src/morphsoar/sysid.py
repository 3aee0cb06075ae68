"""Frequency-domain identification of the roll channel from closed-loop
flight data.

Two flights with different roll-angle gains give two closed-loop estimates

    alpha_dd = b* alpha_d + c* alpha + d* y_d  (+ e* y)

and their difference isolates the input constant ``a``; the open-loop
constants follow as ``b = b* - a*b_bar`` and so on.  The optional ``e*``
regressor absorbs the lateral position term of the flight controller.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .control import AxisGains, ControllerGains, Target, build_autopilot, is_stabilizing, id_preset
from .dynamics import AirflowField, FlightLog, SimulationSetup, simulate
from .linearization import REFERENCE_CONSTANTS, DynamicsConstants

DEFAULT_BAND = (0.3, 30.0)
MIN_BINS = 20
MAX_CONDITION = 1e8

# Roll-channel regressors and the flight-log columns they come from.
ROLL_CHANNELS = {"alpha": "roll", "alphadot": "wx", "ydot": "vy", "y": "y", "wind_y": "air_y"}


class IdentificationError(ValueError):
    pass


class InsufficientExcitation(IdentificationError):
    pass


@dataclass
class SpectralSeries:
    """One-sided DFT of several channels, restricted to a frequency band."""

    omega: np.ndarray
    channels: dict
    band: tuple
    dt: float
    window: str | None
    duration: float

    def __getitem__(self, name):
        return self.channels[name]

    def __len__(self):
        return len(self.omega)


def _series(source, names):
    """Time vector and channel arrays from a FlightLog or a mapping."""
    if isinstance(source, FlightLog):
        t = source.column("t")
        data = {}
        for n in names:
            if n == "y":
                # the controller acts on the tracking error, so that is the
                # regressor that keeps reference excitation out of the residual
                data[n] = source.column("y") - source.column("y_t")
            else:
                data[n] = source.column(ROLL_CHANNELS.get(n, n))
    else:
        t = np.asarray(source["t"], dtype=float)
        data = {n: np.asarray(source[n], dtype=float) for n in names}
    return t, data


def to_spectrum(source, channels, band=DEFAULT_BAND, window="hann", min_duration=10.0):
    """DFT of ``channels`` after mean removal and optional Hann window,
    keeping bins with ``band[0] <= omega <= band[1]`` (rad/s)."""
    t, data = _series(source, channels)
    if len(t) < 2:
        raise IdentificationError("time series too short")
    dt = float(np.median(np.diff(t)))
    n = len(t)
    duration = n * dt
    if duration < min_duration - 1e-9:
        raise IdentificationError(f"record of {duration:.1f} s is shorter than {min_duration:.0f} s")
    nyquist = math.pi / dt
    lo, hi = band
    if not 0.0 <= lo < hi:
        raise IdentificationError("band must satisfy 0 <= low < high")
    if hi > nyquist:
        raise IdentificationError(f"band edge {hi:.1f} rad/s exceeds Nyquist {nyquist:.1f} rad/s")
    if window == "hann":
        win = np.hanning(n)
    elif window is None:
        win = np.ones(n)
    else:
        raise IdentificationError(f"unknown window {window!r}")
    omega = 2.0 * math.pi * np.fft.rfftfreq(n, dt)
    keep = (omega >= lo) & (omega <= hi) & (omega > 0.0)
    out = {}
    for name, x in data.items():
        X = np.fft.rfft((x - x.mean()) * win)
        out[name] = X[keep]
    return SpectralSeries(omega[keep], out, (lo, hi), dt, window, duration)


@dataclass(frozen=True)
class ClosedLoopEstimate:
    """Closed-loop roll constants with their standard errors."""

    b: float
    c: float
    d: float
    e: float = 0.0
    residual: float = 0.0
    stderr: tuple = (0.0, 0.0, 0.0, 0.0)
    band: tuple = DEFAULT_BAND
    n_bins: int = 0
    condition: float = 1.0
    wind: float = 0.0


def estimate_closed_loop(spectrum: SpectralSeries, with_position=None, min_bins=MIN_BINS,
                         max_condition=MAX_CONDITION, weighting=None) -> ClosedLoopEstimate:
    """Complex least squares of ``j*w*A_dot`` on ``[A_dot, A, Y_dot(, Y)]``.

    ``with_position`` defaults to whether a ``y`` channel is present.  A
    ``wind_y`` channel (measured lateral airflow) is used as an extra
    regressor when present; its coefficient estimates ``-d``.  With
    ``weighting="inverse_frequency"`` each bin's equation is divided by
    ``w`` so that noise amplified by the differentiation does not dominate
    the high end of the band; ``None`` gives ordinary least squares.
    """
    if len(spectrum) < min_bins:
        raise IdentificationError(f"only {len(spectrum)} frequency bins in band; need {min_bins}")
    if with_position is None:
        with_position = "y" in spectrum.channels
    w = spectrum.omega
    ad = spectrum["alphadot"]
    cols = [ad, spectrum["alpha"], spectrum["ydot"]]
    if with_position:
        cols.append(spectrum["y"])
    with_wind = "wind_y" in spectrum.channels
    if with_wind:
        cols.append(spectrum["wind_y"])
    Phi = np.column_stack(cols)
    lhs = 1j * w * ad
    if weighting == "inverse_frequency":
        Phi = Phi / w[:, None]
        lhs = lhs / w
    elif weighting is not None:
        raise IdentificationError(f"unknown weighting {weighting!r}")
    scale = np.linalg.norm(Phi, axis=0)
    if np.any(scale == 0.0):
        raise InsufficientExcitation("a regressor has no energy in the band")
    A = np.vstack((Phi.real, Phi.imag)) / scale
    y = np.concatenate((lhs.real, lhs.imag))
    cond = float(np.linalg.cond(A))
    if not math.isfinite(cond) or cond > max_condition:
        raise IdentificationError(f"regressor is rank deficient (condition number {cond:.3g})")
    theta, *_ = np.linalg.lstsq(A, y, rcond=None)
    r = y - A @ theta
    dof = max(len(y) - len(theta), 1)
    sigma2 = float(r @ r) / dof
    cov = sigma2 * np.linalg.inv(A.T @ A)
    theta = theta / scale
    se = np.sqrt(np.diag(cov)) / scale
    residual = float(np.linalg.norm(r) / max(np.linalg.norm(y), 1e-300))
    if not math.isfinite(residual):
        raise IdentificationError("non-finite residual")
    e = float(theta[3]) if with_position else 0.0
    wind = float(theta[-1]) if with_wind else 0.0
    se = [float(v) for v in se[:3]] + [float(se[3]) if with_position else 0.0]
    return ClosedLoopEstimate(float(theta[0]), float(theta[1]), float(theta[2]), e,
                              residual, tuple(se), spectrum.band, len(w), cond, wind)


def input_constant(c1, c2, cbar1, cbar2):
    """``a = (c1* - c2*) / (cbar1 - cbar2)``."""
    if abs(cbar1 - cbar2) < 1e-6:
        raise IdentificationError("variant gains are too close to difference")
    return (c1 - c2) / (cbar1 - cbar2)


@dataclass(frozen=True)
class InputConstantEstimate:
    a: float
    from_c: float
    from_b: float | None
    discrepancy: float | None


def _as_roll_gains(g):
    if isinstance(g, ControllerGains):
        g = g.roll
    if isinstance(g, AxisGains):
        return g.rate, g.angle, g.vel, g.pos
    g = tuple(float(v) for v in g)
    return g + (0.0,) * (4 - len(g))


def combine_input_constant(est1: ClosedLoopEstimate, est2: ClosedLoopEstimate, gains1, gains2):
    """Input constant from both the angle-gain and the rate-gain ratio,
    averaged with inverse-variance weights from the regression errors."""
    b1, c1, _, _ = _as_roll_gains(gains1)
    b2, c2, _, _ = _as_roll_gains(gains2)
    a_c = input_constant(est1.c, est2.c, c1, c2)
    var_c = (est1.stderr[1] ** 2 + est2.stderr[1] ** 2) / (c1 - c2) ** 2
    if abs(b1 - b2) < 1e-6:
        return InputConstantEstimate(a_c, a_c, None, None)
    a_b = (est1.b - est2.b) / (b1 - b2)
    var_b = (est1.stderr[0] ** 2 + est2.stderr[0] ** 2) / (b1 - b2) ** 2
    if var_b <= 0.0 or var_c <= 0.0:
        a = 0.5 * (a_b + a_c)
    else:
        a = (a_c / var_c + a_b / var_b) / (1.0 / var_c + 1.0 / var_b)
    return InputConstantEstimate(a, a_c, a_b, abs(a_b - a_c))


@dataclass(frozen=True)
class OpenLoopConstants:
    a: float
    b: float
    c: float
    d: float


def recover_open_loop(a, estimate: ClosedLoopEstimate, gains) -> OpenLoopConstants:
    """Remove the controller contribution: ``b = b* - a*b_bar`` etc."""
    bb, cb, db, _ = _as_roll_gains(gains)
    return OpenLoopConstants(a, estimate.b - a * bb, estimate.c - a * cb, estimate.d - a * db)


# ---------------------------------------------------------- synthetic plant

@dataclass(frozen=True)
class SyntheticPlant:
    """Roll/lateral plant ``alpha_dd = b alpha_d + c alpha + d y_d + a u``,
    ``y_dd = g_alpha alpha + g_u u + g_v y_d``."""

    a: float
    b: float
    c: float
    d: float
    g_alpha: float = -6.5
    g_u: float = -4.8
    g_v: float = -0.2

    def closed_loop(self, gains):
        bb, cb, db, eb = _as_roll_gains(gains)
        # state (alpha, alpha_d, y, y_d); u = bb*alpha_d + cb*alpha + db*y_d + eb*y
        K = np.array([cb, bb, eb, db])
        A = np.array([[0.0, 1.0, 0.0, 0.0],
                      [self.c, self.b, 0.0, self.d],
                      [0.0, 0.0, 0.0, 1.0],
                      [self.g_alpha, 0.0, 0.0, self.g_v]])
        B = np.array([0.0, self.a, 0.0, self.g_u])
        return A + np.outer(B, K), B


def multisine_response(plant: SyntheticPlant, gains, duration=60.0, dt=0.01, band=DEFAULT_BAND,
                       amplitude=0.05, noise=0.0, seed=0, disturbance_gain=(0.0, 1.0)):
    """Exact periodic steady state of the closed loop driven by a multisine
    (one component per DFT bin in ``band``, random phases) acting as a
    disturbance force, by default on the lateral channel only so that the
    roll equation itself carries no disturbance.  Measurement noise is
    ``noise`` times each channel's standard deviation.
    """
    A, _ = plant.closed_loop(gains)
    if np.any(np.linalg.eigvals(A).real >= 0.0):
        raise IdentificationError("synthetic closed loop is unstable")
    rng = np.random.default_rng(seed)
    n = int(round(duration / dt))
    t = np.arange(n) * dt
    omega = 2.0 * math.pi * np.fft.rfftfreq(n, dt)
    ks = np.nonzero((omega >= band[0]) & (omega <= band[1]))[0]
    phases = rng.uniform(0.0, 2.0 * math.pi, len(ks))
    E = np.array([0.0, disturbance_gain[0], 0.0, disturbance_gain[1]])
    X = np.zeros((4, n))
    for k, ph in zip(ks, phases):
        w = omega[k]
        resp = np.linalg.solve(1j * w * np.eye(4) - A, E) * amplitude * np.exp(1j * ph)
        X += np.real(resp[:, None] * np.exp(1j * w * t)[None, :])
    data = {"t": t, "alpha": X[0], "alphadot": X[1], "y": X[2], "ydot": X[3]}
    if noise > 0.0:
        for name in ("alpha", "alphadot", "y", "ydot"):
            data[name] = data[name] + noise * data[name].std() * rng.standard_normal(n)
    return data


@dataclass
class IdentificationResult:
    a: InputConstantEstimate
    open_loop: OpenLoopConstants
    estimates: tuple
    gains: tuple
    extras: dict = field(default_factory=dict)


def identify(sources, gains, band=DEFAULT_BAND, window="hann", with_position=None, with_wind=True):
    """Full two-variant pipeline on two records (FlightLogs or mappings).

    With ``with_wind`` the logged lateral airflow of a FlightLog enters as a
    regressor, which removes the gust torque from the equation error."""
    if len(sources) != 2 or len(gains) != 2:
        raise IdentificationError("identification needs exactly two variants")
    names = ["alpha", "alphadot", "ydot"]
    ests = []
    for src in sources:
        has_y = isinstance(src, FlightLog) or "y" in src
        use_y = has_y if with_position is None else with_position
        extra = ["y"] if use_y else []
        if with_wind and (isinstance(src, FlightLog) or "wind_y" in src):
            extra.append("wind_y")
        sp = to_spectrum(src, names + extra, band, window)
        ests.append(estimate_closed_loop(sp, use_y))
    a = combine_input_constant(ests[0], ests[1], gains[0], gains[1])
    ol = recover_open_loop(a.a, ests[0], gains[0])
    return IdentificationResult(a, ol, tuple(ests), tuple(gains))


# -------------------------------------------------------- robot experiments

# calm flight with default sensor noise jitters at about 0.06 deg roll RMS
EXCITATION_FLOOR = math.radians(0.15)


def reference_multisine(duration, amplitude=0.03, band=(0.3, 10.0), seed=0):
    """Lateral target offset: a multisine with random phases on the record's
    DFT bins inside ``band``, scaled to ``amplitude`` m RMS."""
    n = int(round(duration / 0.01))
    omega = 2.0 * math.pi * np.fft.rfftfreq(n, 0.01)
    ks = np.nonzero((omega >= band[0]) & (omega <= band[1]))[0]
    phases = np.random.default_rng([seed, 11]).uniform(0.0, 2.0 * math.pi, len(ks))
    w = omega[ks]
    norm = amplitude / math.sqrt(0.5 * len(ks)) if len(ks) else 0.0

    def offset(t):
        return norm * float(np.sum(np.cos(w * t + phases)))

    return offset


def run_id_experiment(design, gains_variant, duration=60.0, seed=0, constants: DynamicsConstants = None,
                      turbulence=0.05, v_air=10.0, gains: ControllerGains = None,
                      excitation_amplitude=0.0) -> FlightLog:
    """Hover flight with the identification gains of ``gains_variant`` (1 or
    2) under turbulence, optionally with a lateral multisine target offset of
    ``excitation_amplitude`` m RMS.  ``log.meta['excitation']`` holds the
    roll RMS and ``log.meta['sufficient']`` whether it clears the floor."""
    if constants is None:
        from .linearization import extract_constants
        constants = extract_constants(design, v_air)
    g = gains if gains is not None else id_preset(constants, gains_variant)
    if not is_stabilizing(constants, g):
        raise IdentificationError(f"variant {gains_variant} gains do not stabilize the linear model")
    ap = build_autopilot(design, constants, g)
    air = AirflowField(mean_vertical=v_air, turbulence_intensity=turbulence, rng_seed=seed)
    if excitation_amplitude > 0.0:
        ref = reference_multisine(duration, excitation_amplitude, seed=seed)

        def targets(t):
            return Target(np.array([0.0, ref(t), 0.0]))
    else:
        hover = Target()

        def targets(t):
            return hover
    log = simulate(SimulationSetup(design, air, ap, targets, duration, seed=seed))
    roll = log.column("roll")
    rms = float(np.sqrt(np.mean((roll - roll.mean()) ** 2)))
    log.meta.update({"gains": g.to_mapping(), "variant": gains_variant, "excitation": rms,
                     "sufficient": rms >= EXCITATION_FLOOR})
    return log


def identify_robot(design, constants: DynamicsConstants, duration=60.0, seed=0, turbulence=0.05,
                   band=DEFAULT_BAND, v_air=10.0, excitation_amplitude=0.0):
    """Run both variant flights concurrently and identify the roll channel."""
    gains = (id_preset(constants, 1), id_preset(constants, 2))
    with ThreadPoolExecutor(max_workers=2) as pool:
        futures = [pool.submit(run_id_experiment, design, v, duration, seed, constants, turbulence,
                               v_air, g, excitation_amplitude) for v, g in zip((1, 2), gains)]
        logs = [f.result() for f in futures]
    for log in logs:
        if not log.meta["sufficient"]:
            raise InsufficientExcitation(
                f"roll excitation {math.degrees(log.meta['excitation']):.3f} deg is too small")
    res = identify(logs, gains, band)
    res.extras["logs"] = logs
    return res


def report_csv(result: IdentificationResult, reference: DynamicsConstants = None):
    """Constants report: name, identified value, model value, reference value."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["constant", "identified", "model", "reference"])
    ol = result.open_loop
    rows = [("f_alpha_u1", ol.a), ("f_alpha_alphadot", ol.b), ("f_alpha_alpha", ol.c), ("f_alpha_ydot", ol.d)]
    for name, val in rows:
        model = getattr(reference, name) if reference is not None else ""
        w.writerow([name, repr(float(val)), repr(float(model)) if model != "" else "",
                    REFERENCE_CONSTANTS.get(name, "") if isinstance(REFERENCE_CONSTANTS, dict) else getattr(REFERENCE_CONSTANTS, name, "")])
    for i, est in enumerate(result.estimates, 1):
        w.writerow([f"closed_loop_{i}", f"b={est.b!r};c={est.c!r};d={est.d!r};e={est.e!r}",
                    f"residual={est.residual!r}", f"band={est.band[0]}-{est.band[1]} rad/s"])
    w.writerow(["a_from_c", repr(result.a.from_c), "", ""])
    w.writerow(["a_from_b", "" if result.a.from_b is None else repr(result.a.from_b), "", ""])
    return buf.getvalue()
