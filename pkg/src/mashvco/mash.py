"""Single-stage, single-ended MASH and cross-coupled MASH VCO ADC simulation."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import signalcore as sc
from .readout import MetastabilityModel, PulseWidthErrors, error_pulses, gradient_pw_errors
from .vcomodel import (
    InnerGrid,
    TuningCurve,
    crossings,
    integrate_count,
    max_frequency_check,
    phase_of,
    stage1_curve,
    stage2_curve,
)

log = logging.getLogger(__name__)

ARCHITECTURES = ("single_stage", "mash_se", "mash_cc")
SWEEP_PARAMS = ("n_phi1", "g_rel_mismatch", "pw_max_skew", "amplitude", "f_in")

N_WARMUP = 16


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Tone:
    amp: float
    freq: float
    phase: float = 0.0


@dataclass(frozen=True)
class SimConfig:
    """Complete parameterization of one simulation run.

    Defaults are the nominal design (fs = 3.5 GHz, OSR 16, 32 phases per
    stage) with no stimulus; :func:`nominal_config` adds the standard tone.
    """

    fs: float = 3.5e9
    osr: int = 16
    n_phi1: int = 32
    n_phi2: int = 32
    curve1: TuningCurve = field(default_factory=stage1_curve)
    curve2: TuningCurve = field(default_factory=stage2_curve)
    architecture: str = "mash_cc"
    differential_stage1: bool = False
    stimulus: tuple[Tone, ...] = ()
    n_samples: int = 131072
    pw_errors: PulseWidthErrors = field(default_factory=PulseWidthErrors)
    metastability: MetastabilityModel = field(default_factory=MetastabilityModel)
    thermal_snr_target_db: float | None = None
    seed: int = 0
    grid: InnerGrid = field(default_factory=InnerGrid)
    g_scale: float = 1.0
    dyn_tau: float = 0.0
    dyn_poly: tuple[float, ...] = ()
    full_scale_vpp: float = 0.9

    @property
    def differential(self) -> bool:
        return self.architecture == "mash_cc" or self.differential_stage1

    @property
    def ts(self) -> float:
        return 1.0 / self.fs

    def validate(self) -> "SimConfig":
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}")
        if not self.fs > 0:
            raise ConfigError("fs must be positive")
        if self.osr < 2 or self.osr & (self.osr - 1):
            raise ConfigError("osr must be a power of two >= 2")
        if self.n_phi1 < 1 or self.n_phi2 < 1:
            raise ConfigError("phase counts must be >= 1")
        if self.n_samples < 16:
            raise ConfigError("n_samples too small")
        for name, curve in (("curve1", self.curve1), ("curve2", self.curve2)):
            chk = max_frequency_check(curve, self.fs)
            if not chk.passed:
                raise ConfigError(
                    f"{name}: frequency range [{curve.f_min:.4g}, {chk.f_max:.4g}] Hz "
                    f"violates (0, fs/2={chk.limit:.4g})"
                )
        if self.curve2.input_range != (0.0, float(self.n_phi1)):
            raise ConfigError("curve2 input range must be [0, n_phi1]")
        for tone in self.stimulus:
            if not 0 < tone.freq < self.fs / 2:
                raise ConfigError("stimulus tone outside (0, fs/2)")
        self.pw_errors.validate(self.ts)
        if self.pw_errors.tr or self.pw_errors.tf:
            self.pw_errors.arrays(self.n_phi1)
        return self

    def full_scale_counts(self) -> float:
        """Output amplitude (counts) of a full-scale sine at nominal gain."""
        a = 2 * self.n_phi1 * self.curve1.gain_k * self.full_scale_vpp / 2 / self.fs
        return 2 * a if self.differential else a


def nominal_config(architecture: str = "mash_cc", **overrides) -> SimConfig:
    """Nominal design with a coherent 750 mVpp tone near 31.25 MHz."""
    fs = overrides.pop("fs", 3.5e9)
    n = overrides.pop("n_samples", 131072)
    n_phi1 = overrides.pop("n_phi1", 32)
    f_in = sc.coherent_bin_frequency(31.25e6, fs, n)
    cfg = SimConfig(
        fs=fs,
        n_samples=n,
        n_phi1=n_phi1,
        architecture=architecture,
        curve2=stage2_curve(0.9e9, 1.57e9, n_phi1),
        stimulus=(Tone(0.375, f_in, 0.0),),
    )
    return replace(cfg, **overrides)


@dataclass(frozen=True)
class NcfGain:
    g: float

    def __post_init__(self):
        if not self.g > 0:
            raise ValueError("NCF gain must be positive")


def g_opt(config: SimConfig) -> NcfGain:
    """``fs / (2 * n_phi2 * K2)`` with ``K2 = f_range2 / n_phi1``."""
    k2 = config.curve2.f_range / config.n_phi1
    return NcfGain(config.fs / (2 * config.n_phi2 * k2))


def ncf_combine(d1, d2, g, d2_prev: float | None = None) -> np.ndarray:
    """``d[k] = d1[k] + g * (d2[k] - d2[k-1])``.

    ``d2[-1]`` is taken as ``d2_prev`` when given, else ``d2[0]``.
    """
    g = g.g if isinstance(g, NcfGain) else float(g)
    d1 = np.asarray(d1, dtype=float)
    d2 = np.asarray(d2, dtype=float)
    if d1.shape != d2.shape:
        raise ValueError("d1 and d2 must have equal length")
    prev = d2[0] if d2_prev is None else d2_prev
    diff = np.diff(d2, prepend=prev)
    return d1 + g * diff


@dataclass
class SimResult:
    d1: sc.SampleStream
    d2: sc.SampleStream
    d: sc.SampleStream
    g_used: float
    config: SimConfig
    diagnostics: dict = field(default_factory=dict)
    e_trace: np.ndarray | None = None


# --------------------------------------------------------------------------
# stimulus


def _stimulus(config: SimConfig, t):
    v = np.zeros_like(t)
    for tone in config.stimulus:
        v += tone.amp * np.sin(2 * np.pi * tone.freq * t + tone.phase)
    return v


def _stimulus_rate(config: SimConfig, t):
    v = np.zeros_like(t)
    for tone in config.stimulus:
        w = 2 * np.pi * tone.freq
        v += tone.amp * w * np.cos(w * t + tone.phase)
    return v


def _thermal_sigma(config: SimConfig, rng_seed) -> float:
    """Input-referred noise sigma (V) giving the target SNR for a full-scale tone."""
    target = config.thermal_snr_target_db
    # referenced to a full-scale tone, so the noise floor does not follow the
    # stimulus level; same length as the run so the tone stays coherent
    if not config.stimulus:
        raise ConfigError("thermal noise target needs a stimulus tone")
    ref = Tone(config.curve1.half, config.stimulus[0].freq)
    probe = replace(config, thermal_snr_target_db=None, stimulus=(ref,))
    sigma = 1e-4
    snr = None
    for _ in range(8):
        snr = _stage1_unquantized_snr(probe, sigma, rng_seed)
        if abs(snr - target) <= 0.1:
            break
        sigma *= 10 ** ((snr - target) / 20)
    log.debug("thermal sigma %.3g V gives %.2f dB", sigma, snr)
    if config.differential:
        # two independent channels: signal doubles, noise grows by sqrt(2)
        sigma *= np.sqrt(2.0)
    return sigma


def _stage1_unquantized_snr(config: SimConfig, sigma: float, rng_seed) -> float:
    rng = np.random.default_rng(rng_seed)
    ts, n = config.ts, config.n_samples
    tk = np.arange(n) * ts
    x = config.curve1.mid + _stimulus(config, tk) + sigma * rng.standard_normal(n)
    dphi = 2 * config.n_phi1 * config.curve1.frequency(x) * ts
    stream = sc.SampleStream(dphi, config.fs, "probe")
    spec = sc.spectrum(stream, n, 1, "hann")
    f_sig = config.stimulus[0].freq
    return sc.metrics(spec, f_sig, config.osr, 5).snr_db


# --------------------------------------------------------------------------
# stage 1


@dataclass
class _Stage1:
    counts: np.ndarray  # count coordinate at clock edges k = 0..n_total
    toggle_t: np.ndarray
    toggle_k: np.ndarray  # clock index closing the toggle's period
    phase: np.ndarray
    n_clamped: int


def _run_stage1(config: SimConfig, sign: float, c0: float, noise, n_total: int) -> _Stage1:
    P = config.grid.points_per_sample
    ts = config.ts
    h = ts / P
    curve = config.curve1
    j = np.arange(n_total * P + 1)
    t = j * h
    # each cell is integrated with its own sample's held noise value, so the
    # drive may jump at clock edges without smearing across them
    held = np.zeros(n_total * P) if noise is None else np.repeat(noise, P)
    sig = sign * _stimulus(config, t)
    sig_mid = sign * _stimulus(config, t[:-1] + h / 2)
    x_l = curve.mid + sig[:-1] + sign * held
    x_r = curve.mid + sig[1:] + sign * held
    x_m = curve.mid + sig_mid + sign * held
    lo, hi = curve.input_range
    n_clamped = int(np.count_nonzero((x_l < lo) | (x_l > hi)))
    f_l, f_m, f_r = curve.frequency(x_l), curve.frequency(x_m), curve.frequency(x_r)
    f_grid = np.append(f_l, f_r[-1])
    c = integrate_count(t, f_grid, c0, config.n_phi1, f_mid=f_m, f_right=f_r)
    k2 = 2.0 * config.n_phi1
    slope_l, slope_r = k2 * f_l, k2 * f_r
    if config.dyn_tau and config.dyn_poly:
        # dynamic term follows the stimulus; the thermal contribution is negligible
        u = sig / curve.half
        du = sign * _stimulus_rate(config, t) / curve.half
        poly = np.polynomial.Polynomial(config.dyn_poly)
        scale = k2 * curve.gain_k * curve.half * config.dyn_tau
        pdyn = poly(u)
        c = c + scale * (pdyn - pdyn[0])
        rate = scale * poly.deriv()(u) * du
        slope_l = slope_l + rate[:-1]
        slope_r = slope_r + rate[1:]
        if np.any(np.diff(c) < 0) or np.any(slope_l < 0) or np.any(slope_r < 0):
            raise ConfigError("dynamic nonlinearity makes the phase run backwards")
    times, values, cell = crossings(t, c, config.n_phi1, slope=(slope_l, slope_r))
    return _Stage1(
        counts=c[::P].copy(),
        toggle_t=times,
        toggle_k=cell // P + 1,
        phase=phase_of(values, config.n_phi1),
        n_clamped=n_clamped,
    )


def _counts_to_samples(counts):
    fl = np.floor(counts)
    return np.diff(fl)


# --------------------------------------------------------------------------
# stage 2


def _stage2_counts(curve2: TuningCurve, n_phi2: int, ts: float, n_total: int, base: float,
                   ev_t, ev_d, c0: float):
    """Integrate stage-2 phase exactly for a piecewise-constant drive.

    ``ev_t``/``ev_d`` list the drive steps; ``base`` is the level before any
    step. Returns the count coordinate at every clock edge, the drive range
    and the mean drive level over each clock period.
    """
    clock = np.arange(n_total + 1) * ts
    t = np.concatenate((ev_t, clock))
    d = np.concatenate((ev_d, np.zeros(clock.size)))
    is_clock = np.concatenate((np.zeros(ev_t.size, dtype=bool), np.ones(clock.size, dtype=bool)))
    order = np.argsort(t, kind="stable")
    t, d, is_clock = t[order], d[order], is_clock[order]
    level = base + np.cumsum(d)
    f = curve2.frequency(level)
    contrib = f[:-1] * np.diff(t)
    pos = np.flatnonzero(is_clock)
    per_period = np.add.reduceat(contrib, pos[:-1]) if contrib.size else np.zeros(n_total)
    # events after the final clock edge fall outside the run
    per_period = per_period[:n_total]
    counts = np.empty(n_total + 1)
    counts[0] = c0
    counts[1:] = c0 + 2 * n_phi2 * np.cumsum(per_period)
    lvl_area = np.add.reduceat(level[:-1] * np.diff(t), pos[:-1])[:n_total] / ts
    return counts, (float(level.min()), float(level.max())), lvl_area


# --------------------------------------------------------------------------


def simulate(config: SimConfig, g: float | None = None, keep_e_trace: bool = False) -> SimResult:
    """Full time-domain run of the configured architecture.

    ``keep_e_trace`` stores the mean stage-2 drive level of every clock period.
    """
    config.validate()
    n = config.n_samples
    n_total = N_WARMUP + n + 1
    ts = config.ts
    ss = np.random.SeedSequence(config.seed)
    s_phase1, s_phase2, s_noise = ss.spawn(3)
    rng1 = np.random.default_rng(s_phase1)
    rng2 = np.random.default_rng(s_phase2)

    noise_p = noise_m = None
    sigma = 0.0
    if config.thermal_snr_target_db is not None:
        sigma = _thermal_sigma(config, s_noise.spawn(1)[0])
        rn = np.random.default_rng(s_noise)
        noise_p = sigma * rn.standard_normal(n_total)
        noise_m = sigma * rn.standard_normal(n_total)

    n_phi1 = config.n_phi1
    channels = [_run_stage1(config, 1.0, rng1.uniform() * 2 * n_phi1, noise_p, n_total)]
    if config.differential:
        # the negative channel has its own noise source (independent resistor)
        ch_m = _run_stage1(config, -1.0, rng1.uniform() * 2 * n_phi1, noise_m, n_total)
        channels.append(ch_m)

    d1_full = _counts_to_samples(channels[0].counts)
    if config.differential:
        d1_full = d1_full - _counts_to_samples(channels[1].counts)

    g_used = g_opt(config).g * config.g_scale if g is None else float(g)
    diag = {"n_clamped_stage1": sum(ch.n_clamped for ch in channels), "thermal_sigma_v": sigma}

    d2_full = np.zeros_like(d1_full)
    e_trace = None
    if config.architecture != "single_stage":
        pulses = [
            error_pulses(ch.toggle_t, ch.phase, ch.toggle_k * ts, config.pw_errors,
                         config.metastability, ts, n_phi1)
            for ch in channels
        ]
        c2_init = rng2.uniform(size=2) * 2 * config.n_phi2
        if config.architecture == "mash_se":
            p = pulses[0]
            ev_t = np.concatenate((p.rise, p.fall))
            ev_d = np.concatenate((np.ones(p.rise.size), -np.ones(p.fall.size)))
            c2, rng_e, lvl = _stage2_counts(config.curve2, config.n_phi2, ts, n_total, 0.0,
                                            ev_t, ev_d, c2_init[0])
            d2_full = _counts_to_samples(c2)
            diag["stage2_drive_range"] = rng_e
            if keep_e_trace:
                e_trace = lvl[N_WARMUP:N_WARMUP + n]
        else:
            pp, pm = pulses
            half = 0.5
            # current-steering: E_i,+ and not(E_i,-) feed the positive channel
            ev_t_p = np.concatenate((pp.rise, pp.fall, pm.bar_fall, pm.bar_rise))
            ev_d_p = np.concatenate((np.full(pp.rise.size, half), np.full(pp.fall.size, -half),
                                     np.full(pm.bar_fall.size, -half), np.full(pm.bar_rise.size, half)))
            ev_t_m = np.concatenate((pm.rise, pm.fall, pp.bar_fall, pp.bar_rise))
            ev_d_m = np.concatenate((np.full(pm.rise.size, half), np.full(pm.fall.size, -half),
                                     np.full(pp.bar_fall.size, -half), np.full(pp.bar_rise.size, half)))
            base = n_phi1 / 2
            c2p, rp, lp = _stage2_counts(config.curve2, config.n_phi2, ts, n_total, base,
                                         ev_t_p, ev_d_p, c2_init[0])
            c2m, rm, lm = _stage2_counts(config.curve2, config.n_phi2, ts, n_total, base,
                                         ev_t_m, ev_d_m, c2_init[1])
            if keep_e_trace:
                e_trace = (lp - lm)[N_WARMUP:N_WARMUP + n]
            d2_full = _counts_to_samples(c2p) - _counts_to_samples(c2m)
            diag["stage2_drive_range"] = (min(rp[0], rm[0]), max(rp[1], rm[1]))

    d1 = d1_full[N_WARMUP:]
    d2 = d2_full[N_WARMUP:]
    if config.architecture == "single_stage":
        d = d1[:-1].copy()
    else:
        # stage-2 sample k+1 carries the error estimated during stage-1 sample k
        d = ncf_combine(d1[:-1], d2[1:], g_used, d2_prev=d2[0])

    fsc = config.full_scale_counts()
    return SimResult(
        d1=sc.SampleStream(d1, config.fs, "d1", fsc),
        d2=sc.SampleStream(d2, config.fs, "d2", fsc),
        d=sc.SampleStream(d, config.fs, "d", fsc),
        g_used=g_used,
        config=config,
        diagnostics=diag,
        e_trace=e_trace,
    )


def analyze(result: SimResult, osr: int | None = None, n_harmonics: int = 5) -> sc.Metrics:
    """Rectangular-window metrics of the combined output (tone is coherent)."""
    cfg = result.config
    osr = cfg.osr if osr is None else osr
    spec = sc.spectrum(result.d, cfg.n_samples, 1, "rectangular")
    return sc.metrics(spec, cfg.stimulus[0].freq, osr, n_harmonics)


def sqnr(result: SimResult, osr: int | None = None) -> float:
    """In-band signal to quantization noise, harmonics excluded."""
    return analyze(result, osr).snr_db


# --------------------------------------------------------------------------
# serialization

CONFIG_SCHEMA = 1


def _curve_to_dict(c: TuningCurve) -> dict:
    return c.to_dict()


def config_to_dict(config: SimConfig) -> dict:
    """Structured, versioned representation of a :class:`SimConfig`."""
    return {
        "schema": CONFIG_SCHEMA,
        "fs": config.fs,
        "osr": config.osr,
        "n_phi1": config.n_phi1,
        "n_phi2": config.n_phi2,
        "architecture": config.architecture,
        "differential_stage1": config.differential_stage1,
        "n_samples": config.n_samples,
        "seed": config.seed,
        "curve1": _curve_to_dict(config.curve1),
        "curve2": _curve_to_dict(config.curve2),
        "stimulus": [[t.amp, t.freq, t.phase] for t in config.stimulus],
        "pw_errors": {"tr": list(config.pw_errors.tr), "tf": list(config.pw_errors.tf)},
        "metastability": {
            "enabled": config.metastability.enabled,
            "tau": config.metastability.tau,
            "t_max": config.metastability.t_max,
            "window": config.metastability.window,
        },
        "thermal_snr_target_db": config.thermal_snr_target_db,
        "grid_points_per_sample": config.grid.points_per_sample,
        "g_scale": config.g_scale,
        "dyn_tau": config.dyn_tau,
        "dyn_poly": list(config.dyn_poly),
        "full_scale_vpp": config.full_scale_vpp,
    }


def config_from_dict(doc: dict) -> SimConfig:
    if doc.get("schema") != CONFIG_SCHEMA:
        raise ConfigError(f"unsupported config schema {doc.get('schema')!r}")
    known = set(config_to_dict(SimConfig()))
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    ms = doc.get("metastability", {})
    pw = doc.get("pw_errors", {})
    try:
        return SimConfig(
            fs=float(doc["fs"]),
            osr=int(doc["osr"]),
            n_phi1=int(doc["n_phi1"]),
            n_phi2=int(doc["n_phi2"]),
            curve1=TuningCurve.from_dict(doc["curve1"]),
            curve2=TuningCurve.from_dict(doc["curve2"]),
            architecture=doc["architecture"],
            differential_stage1=bool(doc.get("differential_stage1", False)),
            stimulus=tuple(Tone(*map(float, t)) for t in doc.get("stimulus", [])),
            n_samples=int(doc["n_samples"]),
            pw_errors=PulseWidthErrors(tuple(pw.get("tr", ())), tuple(pw.get("tf", ()))),
            metastability=MetastabilityModel(
                tau=float(ms.get("tau", 2e-12)), t_max=ms.get("t_max"),
                enabled=bool(ms.get("enabled", False)), window=ms.get("window")),
            thermal_snr_target_db=doc.get("thermal_snr_target_db"),
            seed=int(doc.get("seed", 0)),
            grid=InnerGrid(int(doc.get("grid_points_per_sample", 32))),
            g_scale=float(doc.get("g_scale", 1.0)),
            dyn_tau=float(doc.get("dyn_tau", 0.0)),
            dyn_poly=tuple(float(v) for v in doc.get("dyn_poly", ())),
            full_scale_vpp=float(doc.get("full_scale_vpp", 0.9)),
        )
    except KeyError as exc:
        raise ConfigError(f"missing config field {exc.args[0]!r}") from None


def save_config(config: SimConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(config_to_dict(config), sort_keys=False))
    return path


def load_config(path) -> SimConfig:
    doc = yaml.safe_load(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return config_from_dict(doc)


# --------------------------------------------------------------------------
# sweeps


def resize_stage2(curve2: TuningCurve, n_phi1: int) -> TuningCurve:
    """Same frequency span and shape over the input range ``[0, n_phi1]``."""
    if n_phi1 < 1:
        raise ConfigError("n_phi1 must be >= 1")
    width = curve2.input_range[1] - curve2.input_range[0]
    return replace(curve2, input_range=(0.0, float(n_phi1)), gain_k=curve2.gain_k * width / n_phi1)


def apply_sweep_value(base: SimConfig, param: str, value) -> SimConfig:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}")
    if param == "n_phi1":
        n = int(value)
        cfg = replace(base, n_phi1=n, curve2=resize_stage2(base.curve2, n))
        if base.pw_errors.tr or base.pw_errors.tf:
            skew = max(base.pw_errors.tr or (0.0,))
            cfg = replace(cfg, pw_errors=gradient_pw_errors(n, skew))
        return cfg
    if param == "g_rel_mismatch":
        return replace(base, g_scale=1.0 + float(value))
    if param == "pw_max_skew":
        return replace(base, pw_errors=gradient_pw_errors(base.n_phi1, float(value)))
    if not base.stimulus:
        raise ConfigError(f"sweeping {param} needs a stimulus tone")
    first, rest = base.stimulus[0], base.stimulus[1:]
    if param == "amplitude":
        return replace(base, stimulus=(replace(first, amp=float(value)), *rest))
    f = sc.coherent_bin_frequency(float(value), base.fs, base.n_samples)
    return replace(base, stimulus=(replace(first, freq=f), *rest))


@dataclass
class SweepPoint:
    value: float
    seed: int
    metrics: sc.Metrics | None
    error: str | None = None


def _sweep_task(args):
    base, param, value, seed = args
    try:
        cfg = replace(apply_sweep_value(base, param, value), seed=seed)
        return SweepPoint(value, seed, analyze(simulate(cfg)))
    except (ConfigError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return SweepPoint(value, seed, None, f"{type(exc).__name__}: {exc}")


def sweep(base: SimConfig, param: str, values: Sequence, seeds: Sequence[int] | None = None,
          workers: int = 1) -> list[SweepPoint]:
    """One run per (value, seed); results come back in (value, seed) order.

    Errors at a point are recorded in that point and the sweep continues.
    """
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}")
    seeds = [base.seed] if seeds is None else list(seeds)
    tasks = [(base, param, float(v), int(s)) for v in values for s in seeds]
    if workers <= 1 or len(tasks) <= 1:
        return [_sweep_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_sweep_task, tasks))


def mean_over_seeds(points: list[SweepPoint], key: str = "snr_db") -> list[tuple[float, float]]:
    """``(value, mean metric)`` per sweep value, skipping failed points."""
    out: dict[float, list[float]] = {}
    for p in points:
        if p.metrics is not None:
            out.setdefault(p.value, []).append(getattr(p.metrics, key))
    return [(v, float(np.mean(m))) for v, m in out.items()]
