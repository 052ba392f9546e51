"""Behavioral ring-oscillator VCO model.

The oscillator is treated as an ideal integrator from tuning input to phase.
Phase is tracked in *count* units ``c = 2 * n_phi * theta`` (``theta`` in
cycles), so that every integer crossing of ``c`` is one level change of one
of the ``n_phi`` readout phases. Phase ``i`` toggles whenever
``c + i`` crosses a multiple of ``n_phi``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.polynomial import polynomial as P


class GridTooCoarseError(ValueError):
    """A single phase toggled more than once inside one integration cell."""


@dataclass(frozen=True)
class TuningCurve:
    """Static frequency-versus-input characteristic.

    ``f(x) = f0 + gain_k * (x - mid) + gain_k * half * nl(u)`` with
    ``u = (x - mid) / half`` the deviation normalized to [-1, 1] and ``nl`` a
    polynomial (numpy ascending order) whose constant term is zero.
    """

    f0: float
    gain_k: float
    input_range: tuple[float, float]
    nl_poly: tuple[float, ...] = ()

    def __post_init__(self):
        lo, hi = self.input_range
        if not hi > lo:
            raise ValueError("input_range must be increasing")
        if self.nl_poly and self.nl_poly[0] != 0.0:
            raise ValueError("nl_poly constant term must be zero so f(mid) = f0")

    @property
    def mid(self) -> float:
        return 0.5 * (self.input_range[0] + self.input_range[1])

    @property
    def half(self) -> float:
        return 0.5 * (self.input_range[1] - self.input_range[0])

    def normalized(self, x):
        return (np.clip(x, *self.input_range) - self.mid) / self.half

    def frequency(self, x):
        """Vectorized frequency; inputs outside ``input_range`` are clamped."""
        u = self.normalized(np.asarray(x, dtype=float))
        f = self.f0 + self.gain_k * self.half * u
        if self.nl_poly:
            f = f + self.gain_k * self.half * P.polyval(u, self.nl_poly)
        return f

    @property
    def f_range(self) -> float:
        lo, hi = self.frequency(np.array(self.input_range))
        return float(hi - lo)

    @property
    def f_max(self) -> float:
        x = np.linspace(*self.input_range, 2001)
        return float(np.max(self.frequency(x)))

    @property
    def f_min(self) -> float:
        x = np.linspace(*self.input_range, 2001)
        return float(np.min(self.frequency(x)))

    def to_dict(self) -> dict:
        return {
            "f0": self.f0,
            "gain_k": self.gain_k,
            "input_range": list(self.input_range),
            "nl_poly": list(self.nl_poly),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TuningCurve":
        return cls(
            f0=float(d["f0"]),
            gain_k=float(d["gain_k"]),
            input_range=tuple(float(v) for v in d["input_range"]),
            nl_poly=tuple(float(v) for v in d.get("nl_poly", ())),
        )


@dataclass
class PhaseState:
    """Accumulated oscillator phase in cycles."""

    theta: float
    n_phi: int
    initial_offset: float = 0.0

    def __post_init__(self):
        if self.n_phi < 1:
            raise ValueError("n_phi must be >= 1")

    @property
    def count(self) -> float:
        return 2.0 * self.n_phi * self.theta


@dataclass
class EdgeWaveform:
    """Piecewise-constant logic waveform given by its transition times."""

    times: np.ndarray
    initial_level: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("transition times must be strictly increasing")

    @property
    def transitions(self) -> list[tuple[float, int]]:
        levels = (self.initial_level + 1 + np.arange(self.times.size)) % 2
        return list(zip(self.times.tolist(), levels.tolist()))

    def level_at(self, t):
        n = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        return (self.initial_level + n) % 2


@dataclass(frozen=True)
class InnerGrid:
    """Evaluation points per sample period for continuous inputs."""

    points_per_sample: int = 32


@dataclass(frozen=True)
class PfmInfo:
    f_eff: float


def pfm_info(n_phi: int, f0: float) -> PfmInfo:
    return PfmInfo(f_eff=2.0 * n_phi * f0)


def tuning_frequency(curve: TuningCurve, x):
    """Frequency of ``curve`` at ``x``; returns ``(f, n_clamped)``."""
    x = np.asarray(x, dtype=float)
    lo, hi = curve.input_range
    n_clamped = int(np.count_nonzero((x < lo) | (x > hi)))
    return curve.frequency(x), n_clamped


@dataclass(frozen=True)
class FrequencyCheck:
    passed: bool
    f_max: float
    limit: float
    margin: float


def max_frequency_check(curve: TuningCurve, fs: float) -> FrequencyCheck:
    """QSD readout needs every phase to toggle at most once per clock."""
    f_max = curve.f_max
    limit = fs / 2.0
    ok = f_max < limit and curve.f_min > 0.0
    return FrequencyCheck(passed=bool(ok), f_max=f_max, limit=limit, margin=limit - f_max)


def inl(curve: TuningCurve, n: int = 4001) -> float:
    """Max deviation from the least-squares line, relative to the frequency span."""
    x = np.linspace(*curve.input_range, n)
    return _inl_of(x, curve.frequency(x))


def inl_cross_coupled(curve: TuningCurve, n: int = 4001) -> float:
    """INL of the pseudo-differential equivalent ``f(mid + e/2) - f(mid - e/2)``."""
    width = curve.input_range[1] - curve.input_range[0]
    e = np.linspace(-width, width, n)
    f = curve.frequency(curve.mid + e / 2) - curve.frequency(curve.mid - e / 2)
    return _inl_of(e, f)


def _inl_of(x, f) -> float:
    slope, icept = np.polyfit(x, f, 1)
    span = np.max(f) - np.min(f)
    return float(np.max(np.abs(f - (slope * x + icept))) / span)


def linear_curve(f0: float, f_range: float, input_range: tuple[float, float]) -> TuningCurve:
    lo, hi = input_range
    return TuningCurve(f0=f0, gain_k=f_range / (hi - lo), input_range=(lo, hi))


def stage1_curve(
    f0: float = 1.0e9,
    f_range: float = 1.21e9,
    v_mid: float = 0.45,
    v_pp: float = 0.75,
    nl_poly: tuple[float, ...] = (),
) -> TuningCurve:
    """First-stage curve: ``f_range`` is spanned by a ``v_pp`` input swing."""
    curve = linear_curve(f0, f_range, (v_mid - v_pp / 2, v_mid + v_pp / 2))
    if nl_poly:
        curve = with_nl(curve, nl_poly)
    return curve


def stage2_curve(f0: float = 0.9e9, f_range: float = 1.57e9, n_phi1: int = 32) -> TuningCurve:
    """Ideal second-stage curve driven by the error count in ``[0, n_phi1]``."""
    return linear_curve(f0, f_range, (0.0, float(n_phi1)))


def with_nl(curve: TuningCurve, nl_poly) -> TuningCurve:
    """Attach a nonlinearity while keeping the end-to-end frequency span."""
    nl = tuple(float(c) for c in nl_poly)
    tmp = replace(curve, nl_poly=nl)
    return replace(tmp, gain_k=curve.gain_k * curve.f_range / tmp.f_range)


# Normalized-deviation coefficients of the shipped second-stage presets.
# The cubic term alone fixes the INL of the pseudo-differential equivalent
# (even terms cancel there); the quadratic term then sets the overall INL.
STAGE2_NL18 = (0.0, 0.0, 0.5296, 0.1766)
STAGE2_NL3 = (0.0, 0.0, 0.0, 0.1766)


def solve_nl_preset(inl_total: float, inl_odd: float, n_phi1: int = 32):
    """Quadratic plus cubic ``nl_poly`` hitting two INL targets.

    ``inl_odd`` is met on the cross-coupled equivalent, ``inl_total`` on the
    curve itself. Used to regenerate the shipped presets.
    """
    from scipy.optimize import brentq

    base = stage2_curve(1.0e9, 1.0e9, n_phi1)
    a3 = 0.0
    if inl_odd > 0:
        a3 = brentq(lambda a: inl(with_nl(base, (0, 0, 0, a))) - inl_odd, 0.0, 1.0)
    if inl_total <= inl_odd:
        return (0.0, 0.0, 0.0, a3)
    # keep the slope positive at the low end: 1 - 2*a2 + 3*a3 > 0
    a2_max = 0.5 * (1 + 3 * a3) - 1e-6
    a2 = brentq(lambda a: inl(with_nl(base, (0, 0, a, a3))) - inl_total, 0.0, a2_max)
    return (0.0, 0.0, a2, a3)


def stage2_nl_curve(
    preset: str = "nl18",
    f_range: float = 1.57e9,
    n_phi1: int = 32,
    fs: float = 3.5e9,
    margin: float = 0.04e9,
) -> TuningCurve:
    """Nonlinear second-stage preset, placed so its top sits ``margin`` below fs/2."""
    poly = {"nl18": STAGE2_NL18, "nl3": STAGE2_NL3}[preset]
    base = stage2_curve(1.0e9, f_range, n_phi1)
    curve = with_nl(base, poly)
    shift = (fs / 2 - margin) - curve.f_max
    return replace(curve, f0=curve.f0 + shift)


@dataclass
class CurveFit:
    curve: TuningCurve
    order: int
    residual_rms: float
    coeffs: np.ndarray = field(repr=False)


def fit_curve_from_table(points, order: int = 3) -> CurveFit:
    """Least-squares polynomial tuning curve from tabulated ``(x, Hz)`` points."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("need a table of (x, Hz) rows")
    x, f = pts[:, 0], pts[:, 1]
    if np.any(np.diff(x) <= 0):
        raise ValueError("x must be strictly increasing")
    order = min(order, x.size - 1)
    lo, hi = float(x[0]), float(x[-1])
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    u = (x - mid) / half
    vander = P.polyvander(u, order)
    coeffs, _, rank, _ = np.linalg.lstsq(vander, f, rcond=None)
    if rank < order + 1:
        raise np.linalg.LinAlgError("rank-deficient tuning-curve fit")
    resid = f - vander @ coeffs
    f0, lin = coeffs[0], coeffs[1]
    gain_k = lin / half
    nl = np.zeros(order + 1)
    nl[2:] = coeffs[2:] / lin
    curve = TuningCurve(f0=float(f0), gain_k=float(gain_k), input_range=(lo, hi),
                        nl_poly=tuple(nl.tolist()) if order > 1 else ())
    return CurveFit(curve=curve, order=order, residual_rms=float(np.sqrt(np.mean(resid**2))),
                    coeffs=coeffs)


def read_curve_table(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError:
                continue  # header line
    return np.array(rows)


def write_curve_table(path, curve: TuningCurve, n: int = 33) -> Path:
    x = np.linspace(*curve.input_range, n)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "hz"])
        for xi, fi in zip(x, curve.frequency(x)):
            w.writerow([repr(float(xi)), repr(float(fi))])
    return path


# --------------------------------------------------------------------------
# phase integration


def integrate_count(t, f, c0: float, n_phi: int, piecewise: bool = False,
                    f_mid=None, f_right=None):
    """Count coordinate at every grid point.

    ``piecewise=True`` treats ``f[j]`` as constant on ``[t[j], t[j+1])``
    (exact). With ``f_mid`` (frequency at cell midpoints) Simpson's rule is
    used; ``f_right`` then optionally gives the right-end value of each cell
    when the drive is discontinuous at cell boundaries. Otherwise the
    trapezoidal rule is used.
    """
    dt = np.diff(t)
    if piecewise:
        inc = f[:-1] * dt
    else:
        fr = f[1:] if f_right is None else f_right
        if f_mid is None:
            inc = 0.5 * (f[:-1] + fr) * dt
        else:
            inc = (f[:-1] + 4.0 * f_mid + fr) * dt / 6.0
    c = np.empty(t.size)
    c[0] = c0
    np.cumsum(2.0 * n_phi * inc, out=c[1:])
    c[1:] += c0
    return c


def crossings(t, c, n_phi: int, slope=None):
    """Integer crossings of the count coordinate.

    Returns ``(times, values, cell)`` where ``values`` are the crossed integers
    and ``cell`` the grid cell index ``j`` with ``t[j] < time <= t[j+1]``.
    Crossing times come from inverse linear interpolation inside the cell, or
    from inverting the cubic Hermite interpolant when ``slope = (left, right)``
    gives dc/dt at both ends of every cell.
    """
    fl = np.floor(c).astype(np.int64)
    n_cross = np.diff(fl)
    if np.any(n_cross < 0):
        raise ValueError("phase must be non-decreasing")
    if n_cross.size and n_cross.max() > n_phi:
        raise GridTooCoarseError(
            f"{n_cross.max()} crossings in one cell exceed n_phi={n_phi}; refine the grid"
        )
    cell = np.repeat(np.arange(n_cross.size), n_cross)
    first = np.repeat(fl[:-1] + 1, n_cross)
    start = np.repeat(np.cumsum(n_cross) - n_cross, n_cross)
    values = first + (np.arange(cell.size) - start)
    c_a, c_b = c[cell], c[cell + 1]
    h = t[cell + 1] - t[cell]
    s = (values - c_a) / (c_b - c_a)
    if slope is not None:
        m0 = np.asarray(slope[0])[cell] * h
        m1 = np.asarray(slope[1])[cell] * h
        s = _hermite_inverse(c_a, c_b, m0, m1, values, s)
    times = t[cell] + s * h
    return times, values, cell


def _hermite_inverse(c0, c1, m0, m1, target, s, iters: int = 4):
    # Newton on the cubic Hermite interpolant, started from the linear guess
    for _ in range(iters):
        s2, s3 = s * s, s * s * s
        val = ((2 * s3 - 3 * s2 + 1) * c0 + (s3 - 2 * s2 + s) * m0
               + (3 * s2 - 2 * s3) * c1 + (s3 - s2) * m1)
        der = ((6 * s2 - 6 * s) * (c0 - c1) + (3 * s2 - 4 * s + 1) * m0
               + (3 * s2 - 2 * s) * m1)
        s = np.clip(s - (val - target) / np.maximum(der, 1e-300), 0.0, 1.0)
    return s


def phase_of(values, n_phi: int):
    """Readout phase index toggled by each integer crossing."""
    return np.mod(-np.asarray(values), n_phi)


def levels_at(c, n_phi: int):
    """Per-phase logic level at count coordinate ``c`` (shape ``(..., n_phi)``)."""
    i = np.arange(n_phi)
    return (np.floor((np.asarray(c)[..., None] + i) / n_phi).astype(np.int64) % 2)


def advance_phase(state: PhaseState, curve: TuningCurve, t, x, piecewise: bool = False):
    """Advance ``state`` over the grid ``t`` driven by input samples ``x``.

    Returns the new state and one :class:`EdgeWaveform` per readout phase with
    the transitions inside ``(t[0], t[-1]]``.
    """
    t = np.asarray(t, dtype=float)
    x = np.broadcast_to(np.asarray(x, dtype=float), t.shape)
    if t.size < 2 or not t[-1] > t[0]:
        raise ValueError("need an increasing time grid")
    n_phi = state.n_phi
    f = curve.frequency(x)
    c = integrate_count(t, f, state.count, n_phi, piecewise=piecewise)
    times, values, _ = crossings(t, c, n_phi)
    ph = phase_of(values, n_phi)
    lv0 = levels_at(state.count, n_phi)
    waves = [EdgeWaveform(times[ph == i], int(lv0[i])) for i in range(n_phi)]
    new = PhaseState(theta=c[-1] / (2.0 * n_phi), n_phi=n_phi, initial_offset=state.initial_offset)
    return new, waves
