"""QSD readout, per-phase error estimation and error-bit summation.

Two routes are provided. The per-phase functions (:func:`qsd_sample`,
:func:`estimate_error`, :func:`sum_error_bits`) operate on explicit
:class:`~mashvco.vcomodel.EdgeWaveform` objects and mirror the circuit one
phase at a time. :func:`error_pulses` computes the same pulses for every
toggle of a whole run at once and is what the simulator uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .vcomodel import EdgeWaveform


@dataclass
class QsdState:
    sampled_level: np.ndarray
    prev_sampled: np.ndarray

    @classmethod
    def from_levels(cls, levels) -> "QsdState":
        lv = np.asarray(levels, dtype=np.int64).copy()
        return cls(sampled_level=lv, prev_sampled=lv.copy())


@dataclass(frozen=True)
class PulseWidthErrors:
    """Effective per-phase delays of the rising (``tr``) and falling (``tf``) edges."""

    tr: tuple[float, ...] = ()
    tf: tuple[float, ...] = ()

    def arrays(self, n_phi: int):
        tr = np.zeros(n_phi) if not self.tr else np.asarray(self.tr, dtype=float)
        tf = np.zeros(n_phi) if not self.tf else np.asarray(self.tf, dtype=float)
        if tr.size != n_phi or tf.size != n_phi:
            raise ValueError(f"pulse-width errors sized for {tr.size} phases, need {n_phi}")
        return tr, tf

    @property
    def is_ideal(self) -> bool:
        return not any(self.tr) and not any(self.tf)

    def validate(self, ts: float):
        for v in (*self.tr, *self.tf):
            if not 0.0 <= v < ts:
                raise ValueError("pulse-width delays must lie in [0, Ts)")


@dataclass(frozen=True)
class MetastabilityModel:
    """Regenerative-latch resolution delay ``min(t_max, tau * ln(Ts / dt))``.

    The delay is applied when a phase toggled less than ``window`` before the
    clock edge; ``window=None`` means one full clock period.
    """

    tau: float = 2e-12
    t_max: float | None = None
    enabled: bool = False
    window: float | None = None

    def delay(self, proximity, ts: float):
        proximity = np.asarray(proximity, dtype=float)
        if not self.enabled or self.tau == 0.0:
            return np.zeros_like(proximity)
        t_max = ts / 2 if self.t_max is None else self.t_max
        window = ts if self.window is None else self.window
        with np.errstate(divide="ignore"):
            d = self.tau * np.log(ts / np.maximum(proximity, 1e-30))
        d = np.clip(d, 0.0, t_max)
        return np.where(proximity < window, d, 0.0)


def gradient_pw_errors(n_phi: int, max_skew: float) -> PulseWidthErrors:
    """Linear skew gradient ``tr_i - tf_i = max_skew * i / (n_phi - 1)``."""
    if max_skew < 0:
        raise ValueError("max_skew must be >= 0")
    if n_phi == 1:
        skew = np.zeros(1)
    else:
        skew = max_skew * np.arange(n_phi) / (n_phi - 1)
    return PulseWidthErrors(tr=tuple(skew.tolist()), tf=tuple([0.0] * n_phi))


def qsd_sample(state: QsdState, levels, metastability: MetastabilityModel | None = None,
               edge_proximity=None, ts: float = 1.0):
    """Sample every phase at a clock edge and differentiate.

    Returns ``(d_bits, new_state, delays)``; ``delays`` is the extra time the
    new sampled level needs before it reaches the error estimator.
    """
    levels = np.asarray(levels, dtype=np.int64)
    if levels.shape != state.sampled_level.shape:
        raise ValueError("levels must have one entry per phase")
    d_bits = np.bitwise_xor(levels, state.sampled_level)
    delays = np.zeros(levels.size)
    if metastability is not None and edge_proximity is not None:
        delays = np.where(d_bits == 1, metastability.delay(edge_proximity, ts), 0.0)
    new = QsdState(sampled_level=levels.copy(), prev_sampled=state.sampled_level.copy())
    return d_bits, new, delays


def zoh_waveform(w: EdgeWaveform, clock_times) -> EdgeWaveform:
    """Sampled-and-held version of ``w`` on the given clock edges."""
    clock_times = np.asarray(clock_times, dtype=float)
    # a phase toggling exactly on the edge is taken by that edge
    lv = w.level_at(clock_times)
    prev = np.concatenate(([w.initial_level], lv[:-1]))
    change = clock_times[lv != prev]
    return EdgeWaveform(change, int(w.initial_level))


def _xor_edges(a: EdgeWaveform, b: EdgeWaveform):
    t = np.concatenate((a.times, b.times))
    t.sort(kind="stable")
    # simultaneous toggles of both inputs leave the XOR unchanged
    uniq, counts = np.unique(t, return_counts=True)
    return uniq[counts % 2 == 1], int(a.initial_level ^ b.initial_level)


def estimate_error(w_i: EdgeWaveform, w_zoh_i: EdgeWaveform, pw: PulseWidthErrors | None = None,
                   i: int = 0, delays=None):
    """Error pulse ``E_i = XOR(W_i, W_ZOH,i)`` and its complement.

    Rising edges of each output are delayed by ``tr_i`` and falling edges by
    ``tf_i``. ``delays`` optionally lists metastability delays for each
    transition of ``w_zoh_i``. Pulses shrunk to non-positive width vanish.
    """
    tr = tf = 0.0
    if pw is not None and not pw.is_ideal:
        tra, tfa = pw.arrays(len(pw.tr))
        tr, tf = float(tra[i]), float(tfa[i])
    zoh = w_zoh_i
    if delays is not None and len(zoh.times):
        zoh = EdgeWaveform(zoh.times + np.asarray(delays, dtype=float), zoh.initial_level)
    edges, lvl0 = _xor_edges(w_i, zoh)
    new_lv = (lvl0 + 1 + np.arange(edges.size)) % 2
    e = _shift_edges(edges, new_lv, lvl0, rise=tr, fall=tf)
    e_bar = _shift_edges(edges, 1 - new_lv, 1 - lvl0, rise=tr, fall=tf)
    return e, e_bar


def _shift_edges(edges, new_lv, lvl0, rise, fall) -> EdgeWaveform:
    shifted = edges + np.where(new_lv == 1, rise, fall)
    keep = np.ones(shifted.size, dtype=bool)
    # drop pairs whose order inverted after shifting (zero-width pulses)
    changed = True
    t = shifted.copy()
    while changed and t.size > 1:
        changed = False
        idx = np.flatnonzero(np.diff(t[keep]) <= 0)
        if idx.size:
            live = np.flatnonzero(keep)
            j = idx[0]
            keep[live[j]] = keep[live[j + 1]] = False
            changed = True
    return EdgeWaveform(t[keep], int(lvl0))


@dataclass
class StepWaveform:
    """Integer-valued piecewise-constant waveform."""

    times: np.ndarray
    values: np.ndarray
    initial: float = 0.0

    def value_at(self, t):
        n = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        vals = np.concatenate(([self.initial], self.values))
        return vals[n]

    def integral(self, t0: float, t1: float) -> float:
        """Exact integral over ``[t0, t1]``."""
        inner = (self.times > t0) & (self.times < t1)
        pts = np.concatenate(([t0], self.times[inner], [t1]))
        vals = self.value_at(pts[:-1])
        return float(np.sum(vals * np.diff(pts)))


def sum_error_bits(e: list[EdgeWaveform]) -> StepWaveform:
    """``E(t) = sum_i e_i(t)`` as a merged, sorted step waveform."""
    if not e:
        return StepWaveform(np.array([]), np.array([]), 0.0)
    times, deltas = [], []
    initial = 0
    for w in e:
        initial += w.initial_level
        lv = (w.initial_level + 1 + np.arange(w.times.size)) % 2
        times.append(w.times)
        deltas.append(np.where(lv == 1, 1, -1))
    t = np.concatenate(times)
    d = np.concatenate(deltas)
    order = np.argsort(t, kind="stable")
    t, d = t[order], d[order]
    uniq, inv = np.unique(t, return_inverse=True)
    dsum = np.zeros(uniq.size, dtype=np.int64)
    np.add.at(dsum, inv, d)
    vals = initial + np.cumsum(dsum)
    return StepWaveform(uniq, vals.astype(float), float(initial))


@dataclass
class PulseSet:
    """Error pulses of every toggle in a run (vectorized route)."""

    rise: np.ndarray
    fall: np.ndarray
    bar_fall: np.ndarray
    bar_rise: np.ndarray
    phase: np.ndarray = field(repr=False)


def error_pulses(toggle_t, phase, clock_t, pw: PulseWidthErrors | None,
                 metastability: MetastabilityModel | None, ts: float, n_phi: int) -> PulseSet:
    """Pulse edges of ``E_i`` and its complement for every phase toggle.

    ``clock_t`` is the clock edge that closes the period of each toggle. The
    ideal ``E_i`` pulse rises at the toggle and falls when the sampled-and-held
    value catches up at that clock edge; the complement is low over the same
    interval.
    """
    toggle_t = np.asarray(toggle_t, dtype=float)
    clock_t = np.asarray(clock_t, dtype=float)
    hold = clock_t
    if metastability is not None and metastability.enabled:
        hold = clock_t + metastability.delay(clock_t - toggle_t, ts)
    if pw is None or pw.is_ideal:
        rise, fall = toggle_t, hold
        bar_fall, bar_rise = toggle_t, hold
    else:
        tr, tf = pw.arrays(n_phi)
        tri, tfi = tr[phase], tf[phase]
        rise, fall = toggle_t + tri, hold + tfi
        bar_fall, bar_rise = toggle_t + tfi, hold + tri
    fall = np.maximum(fall, rise)
    bar_rise = np.maximum(bar_rise, bar_fall)
    return PulseSet(rise=rise, fall=fall, bar_fall=bar_fall, bar_rise=bar_rise, phase=phase)
