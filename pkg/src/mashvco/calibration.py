"""Frequency-dependent nonlinearity fit and LUT-based correction.

The distortion model is

    NL(x[n]) = sum_k c_k * (sum_i a_i x[n]^i + sum_j b_j (x[n]^j - x[n-1]^j))^k

on codes normalized as ``x = (D - offset) / scale``. Correction subtracts
``scale * NL`` from a partially decimated stream, either in floating point or
through two 512-entry LUTs in 14-bit fixed point.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal as sps

from . import signalcore as sc

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
WORD_BITS = 14
FRAC_BITS = WORD_BITS - 1
Q_ONE = 1 << FRAC_BITS  # 8192
CODE_MIN, CODE_MAX = -(1 << FRAC_BITS), (1 << FRAC_BITS) - 1
LUT_SIZE = 512
INTERP_BITS = WORD_BITS - 9  # top 9 bits index the LUT
FULL_SCALE_CODE = 0.999


class CalibrationError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass
class NlModel:
    a: np.ndarray  # a_0..a_Ni
    b: np.ndarray  # b_1..b_Nj
    c: np.ndarray  # c_1..c_Nk
    offset: float = 0.0
    scale: float = 1.0
    iterations: int = 0
    residual: float = 0.0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        if not self.scale > 0:
            raise ValueError("normalization scale must be positive")

    @property
    def orders(self) -> tuple[int, int, int]:
        return self.a.size - 1, self.b.size, self.c.size

    def normalize(self, d) -> np.ndarray:
        return (np.asarray(d, dtype=float) - self.offset) / self.scale

    def denormalize(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) * self.scale + self.offset

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "kind": "nl_model",
            "orders": list(self.orders),
            "a": [repr(float(v)) for v in self.a],
            "b": [repr(float(v)) for v in self.b],
            "c": [repr(float(v)) for v in self.c],
            "offset": repr(float(self.offset)),
            "scale": repr(float(self.scale)),
            "iterations": self.iterations,
            "residual": repr(float(self.residual)),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NlModel":
        _check_doc(doc, "nl_model")
        return cls(
            a=[float(v) for v in doc["a"]],
            b=[float(v) for v in doc["b"]],
            c=[float(v) for v in doc["c"]],
            offset=float(doc["offset"]),
            scale=float(doc["scale"]),
            iterations=int(doc.get("iterations", 0)),
            residual=float(doc.get("residual", 0.0)),
        )


def _check_doc(doc: dict, kind: str):
    if doc.get("kind") != kind:
        raise CalibrationError(f"expected a {kind} document, got {doc.get('kind')!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise CalibrationError(f"unsupported {kind} version {doc.get('version')!r}")


def _features(x: np.ndarray, ni: int, nj: int) -> np.ndarray:
    """Columns ``x^0..x^ni`` then ``x^j - x_prev^j`` for ``j = 1..nj``."""
    cols = [x**i for i in range(ni + 1)]
    for j in range(1, nj + 1):
        p = x**j
        cols.append(np.diff(p, prepend=p[0]))
    return np.column_stack(cols)


def _powers(inner: np.ndarray, nk: int) -> np.ndarray:
    return np.column_stack([inner**k for k in range(1, nk + 1)])


def eval_inner(model: NlModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    ni, nj, _ = model.orders
    return _features(x, ni, nj) @ np.concatenate((model.a, model.b))


def eval_nl_normalized(model: NlModel, x) -> np.ndarray:
    return _powers(eval_inner(model, x), model.c.size) @ model.c


def eval_nl(model: NlModel, d_cl: sc.SampleStream) -> sc.SampleStream:
    """Model output in stream units; the first sample uses a zero difference."""
    if len(d_cl) < 2:
        raise ValueError("need at least two samples")
    y = eval_nl_normalized(model, model.normalize(d_cl.samples)) * model.scale
    return d_cl.with_samples(y, "nl")


def fit_nl(d_cl: sc.SampleStream, dist: sc.SampleStream, orders=(5, 5, 2),
           tol: float = 1e-9, max_iter: int = 50, offset: float | None = None,
           scale: float | None = None) -> NlModel:
    """Least-squares fit of the distortion model to ``dist``.

    For ``Nk = 1`` the problem is linear and solved once. Otherwise the
    solver alternates a linear solve for ``c`` (inner polynomial fixed) with a
    Gauss-Newton step for ``(a, b)`` (``c`` fixed), normalizing ``c_1 = 1``
    to remove the scale ambiguity between the two levels.
    """
    ni, nj, nk = orders
    if ni < 1 or nk < 1 or nj < 0:
        raise ValueError("orders must satisfy Ni >= 1, Nj >= 0, Nk >= 1")
    d = np.asarray(d_cl.samples, dtype=float)
    y = np.asarray(dist.samples, dtype=float)
    if d.shape != y.shape:
        raise ValueError("d_cl and dist must have equal length")
    if offset is None:
        offset = float(np.mean(d))
    if scale is None:
        scale = d_cl.full_scale / FULL_SCALE_CODE
    x = (d - offset) / scale
    yn = y / scale
    phi = _features(x, ni, nj)
    n_theta = phi.shape[1]

    if not np.any(yn):
        return NlModel(np.zeros(ni + 1), np.zeros(nj), np.zeros(nk), offset, scale)
    col_norm = np.linalg.norm(phi, axis=0)
    if np.any(col_norm == 0) or np.linalg.matrix_rank(phi / col_norm) < n_theta:
        raise CalibrationError("feature matrix is rank deficient; capture covers too few codes")

    theta, *_ = np.linalg.lstsq(phi, yn, rcond=None)
    c = np.zeros(nk)
    c[0] = 1.0
    res = float(np.sum((phi @ theta - yn) ** 2))
    it = 0
    if nk > 1:
        for it in range(1, max_iter + 1):
            inner = phi @ theta
            c, *_ = np.linalg.lstsq(_powers(inner, nk), yn, rcond=None)
            if c[0] == 0:
                raise ConvergenceError("linear coefficient collapsed to zero")
            # rescale so c_1 = 1: c_k * I^k is invariant under I -> s*I, c_k -> c_k / s^k
            s = c[0]
            theta = theta * s
            c = c / s ** np.arange(1, nk + 1)
            inner = phi @ theta
            r = yn - _powers(inner, nk) @ c
            dinner = sum(k * c[k - 1] * inner ** (k - 1) for k in range(1, nk + 1))
            step, *_ = np.linalg.lstsq(phi * dinner[:, None], r, rcond=None)
            theta = theta + step
            inner = phi @ theta
            new_res = float(np.sum((yn - _powers(inner, nk) @ c) ** 2))
            change = abs(res - new_res) / max(res, 1e-300)
            res = new_res
            if change < tol:
                break
        else:
            raise ConvergenceError(f"no convergence after {max_iter} alternations")
    log.debug("fit_nl: %d iterations, residual %.3g", it, res)
    return NlModel(theta[: ni + 1], theta[ni + 1:], c, offset, scale, it, res)


# --------------------------------------------------------------------------
# fixed point


def to_fixed(x) -> tuple[np.ndarray, int]:
    """Round half to even into signed 14-bit codes; returns (codes, n_saturated)."""
    v = np.round(np.asarray(x, dtype=float) * Q_ONE)
    sat = int(np.count_nonzero((v < CODE_MIN) | (v > CODE_MAX)))
    return np.clip(v, CODE_MIN, CODE_MAX).astype(np.int64), sat


def from_fixed(codes) -> np.ndarray:
    return np.asarray(codes, dtype=float) / Q_ONE


@dataclass
class CorrectionLUT:
    lut_a: np.ndarray  # int codes, LUT_SIZE entries
    lut_b: np.ndarray
    c: np.ndarray
    offset: float
    scale: float

    def __post_init__(self):
        self.lut_a = np.asarray(self.lut_a, dtype=np.int64)
        self.lut_b = np.asarray(self.lut_b, dtype=np.int64)
        self.c = np.asarray(self.c, dtype=float)
        for lut in (self.lut_a, self.lut_b):
            if lut.size != LUT_SIZE:
                raise ValueError(f"LUTs must have {LUT_SIZE} entries")
            if lut.min() < CODE_MIN or lut.max() > CODE_MAX:
                raise ValueError("LUT entry outside the 14-bit range")

    def lookup(self, lut: np.ndarray, codes) -> tuple[np.ndarray, int]:
        """Linear interpolation between the two entries around each code."""
        u = np.asarray(codes, dtype=np.int64) - CODE_MIN
        idx = u >> INTERP_BITS
        frac = u & ((1 << INTERP_BITS) - 1)
        top = idx >= LUT_SIZE - 1
        n_clamp = int(np.count_nonzero(top & (frac > 0)))
        idx = np.minimum(idx, LUT_SIZE - 1)
        nxt = np.minimum(idx + 1, LUT_SIZE - 1)
        lo, hi = lut[idx], lut[nxt]
        step = np.round((hi - lo) * frac / (1 << INTERP_BITS)).astype(np.int64)
        return lo + step, n_clamp

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "kind": "correction_lut",
            "word_bits": WORD_BITS,
            "size": LUT_SIZE,
            "lut_a": [int(v) for v in self.lut_a],
            "lut_b": [int(v) for v in self.lut_b],
            "c": [repr(float(v)) for v in self.c],
            "offset": repr(float(self.offset)),
            "scale": repr(float(self.scale)),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CorrectionLUT":
        _check_doc(doc, "correction_lut")
        return cls(doc["lut_a"], doc["lut_b"], [float(v) for v in doc["c"]],
                   float(doc["offset"]), float(doc["scale"]))


def lut_grid() -> np.ndarray:
    """Normalized code at each LUT entry: every ``2**INTERP_BITS``-th code."""
    return (np.arange(LUT_SIZE) * (1 << INTERP_BITS) + CODE_MIN) / Q_ONE


def build_lut(model: NlModel) -> CorrectionLUT:
    """Tabulate both inner polynomials in 14-bit codes.

    ``c_k I^k`` is unchanged under ``I -> s I, c_k -> c_k / s^k``, so small
    inner polynomials are scaled up by a power of two until ``|a| + 2 |b|``
    fills the code range; otherwise rounding the LUT entries would dominate
    a weak correction.
    """
    x = lut_grid()
    va = np.polynomial.polynomial.polyval(x, model.a)
    vb = np.polynomial.polynomial.polyval(x, np.concatenate(([0.0], model.b)))
    for name, v in (("a", va), ("b", vb)):
        if np.any(np.round(v * Q_ONE) < CODE_MIN) or np.any(np.round(v * Q_ONE) > CODE_MAX):
            raise CalibrationError(f"polynomial {name} overflows the 14-bit LUT range")
    headroom = np.max(np.abs(va)) + 2 * np.max(np.abs(vb))
    s = 1.0
    if headroom > 0:
        s = 2.0 ** max(0, int(np.floor(np.log2(CODE_MAX / Q_ONE / headroom))))
    qa, _ = to_fixed(va * s)
    qb, _ = to_fixed(vb * s)
    c = model.c / s ** np.arange(1, model.c.size + 1)
    return CorrectionLUT(qa, qb, c, model.offset, model.scale)


# --------------------------------------------------------------------------
# correction


@dataclass
class CorrectionStats:
    n_clamped: int = 0
    n_saturated: int = 0


def apply_model(stream: sc.SampleStream, model: NlModel) -> sc.SampleStream:
    """Floating-point correction at the stream's own rate."""
    nl = eval_nl_normalized(model, model.normalize(stream.samples)) * model.scale
    return stream.with_samples(stream.samples - nl, stream.label + "_corr")


def apply_lut(stream: sc.SampleStream, lut: CorrectionLUT,
              stats: CorrectionStats | None = None) -> sc.SampleStream:
    """Bit-accurate 14-bit correction at the stream's own rate.

    The LUT index and the correction term are 14-bit codes; the data word
    itself keeps its own width, so only the correction is quantized.
    """
    stats = CorrectionStats() if stats is None else stats
    codes, sat = to_fixed((stream.samples - lut.offset) / lut.scale)
    stats.n_saturated += sat
    va, ca = lut.lookup(lut.lut_a, codes)
    vb, cb = lut.lookup(lut.lut_b, codes)
    stats.n_clamped += ca + cb
    inner = va + vb - np.concatenate(([vb[0]], vb[:-1]))
    inner = np.clip(inner, CODE_MIN, CODE_MAX)
    xi = from_fixed(inner)
    nl = sum(ck * xi ** (k + 1) for k, ck in enumerate(lut.c))
    nl_codes, sat = to_fixed(nl)
    stats.n_saturated += sat
    y = stream.samples - from_fixed(nl_codes) * lut.scale
    return stream.with_samples(y, stream.label + "_corr")


# --------------------------------------------------------------------------
# decimation


@lru_cache(maxsize=None)
def design_halfband(pass_edge: float, atten_db: float = 80.0, ripple_db: float = 0.001) -> tuple:
    """Equiripple lowpass for decimation by two.

    Band edges are fractions of the input rate; the stop edge is mirrored at
    ``0.5 - pass_edge``. The tap count grows until both the stopband
    attenuation and the passband ripple are met.
    """
    if not 0 < pass_edge < 0.25:
        raise ValueError("pass_edge must lie in (0, 0.25)")
    stop_edge = 0.5 - pass_edge
    delta_p = (10 ** (ripple_db / 20) - 1) / (10 ** (ripple_db / 20) + 1)
    delta_s = 10 ** (-atten_db / 20)
    grid = np.linspace(0, 0.5, 4097)
    pb, sb = grid <= pass_edge, grid >= stop_edge
    for n in range(7, 400, 2):
        h = sps.remez(n, [0, pass_edge, stop_edge, 0.5], [1, 0],
                      weight=[delta_s / delta_p, 1], fs=1.0, maxiter=100)
        _, resp = sps.freqz(h, worN=grid, fs=1.0)
        mag = np.abs(resp)
        if np.max(np.abs(mag[pb] - 1)) <= delta_p and np.max(mag[sb]) <= delta_s:
            return tuple(float(v) for v in h / np.sum(h))
    raise ValueError("could not meet the decimation filter specification")


@dataclass(frozen=True)
class DecimationSpec:
    """Cascaded by-two stages before (``pre``) and after (``post``) correction."""

    pre: tuple = ()
    post: tuple = ()

    @property
    def pre_factor(self) -> int:
        return 2 ** len(self.pre)

    @property
    def post_factor(self) -> int:
        return 2 ** len(self.post)

    @classmethod
    def default(cls, osr: int = 16, pre_factor: int = 4) -> "DecimationSpec":
        """Stages sized so each output keeps the signal band alias-free."""
        total = int(round(np.log2(osr)))
        n_pre = int(round(np.log2(pre_factor)))
        if 2**total != osr or 2**n_pre != pre_factor or n_pre > total:
            raise ValueError("osr and pre_factor must be powers of two with pre_factor <= osr")
        stages = []
        band = 0.5 / osr  # signal band edge as a fraction of the current rate
        for s in range(total):
            last = s == total - 1
            # wide passband early (cheap filters), tight at the final stage
            edge = 0.22 if last else min(max(0.1 * 2**s, band), 0.2)
            stages.append(design_halfband(edge))
            band *= 2
        return cls(tuple(stages[:n_pre]), tuple(stages[n_pre:]))


def decimate(stream: sc.SampleStream, factor: int, filter=None, periodic: bool = True) -> sc.SampleStream:
    """Lowpass and keep every ``factor``-th sample, delay-compensated.

    ``filter`` is either one tap set applied before a single downsampling by
    ``factor`` or a sequence of tap sets, one per by-two stage. With
    ``periodic=True`` the record is filtered circularly, which keeps coherent
    test captures free of edge transients.
    """
    if factor < 1 or factor & (factor - 1):
        raise ValueError("factor must be a power of two")
    if factor == 1:
        return stream
    if filter is None:
        filter = DecimationSpec.default(osr=factor, pre_factor=factor).pre
    stages = [filter] if np.ndim(filter[0]) == 0 else list(filter)
    per_stage = factor if len(stages) == 1 else 2
    if per_stage ** len(stages) != factor:
        raise ValueError("filter stages do not multiply to the requested factor")
    y = np.asarray(stream.samples, dtype=float)
    rate = stream.rate
    for taps in stages:
        h = np.asarray(taps, dtype=float)
        if y.size < h.size:
            raise ValueError("stream shorter than the filter")
        y = _fir(y, h, periodic)[::per_stage]
        rate /= per_stage
    return sc.SampleStream(y, rate, stream.label + f"_dec{factor}", stream.full_scale)


def _fir(x: np.ndarray, h: np.ndarray, periodic: bool) -> np.ndarray:
    delay = (h.size - 1) // 2
    if periodic:
        n = x.size
        ext = np.concatenate((x[n - delay:], x, x[:h.size - 1 - delay])) if delay else x
        return np.convolve(ext, h, mode="valid")
    return np.convolve(x, h)[delay: delay + x.size]


def correct(d: sc.SampleStream, corrector, dec: DecimationSpec,
            stats: CorrectionStats | None = None, keep_intermediate: bool = False):
    """Pre-decimate, correct, post-decimate.

    ``corrector`` is a :class:`CorrectionLUT` (bit-accurate path) or an
    :class:`NlModel` (floating-point path). With ``keep_intermediate`` the
    corrected stream at the intermediate rate is returned as well.
    """
    pre = decimate(d, dec.pre_factor, dec.pre) if dec.pre else d
    if isinstance(corrector, CorrectionLUT):
        mid = apply_lut(pre, corrector, stats)
    elif isinstance(corrector, NlModel):
        mid = apply_model(pre, corrector)
    else:
        raise TypeError("corrector must be a CorrectionLUT or NlModel")
    out = decimate(mid, dec.post_factor, dec.post) if dec.post else mid
    return (out, mid) if keep_intermediate else out


@dataclass
class CalibrationRun:
    model: NlModel
    lut: CorrectionLUT
    dec: DecimationSpec
    capture: sc.SampleStream = field(repr=False)
    pre: sc.SampleStream = field(repr=False)
    fit: sc.SineFit


def calibrate(capture: sc.SampleStream, f_guess: float, orders=(5, 5, 2), osr: int = 16,
              pre_factor: int = 4, n_harmonics: int = 9) -> CalibrationRun:
    """Fit the distortion model on a partially decimated single-tone capture."""
    dec = DecimationSpec.default(osr, pre_factor)
    pre = decimate(capture, dec.pre_factor, dec.pre) if dec.pre else capture
    fit = sc.sine_fit(pre, f_guess)
    parts = sc.decompose(pre, fit, n_harmonics=n_harmonics)
    model = fit_nl(parts.d_cl, parts.dist, orders)
    return CalibrationRun(model, build_lut(model), dec, capture, pre, fit)


# --------------------------------------------------------------------------
# persistence


def save_model(model: NlModel, path, lut: CorrectionLUT | None = None,
               decimation: dict | None = None) -> Path:
    """JSON document with the model and, optionally, its LUTs and the
    ``{"osr", "pre_factor"}`` decimation it was fitted for."""
    path = Path(path)
    doc = {"model": model.to_dict()}
    if lut is not None:
        doc["lut"] = lut.to_dict()
    if decimation is not None:
        doc["decimation"] = {"osr": int(decimation["osr"]), "pre_factor": int(decimation["pre_factor"])}
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_model(path) -> tuple[NlModel, CorrectionLUT | None]:
    doc = json.loads(Path(path).read_text())
    if "model" not in doc:
        raise CalibrationError(f"{path}: no model section")
    model = NlModel.from_dict(doc["model"])
    lut = CorrectionLUT.from_dict(doc["lut"]) if "lut" in doc else None
    return model, lut


def read_decimation(path) -> dict | None:
    return json.loads(Path(path).read_text()).get("decimation")


def write_lut_hex(lut: CorrectionLUT, stem) -> tuple[Path, Path]:
    """Two 512-line files of 14-bit two's-complement hex words."""
    stem = Path(stem)
    paths = []
    for name, table in (("a", lut.lut_a), ("b", lut.lut_b)):
        p = stem.with_name(f"{stem.name}_lut_{name}.hex")
        words = (np.asarray(table) & ((1 << WORD_BITS) - 1)).tolist()
        p.write_text("".join(f"{w:04x}\n" for w in words))
        paths.append(p)
    return paths[0], paths[1]


def read_lut_hex(path) -> np.ndarray:
    words = [int(line, 16) for line in Path(path).read_text().split()]
    if len(words) != LUT_SIZE:
        raise CalibrationError(f"{path}: expected {LUT_SIZE} words, found {len(words)}")
    w = np.asarray(words, dtype=np.int64)
    return np.where(w >= 1 << FRAC_BITS, w - (1 << WORD_BITS), w)
