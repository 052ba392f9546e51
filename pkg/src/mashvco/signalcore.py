"""Waveforms, spectra, ADC metrics and sine-fit decomposition."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FLOOR_DB = -200.0


class FitError(RuntimeError):
    pass


@dataclass
class SampleStream:
    """Uniformly sampled sequence.

    ``full_scale`` is the peak amplitude of a sine that reads 0 dBFS.
    """

    samples: np.ndarray
    rate: float
    label: str = ""
    full_scale: float = 1.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("stream must be a non-empty 1-D sequence")
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("stream contains non-finite samples")

    def __len__(self):
        return self.samples.size

    def with_samples(self, samples, label: str | None = None, rate: float | None = None):
        return SampleStream(samples, self.rate if rate is None else rate,
                            self.label if label is None else label, self.full_scale)


@dataclass
class Spectrum:
    bin_freqs: np.ndarray
    power: np.ndarray  # linear, relative to full-scale sine power
    n_fft: int
    n_avg: int
    window: str
    rate: float

    @property
    def power_db(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.maximum(10 * np.log10(self.power), FLOOR_DB)

    @property
    def enbw(self) -> float:
        return 1.5 if self.window == "hann" else 1.0

    @property
    def tone_halfwidth(self) -> int:
        return 2 if self.window == "hann" else 1


@dataclass(frozen=True)
class Metrics:
    snr_db: float
    sndr_db: float
    sfdr_db: float
    thd_db: float
    enob_bits: float
    band_hz: float
    n_harmonics: int
    signal_dbfs: float = float("nan")

    def to_dict(self) -> dict:
        return {k: float(v) if isinstance(v, (float, np.floating)) else v
                for k, v in self.__dict__.items()}


@dataclass
class SineFit:
    amplitude: float
    frequency: float
    phase: float
    offset: float
    iterations: int = 0

    def evaluate(self, n: int, rate: float) -> np.ndarray:
        t = np.arange(n) / rate
        return self.offset + self.amplitude * np.sin(2 * np.pi * self.frequency * t + self.phase)


@dataclass
class Decomposition:
    d_sig: SampleStream
    dist: SampleStream
    noise: SampleStream
    d_cl: SampleStream
    harmonic_amplitudes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    frequency: float = float("nan")


def generate_tone_sum(tones, rate: float, n: int, offset: float = 0.0, label: str = "stimulus",
                      full_scale: float = 1.0) -> SampleStream:
    """``offset + sum(amp * sin(2*pi*freq*k/rate + phase))``."""
    if n <= 0:
        raise ValueError("n must be positive")
    k = np.arange(n)
    x = np.full(n, float(offset))
    for amp, freq, phase in tones:
        if not 0 <= freq < rate / 2:
            raise ValueError(f"tone at {freq} Hz aliases at rate {rate} Hz")
        x += amp * np.sin(2 * np.pi * freq * k / rate + phase)
    return SampleStream(x, rate, label, full_scale)


def coherent_bin_frequency(target: float, rate: float, n_fft: int) -> float:
    """Nearest frequency on an odd FFT bin (odd bins are coprime with 2**m)."""
    if not 0 < target < rate / 2:
        raise ValueError("target must lie in (0, rate/2)")
    if n_fft & (n_fft - 1):
        raise ValueError("n_fft must be a power of two")
    b = int(round(target * n_fft / rate))
    if b % 2 == 0:
        b += 1
    return b * rate / n_fft


def spectrum(stream: SampleStream, n_fft: int | None = None, n_avg: int = 1,
             window: str = "rectangular") -> Spectrum:
    """Averaged one-sided periodogram normalized to full-scale sine power.

    Bin values are mean-square contributions divided by ``full_scale**2 / 2``
    so that a coherent full-scale sine reads 0 dBFS and, for the rectangular
    window, the bins sum to the stream's mean square.
    """
    n_fft = len(stream) if n_fft is None else n_fft
    if len(stream) < n_fft * n_avg:
        raise ValueError(f"need {n_fft * n_avg} samples, have {len(stream)}")
    if window == "rectangular":
        w = np.ones(n_fft)
    elif window == "hann":
        w = np.hanning(n_fft + 1)[:-1]
    else:
        raise ValueError(f"unknown window {window!r}")
    segs = stream.samples[: n_fft * n_avg].reshape(n_avg, n_fft)
    X = np.fft.rfft(segs * w, axis=1)
    ms = 2.0 * np.abs(X) ** 2 / np.sum(w) ** 2
    ms[:, 0] /= 2.0
    if n_fft % 2 == 0:
        ms[:, -1] /= 2.0
    p = ms.mean(axis=0) / (stream.full_scale**2 / 2)
    freqs = np.arange(p.size) * stream.rate / n_fft
    return Spectrum(freqs, p, n_fft, n_avg, window, stream.rate)


def _alias_bin(f: float, rate: float, n_fft: int) -> int:
    fa = np.mod(f, rate)
    if fa > rate / 2:
        fa = rate - fa
    return int(round(fa * n_fft / rate))


def metrics(spec: Spectrum, f_sig: float, osr: int = 1, n_harmonics: int = 5) -> Metrics:
    """SNR / SNDR / SFDR / THD / ENOB inside ``(0, rate / (2 * osr)]``.

    DC and the signal (+/- ``tone_halfwidth`` bins) are excluded from the noise;
    SNR also excludes harmonics 2..n_harmonics that land in band.
    """
    band = spec.rate / (2 * osr)
    if not 0 < f_sig <= band:
        raise ValueError(f"f_sig={f_sig} outside band (0, {band}]")
    if n_harmonics < 2:
        raise ValueError("n_harmonics must be >= 2")
    n_fft = spec.n_fft
    hw = spec.tone_halfwidth
    p = spec.power / spec.enbw
    last = int(np.floor(band * n_fft / spec.rate))
    inband = np.zeros(p.size, dtype=bool)
    inband[1 : last + 1] = True
    inband[: hw + 1] = False  # DC and its skirt
    sb = _alias_bin(f_sig, spec.rate, n_fft)
    sig_mask = np.zeros(p.size, dtype=bool)
    sig_mask[max(sb - hw, 0) : sb + hw + 1] = True
    p_sig = float(np.sum(p[sig_mask]))
    harm_mask = np.zeros(p.size, dtype=bool)
    for h in range(2, n_harmonics + 1):
        hb = _alias_bin(h * f_sig, spec.rate, n_fft)
        if hb <= last and abs(hb - sb) > hw:
            harm_mask[max(hb - hw, 0) : hb + hw + 1] = True
    harm_mask &= inband & ~sig_mask
    nd_mask = inband & ~sig_mask
    p_nd = float(np.sum(p[nd_mask]))
    p_harm = float(np.sum(p[harm_mask]))
    p_noise = p_nd - p_harm
    tiny = 1e-300
    sndr = 10 * np.log10(p_sig / max(p_nd, tiny))
    snr = 10 * np.log10(p_sig / max(p_noise, tiny))
    spur = p[nd_mask]
    if spur.size:
        # group bins into tone-width clusters so a spur's skirt counts once
        spur_max = float(np.max(spur)) * (2 * hw + 1 if spec.window == "hann" else 1)
    else:
        spur_max = tiny
    sfdr = 10 * np.log10(p_sig / max(spur_max, tiny))
    thd = 10 * np.log10(max(p_harm, tiny) / p_sig)
    return Metrics(
        snr_db=float(snr),
        sndr_db=float(sndr),
        sfdr_db=float(sfdr),
        thd_db=float(thd),
        enob_bits=float((sndr - 1.76) / 6.02),
        band_hz=float(band),
        n_harmonics=n_harmonics,
        signal_dbfs=float(10 * np.log10(max(p_sig, tiny))),
    )


# --------------------------------------------------------------------------
# sine fitting


def _three_param(y, t, f):
    w = 2 * np.pi * f * t
    A = np.column_stack((np.cos(w), np.sin(w), np.ones_like(t)))
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef


def sine_fit(stream: SampleStream, f_guess: float, tol: float = 1e-12, max_iter: int = 30) -> SineFit:
    """Four-parameter least-squares sine fit (IEEE 1057 style).

    A three-parameter fit at ``f_guess`` seeds Gauss-Newton iterations on
    (cos, sin, offset, frequency); stops when the relative frequency update
    drops below ``tol``.
    """
    y = stream.samples
    n = y.size
    t = np.arange(n) / stream.rate
    if f_guess <= 0 or f_guess >= stream.rate / 2:
        raise ValueError("f_guess must lie in (0, rate/2)")
    if n < 4 * stream.rate / f_guess:
        raise ValueError("stream must span at least four periods of f_guess")
    a, b, c = _three_param(y, t, f_guess)
    if np.hypot(a, b) <= 1e-12 * max(1.0, np.max(np.abs(y))):
        raise FitError("degenerate capture: no sinusoidal component")
    f = f_guess
    for it in range(1, max_iter + 1):
        w = 2 * np.pi * f * t
        cw, sw = np.cos(w), np.sin(w)
        resid = y - (a * cw + b * sw + c)
        A_full = np.column_stack((cw, sw, np.ones(n), 2 * np.pi * t * (-a * sw + b * cw)))
        delta, *_ = np.linalg.lstsq(A_full, resid, rcond=None)
        a, b, c = a + delta[0], b + delta[1], c + delta[2]
        df = delta[3]
        f = f + df
        if not 0 < f < stream.rate / 2:
            raise FitError("frequency iteration left (0, rate/2)")
        if abs(df) / f < tol:
            break
    else:
        raise FitError(f"sine fit did not converge in {max_iter} iterations")
    a, b, c = _three_param(y, t, f)
    amp = float(np.hypot(a, b))
    if amp == 0.0:
        raise FitError("zero amplitude")
    # a*cos + b*sin = amp*sin(w + phase)
    phase = float(np.arctan2(a, b))
    return SineFit(amp, float(f), phase, float(c), it)


def _harmonic_basis(t, f, n_harmonics):
    w = 2 * np.pi * f * t
    cols = [np.ones_like(t)]
    for h in range(1, n_harmonics + 1):
        cols += [np.cos(h * w), np.sin(h * w)]
    return np.column_stack(cols)


def decompose(stream: SampleStream, fit: SineFit, n_harmonics: int = 5,
              tol: float = 1e-12, max_iter: int = 30) -> Decomposition:
    """Split into fundamental, harmonic distortion and residue.

    Starting from ``fit``, the frequency is re-estimated jointly with
    harmonics 2..n_harmonics: a fundamental-only fit is pulled off the true
    frequency by the harmonics it does not model. ``d_sig`` carries the
    fundamental plus offset, ``dist`` the harmonics and ``noise`` the rest;
    ``d_cl = stream - noise``.
    """
    y = stream.samples
    n = y.size
    rate = stream.rate
    t = np.arange(n) / rate
    f = fit.frequency
    fund = abs(((f + rate / 2) % rate) - rate / 2)
    for h in range(2, n_harmonics + 1):
        fa = abs(((h * f + rate / 2) % rate) - rate / 2)
        if abs(fa - fund) < rate / n or fa < rate / n:
            raise ValueError(f"harmonic {h} aliases onto the fundamental or DC")
    nh = max(n_harmonics, 1)
    if n_harmonics >= 2:
        for _ in range(max_iter):
            A = _harmonic_basis(t, f, nh)
            coef, *_ = np.linalg.lstsq(A, y, rcond=None)
            w = 2 * np.pi * f * t
            dfun = sum(h * 2 * np.pi * t * (-coef[2 * h - 1] * np.sin(h * w) + coef[2 * h] * np.cos(h * w))
                       for h in range(1, nh + 1))
            delta, *_ = np.linalg.lstsq(np.column_stack((A, dfun)), y - A @ coef, rcond=None)
            f = f + delta[-1]
            if not 0 < f < rate / 2:
                raise FitError("frequency refinement left (0, rate/2)")
            if abs(delta[-1]) / f < tol:
                break
        else:
            raise FitError(f"harmonic fit did not converge in {max_iter} iterations")
    A = _harmonic_basis(t, f, nh)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    d_sig = A[:, :3] @ coef[:3]
    dist = A[:, 3:] @ coef[3:] if n_harmonics >= 2 else np.zeros(n)
    amps = np.hypot(coef[3::2], coef[4::2]) if n_harmonics >= 2 else np.zeros(0)
    noise = y - d_sig - dist
    return Decomposition(
        d_sig=stream.with_samples(d_sig, "d_sig"),
        dist=stream.with_samples(dist, "dist"),
        noise=stream.with_samples(noise, "r"),
        d_cl=stream.with_samples(y - noise, "d_cl"),
        harmonic_amplitudes=amps,
        frequency=float(f),
    )


# --------------------------------------------------------------------------
# persistence


def write_csv(stream: SampleStream, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(f"# label={stream.label}\n# rate={stream.rate!r}\n# full_scale={stream.full_scale!r}\n")
        for v in stream.samples:
            fh.write(f"{float(v)!r}\n")
    return path


def read_csv(path, rate: float | None = None) -> SampleStream:
    meta = {}
    values = []
    with open(path) as fh:
        for line in fh:
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                key, _, val = s[1:].strip().partition("=")
                meta[key.strip()] = val.strip()
                continue
            try:
                values.append(float(s.split(",")[0]))
            except ValueError:
                continue  # plain header row
    r = rate if rate is not None else float(meta.get("rate", "nan"))
    if not np.isfinite(r):
        raise ValueError(f"{path}: no rate in header and none given")
    return SampleStream(np.array(values), r, meta.get("label", Path(path).stem),
                        float(meta.get("full_scale", 1.0)))


def write_raw(stream: SampleStream, path) -> tuple[Path, Path]:
    path = Path(path)
    stream.samples.astype("<f8").tofile(path)
    side = path.with_suffix(path.suffix + ".json")
    side.write_text(json.dumps({
        "label": stream.label, "rate": stream.rate, "full_scale": stream.full_scale,
        "dtype": "<f8", "n": len(stream),
    }, indent=2))
    return path, side


def read_raw(path) -> SampleStream:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.fromfile(path, dtype="<f8")
    if data.size != meta["n"]:
        raise ValueError(f"{path}: expected {meta['n']} samples, found {data.size}")
    return SampleStream(data, meta["rate"], meta["label"], meta.get("full_scale", 1.0))


def spectrum_csv(spec: Spectrum, path) -> Path:
    path = Path(path)
    np.savetxt(path, np.column_stack((spec.bin_freqs, spec.power_db)), delimiter=",",
               header="freq_hz,power_dbfs", comments="")
    return path
