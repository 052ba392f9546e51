"""PNG figures for experiment results (headless matplotlib)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_theory(rows, path) -> Path:
    osr, single, mash = np.asarray(rows, dtype=float).T
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogx(osr, single, "o-", base=2, label="single stage")
    ax.semilogx(osr, mash, "s-", base=2, label="1-1 MASH")
    ax.set_xlabel("OSR")
    ax.set_ylabel("SQNR (dB)")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_spectrum(spec, path, title: str = "", band_edge: float | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    f = spec.bin_freqs[1:]
    ax.semilogx(f, spec.power_db[1:], lw=0.6)
    if band_edge:
        ax.axvline(band_edge, color="k", ls="--", lw=0.8)
    ax.set_xlabel("frequency (Hz)")
    ax.set_ylabel("power (dBFS)")
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)


def plot_bars(values: dict, path, ylabel: str = "SNR (dB)") -> Path:
    names = list(values)
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 4))
    bars = ax.bar(names, [values[n] for n in names])
    ax.bar_label(bars, fmt="%.1f")
    lo = min(values.values())
    ax.set_ylim(lo - 10, max(values.values()) + 5)
    ax.set_ylabel(ylabel)
    return _save(fig, path)


def plot_sweep(rows, columns, path) -> Path:
    data = np.asarray(rows, dtype=float)
    order = np.argsort(data[:, 0])
    data = data[order]
    fig, ax = plt.subplots(figsize=(6, 4))
    for j, name in enumerate(columns[1:], start=1):
        ax.plot(data[:, 0], data[:, j], "o-", label=name)
    if columns[0] == "n_phi1":
        ax.set_xscale("log", base=2)
    ax.set_xlabel(columns[0])
    ax.set_ylabel("dB")
    ax.grid(True, alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_calibration(before, after, path, band_edge: float | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(before.bin_freqs, before.power_db, lw=0.6, label="uncalibrated")
    ax.plot(after.bin_freqs, after.power_db, lw=0.6, label="calibrated (LUT)")
    if band_edge:
        ax.set_xlim(0, 1.2 * band_edge)
        ax.axvline(band_edge, color="k", ls="--", lw=0.8)
    ax.set_xlabel("frequency (Hz)")
    ax.set_ylabel("power (dBFS)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, path)
