"""Closed-form SQNR limits of single-stage and 1-1 MASH VCO ADCs."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class TheoryParams:
    fs: float = 3.5e9
    osr: float = 16
    n_phi1: int = 32
    n_phi2: int = 32
    f_range1: float = 1.21e9
    f_range2: float = 1.57e9
    f0_1: float = 1.0e9
    f0_2: float = 0.9e9
    amplitude_fraction: float = 1.0

    def __post_init__(self):
        for name in ("fs", "n_phi1", "n_phi2", "f_range1", "f_range2", "f0_1", "f0_2",
                     "amplitude_fraction"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.osr < 1:
            raise ValueError("osr must be >= 1")


def _amp_db(p: TheoryParams) -> float:
    return 20 * math.log10(p.amplitude_fraction)


def sqnr_mash(p: TheoryParams) -> float:
    """Second-order limit with white ``Q2`` uniform over one phase step."""
    ratio = p.n_phi2 * p.f_range1 * p.f_range2 / p.fs**2
    return 6.02 * math.log2(ratio) + 50 * math.log10(p.osr) + 0.9052 + _amp_db(p)


def sqnr_single(p: TheoryParams) -> float:
    """First-order limit of one VCO stage counting both edge polarities."""
    p_sig = (p.n_phi1 * p.f_range1) ** 2 / (2 * p.fs**2)
    p_q = (1 / 12) * math.pi**2 / (3 * p.osr**3)
    return 10 * math.log10(p_sig / p_q) + _amp_db(p)


def sqnr_curve(p: TheoryParams, osr_values) -> list[tuple[float, float, float]]:
    """``(osr, single, mash)`` rows over the given OSR values."""
    rows = []
    for osr in osr_values:
        if not osr > 0:
            raise ValueError("osr values must be positive")
        q = TheoryParams(**{**p.__dict__, "osr": osr})
        rows.append((float(osr), sqnr_single(q), sqnr_mash(q)))
    return rows


def write_curve_csv(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["osr", "sqnr_single_db", "sqnr_mash_db"])
        for r in rows:
            w.writerow([f"{v:.6g}" for v in r])
    return path


def pfm_sideband_center(n_phi: int, f0: float) -> float:
    """Effective rest frequency ``2 * n_phi * f0`` of the first PFM sideband."""
    if n_phi < 1 or f0 < 0:
        raise ValueError("n_phi must be >= 1 and f0 >= 0")
    return 2.0 * n_phi * f0
