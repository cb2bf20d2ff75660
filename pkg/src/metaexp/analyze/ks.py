"""Two-sample Kolmogorov-Smirnov test with the asymptotic p-value."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from metaexp.errors import EmptySample

SERIES_TOL = 1e-12


@dataclass(frozen=True)
class KSResult:
    statistic: float
    p_value: float
    n_a: int
    n_b: int

    def to_dict(self) -> dict:
        return {"D": self.statistic, "p_value": self.p_value, "n_a": self.n_a, "n_b": self.n_b}


def ks_statistic(a, b) -> float:
    """Largest absolute gap between the two empirical CDFs."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    points = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, points, side="right") / len(a)
    cdf_b = np.searchsorted(b, points, side="right") / len(b)
    return float(np.max(np.abs(cdf_a - cdf_b)))


def kolmogorov_sf(lam: float) -> float:
    """P(K > lam) for the limiting Kolmogorov distribution."""
    if lam <= 0:
        return 1.0
    if lam < 1.18:
        # Jacobi-transformed series converges fast for small lam
        c = math.sqrt(2 * math.pi) / lam
        total, k = 0.0, 1
        while True:
            term = math.exp(-((2 * k - 1) ** 2) * math.pi**2 / (8 * lam * lam))
            total += term
            if term < SERIES_TOL:
                break
            k += 1
        return min(1.0, max(0.0, 1.0 - c * total))
    total, k = 0.0, 1
    while True:
        term = math.exp(-2 * k * k * lam * lam)
        total += term if k % 2 else -term
        if term < SERIES_TOL:
            break
        k += 1
    return min(1.0, max(0.0, 2 * total))


def ks_test(sample_a, sample_b) -> KSResult:
    a = np.asarray(sample_a, dtype=float).ravel()
    b = np.asarray(sample_b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise EmptySample("both samples must be non-empty")
    d = ks_statistic(a, b)
    n_eff = a.size * b.size / (a.size + b.size)
    p = kolmogorov_sf(math.sqrt(n_eff) * d)
    return KSResult(d, max(p, math.ulp(0.0)), a.size, b.size)
