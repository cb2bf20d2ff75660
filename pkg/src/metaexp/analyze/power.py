"""Normal quantiles, minimum detectable effects and sample-size scaling."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

from metaexp.errors import DomainError

# Acklam's rational approximation, refined below by Halley steps
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_ppf(p: float) -> float:
    """Inverse standard normal CDF, accurate to about 1e-15 in the bulk."""
    if not 0 < p < 1:
        raise DomainError(f"probability {p} outside (0, 1)")
    if p > 0.5:
        # 1 - p is exact for p in [0.5, 1]
        return -normal_ppf(1.0 - p)
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    else:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    for _ in range(2):
        u = (normal_cdf(x) - p) * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
        x = x - u / (1 + x * u / 2)
    return x


def z_multiplier(power: float = 0.80, confidence: float = 0.95) -> tuple[float, float]:
    """Return ``(z_alpha, z_power)`` for a two-sided test."""
    if not 0 < power < 1:
        raise DomainError(f"power {power} outside (0, 1)")
    if not 0 < confidence < 1:
        raise DomainError(f"confidence {confidence} outside (0, 1)")
    return normal_ppf(1 - (1 - confidence) / 2), normal_ppf(power)


def mde(se: float, power: float = 0.80, confidence: float = 0.95) -> float:
    """Minimum detectable effect for an estimate with standard error ``se``."""
    if se < 0 or not math.isfinite(se):
        raise DomainError("standard error must be finite and non-negative")
    z_alpha, z_power = z_multiplier(power, confidence)
    return (z_alpha + z_power) * se


def required_sample_scale(se_current: float, target_effect: float,
                          power: float = 0.80, confidence: float = 0.95) -> float:
    """Factor by which the sample must grow for ``target_effect`` to be
    detectable, assuming SEs shrink with the square root of sample size."""
    if not se_current > 0:
        raise DomainError("current standard error must be positive")
    if target_effect == 0 or not math.isfinite(target_effect):
        raise DomainError("target effect must be finite and non-zero")
    return (mde(se_current, power, confidence) / abs(target_effect)) ** 2


@dataclass(frozen=True)
class PowerReport:
    mde: dict[str, float]
    z_alpha: float
    z_power: float
    power: float
    confidence: float

    def to_dict(self) -> dict:
        return {"mde": dict(self.mde), "z_alpha": self.z_alpha, "z_power": self.z_power,
                "power": self.power, "confidence": self.confidence}


def power_report(standard_errors: dict[str, float], power: float = 0.80,
                 confidence: float = 0.95, terms: Sequence[str] | None = None) -> PowerReport:
    z_alpha, z_power = z_multiplier(power, confidence)
    terms = list(terms) if terms is not None else list(standard_errors)
    return PowerReport(
        {t: mde(standard_errors[t], power, confidence) for t in terms},
        z_alpha, z_power, power, confidence,
    )
