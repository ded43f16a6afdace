"""Effect-estimation error metrics and replicate summaries."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import LengthMismatch


def _triple(y0, y1, ite_hat):
    y0 = np.asarray(y0, dtype=float).reshape(-1)
    y1 = np.asarray(y1, dtype=float).reshape(-1)
    e = np.asarray(ite_hat, dtype=float).reshape(-1)
    if not (y0.shape == y1.shape == e.shape):
        raise LengthMismatch(f"lengths {y0.shape[0]}, {y1.shape[0]}, {e.shape[0]} differ")
    if e.size == 0:
        raise LengthMismatch("empty input")
    return y1 - y0, e


def sqrt_pehe(y0_true, y1_true, ite_hat) -> float:
    """Root mean squared error between true and estimated individual effects."""
    t, e = _triple(y0_true, y1_true, ite_hat)
    return float(np.sqrt(np.mean((t - e) ** 2)))


def ate_error(y0_true, y1_true, ite_hat) -> float:
    """Absolute error of the average effect."""
    t, e = _triple(y0_true, y1_true, ite_hat)
    return float(abs(np.mean(t) - np.mean(e)))


def mean_se(values: Sequence[float]) -> Tuple[float, Optional[float]]:
    """Mean and standard error; the error is None with fewer than two values."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), None
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size >= 2 else None
    return float(v.mean()), se


@dataclass(frozen=True)
class MetricResult:
    """Per-replicate metric values with their summaries."""

    sqrt_pehe: Tuple[float, ...]
    ate_error: Tuple[float, ...]

    def __post_init__(self):
        p = tuple(float(v) for v in self.sqrt_pehe)
        a = tuple(float(v) for v in self.ate_error)
        if len(p) != len(a):
            raise LengthMismatch("metric vectors must have one value per replicate")
        if not all(math.isfinite(v) and v >= 0 for v in p + a):
            raise ValueError("metric values must be finite and non-negative")
        object.__setattr__(self, "sqrt_pehe", p)
        object.__setattr__(self, "ate_error", a)

    @property
    def n(self) -> int:
        return len(self.sqrt_pehe)

    @property
    def pehe_mean(self) -> float:
        return mean_se(self.sqrt_pehe)[0]

    @property
    def pehe_se(self) -> Optional[float]:
        return mean_se(self.sqrt_pehe)[1]

    @property
    def ate_mean(self) -> float:
        return mean_se(self.ate_error)[0]

    @property
    def ate_se(self) -> Optional[float]:
        return mean_se(self.ate_error)[1]

    def __str__(self) -> str:
        def fmt(m, s):
            return f"{m:.3f}" if s is None else f"{m:.3f} ± {s:.3f}"
        return (f"sqrt_pehe {fmt(self.pehe_mean, self.pehe_se)}  "
                f"ate_error {fmt(self.ate_mean, self.ate_se)}  (n={self.n})")
