"""Two-sample Kolmogorov-Smirnov statistic and the critical-value decision rule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_ALPHA = 0.05


class KsError(ValueError):
    pass


def _sample(values, name: str) -> np.ndarray:
    x = np.asarray(getattr(values, "samples", values), dtype=float).ravel()
    if len(x) == 0:
        raise KsError(f"sample {name} is empty")
    if not np.isfinite(x).all():
        raise KsError(f"sample {name} contains non-finite values")
    return x


@dataclass(frozen=True)
class Ecdf:
    sorted_values: np.ndarray

    @classmethod
    def of(cls, values) -> "Ecdf":
        return cls(np.sort(_sample(values, "values")))

    @property
    def n(self) -> int:
        return len(self.sorted_values)

    def __call__(self, x):
        """F(x) = #{v <= x} / n."""
        return np.searchsorted(self.sorted_values, x, side="right") / self.n


def ks_statistic(a, b) -> float:
    """sup_x |F_a(x) - F_b(x)| by a merged sweep over both sorted samples.

    Ties are handled by evaluating the gap only after all copies of a value
    have been consumed from both samples.
    """
    xa = np.sort(_sample(a, "a"))
    xb = np.sort(_sample(b, "b"))
    grid = np.concatenate([xa, xb])
    fa = np.searchsorted(xa, grid, side="right") / len(xa)
    fb = np.searchsorted(xb, grid, side="right") / len(xb)
    return float(np.max(np.abs(fa - fb)))


def ks_c(alpha: float) -> float:
    if not 0 < alpha < 1:
        raise KsError(f"alpha must be in (0, 1), got {alpha}")
    return math.sqrt(-0.5 * math.log(alpha))


def ks_critical(alpha: float, n: int, m: int) -> float:
    if n < 1 or m < 1:
        raise KsError(f"sample sizes must be >= 1, got n={n}, m={m}")
    return ks_c(alpha) * math.sqrt((n + m) / (n * m))


@dataclass(frozen=True)
class KsDecision:
    d_nm: float
    threshold: float
    alpha: float
    reject_null: bool
    n: int
    m: int


def ks_decide(a, b, alpha: float = DEFAULT_ALPHA) -> KsDecision:
    """reject_null means the samples look drawn from different distributions."""
    xa = _sample(a, "a")
    xb = _sample(b, "b")
    d = ks_statistic(xa, xb)
    thr = ks_critical(alpha, len(xa), len(xb))
    return KsDecision(d, thr, alpha, d > thr, len(xa), len(xb))
