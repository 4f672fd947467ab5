"""Chunking of scan-cycle series and time/frequency feature extraction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_CHUNK = 120
MAG_FLOOR = 1e-12

FEATURE_NAMES = (
    "mean",
    "std_dev",
    "mean_abs_dev",
    "skewness",
    "kurtosis",
    "spec_std_dev",
    "spec_centroid",
    "dc_component",
    "spec_crest",
    "smoothness",
    "spec_flatness",
    "spec_skewness",
    "spec_kurtosis",
)


class FeatureError(ValueError):
    pass


def chunk(series, size: int = DEFAULT_CHUNK) -> list[np.ndarray]:
    """Split into consecutive non-overlapping windows; the remainder is dropped."""
    if size < 4:
        raise FeatureError(f"chunk size must be >= 4, got {size}")
    values = np.asarray(getattr(series, "samples", series), dtype=float)
    n = len(values) // size
    return [values[i * size:(i + 1) * size] for i in range(n)]


# ---------------------------------------------------------------------------
# FFT
# ---------------------------------------------------------------------------

def _fft_pow2(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT; len(x) must be a power of two."""
    n = len(x)
    if n & (n - 1):
        raise FeatureError(f"radix-2 FFT needs a power-of-two length, got {n}")
    levels = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(levels):
        rev |= ((idx >> b) & 1) << (levels - 1 - b)
    a = np.asarray(x, dtype=complex)[rev]
    half = 1
    while half < n:
        tw = np.exp(-2j * np.pi * np.arange(half) / (2 * half))
        a = a.reshape(-1, 2 * half)
        even = a[:, :half].copy()
        odd = a[:, half:] * tw
        a[:, :half] = even + odd
        a[:, half:] = even - odd
        a = a.reshape(-1)
        half *= 2
    return a


def _ifft_pow2(x: np.ndarray) -> np.ndarray:
    return np.conj(_fft_pow2(np.conj(x))) / len(x)


def fft(values) -> np.ndarray:
    """Exact N-point DFT for any N via Bluestein's chirp-z over a radix-2 FFT."""
    x = np.asarray(values, dtype=complex)
    n = len(x)
    if n == 0:
        raise FeatureError("empty input")
    if n & (n - 1) == 0:
        return _fft_pow2(x)
    m = 1 << (2 * n - 1).bit_length()
    k = np.arange(n)
    # k^2 mod 2n keeps the chirp phase accurate for large k
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    a = np.zeros(m, dtype=complex)
    a[:n] = x * chirp
    b = np.zeros(m, dtype=complex)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:])[::-1]
    conv = _ifft_pow2(_fft_pow2(a) * _fft_pow2(b))
    return chirp * conv[:n]


def dft_magnitudes(values) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(freqs, mags)`` with freqs in cycles/sample (i/N)."""
    x = np.asarray(values, dtype=float)
    n = len(x)
    if n < 1:
        raise FeatureError("dft_magnitudes needs at least one value")
    return np.arange(n) / n, np.abs(fft(x))


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureVector:
    mean: float
    std_dev: float
    mean_abs_dev: float
    skewness: float
    kurtosis: float
    spec_std_dev: float
    spec_centroid: float
    dc_component: float
    spec_crest: float
    smoothness: float
    spec_flatness: float
    spec_skewness: float
    spec_kurtosis: float
    label: int | None = None
    degenerate: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=float)

    def with_label(self, label) -> "FeatureVector":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals["label"] = label
        return FeatureVector(**vals)


def extract_features(values, label=None) -> FeatureVector:
    x = np.asarray(values, dtype=float)
    n = len(x)
    if n < 4:
        raise FeatureError(f"chunk must have at least 4 values, got {n}")
    if not np.isfinite(x).all():
        raise FeatureError("chunk contains non-finite values")

    mean = float(np.mean(x))
    dev = x - mean
    std = float(np.sqrt(np.sum(dev**2) / (n - 1)))
    mad = float(np.mean(np.abs(dev)))
    degenerate = std == 0.0 or std < 1e-12 * max(1.0, abs(mean))
    if degenerate:
        skew = kurt = 0.0
    else:
        z = dev / std
        skew = float(np.mean(z**3))
        kurt = float(np.mean(z**4) - 3.0)

    yf, ym = dft_magnitudes(x)
    msum = float(np.sum(ym))
    centroid = float(np.sum(yf * ym) / msum) if msum > 0 else 0.0
    spec_std = float(np.sqrt(np.sum(yf**2 * ym) / msum)) if msum > 0 else 0.0
    mfl = np.maximum(ym, MAG_FLOOR)
    crest = float(np.max(ym) / centroid) if centroid > 0 else 0.0
    db = 20.0 * np.log10(mfl)
    smooth = float(np.sum(np.abs(db[1:-1] - (db[:-2] + db[1:-1] + db[2:]) / 3.0)))
    flat = float(np.exp(np.mean(np.log(mfl))) / np.mean(mfl))
    flat = min(max(flat, 0.0), 1.0)
    if spec_std > 0:
        sskew = float(np.sum((ym - centroid) ** 3 * ym) / spec_std**3)
        skurt = float(np.sum((ym - centroid) ** 4 * ym) / spec_std**4 - 3.0)
    else:
        sskew = skurt = 0.0
    if degenerate:
        log.debug("degenerate chunk (zero variance): skewness/kurtosis set to 0")
    return FeatureVector(
        mean=mean,
        std_dev=std,
        mean_abs_dev=mad,
        skewness=skew,
        kurtosis=kurt,
        spec_std_dev=spec_std,
        spec_centroid=centroid,
        dc_component=float(ym[0]),
        spec_crest=crest,
        smoothness=smooth,
        spec_flatness=flat,
        spec_skewness=sskew,
        spec_kurtosis=skurt,
        label=label,
        degenerate=degenerate,
    )


def featurize_series(series, size: int = DEFAULT_CHUNK, label=None) -> list[FeatureVector]:
    return [extract_features(c, label) for c in chunk(series, size)]


def feature_matrix(vectors: Sequence[FeatureVector]) -> np.ndarray:
    if not vectors:
        return np.empty((0, len(FEATURE_NAMES)))
    return np.vstack([v.as_array() for v in vectors])


def information_value(feature_values, binary_labels, n_bins: int = 10) -> float:
    """Information Value of one feature for a two-class split.

    Equal-frequency bins over the pooled values; class-conditional bin
    fractions are Laplace-smoothed with 0.5 counts.
    """
    v = np.asarray(feature_values, dtype=float)
    y = np.asarray(binary_labels)
    classes = np.unique(y)
    if len(classes) != 2:
        raise FeatureError(f"information_value needs exactly two label classes, got {len(classes)}")
    if n_bins < 2:
        raise FeatureError("n_bins must be >= 2")
    good = y == classes[1]
    edges = np.unique(np.quantile(v, np.linspace(0, 1, n_bins + 1)[1:-1]))
    bins = np.searchsorted(edges, v, side="right")
    nb = len(edges) + 1
    g = np.bincount(bins[good], minlength=nb) + 0.5
    b = np.bincount(bins[~good], minlength=nb) + 0.5
    fg = g / g.sum()
    fb = b / b.sum()
    return float(np.sum((fg - fb) * np.log(fg / fb)))


def information_values(vectors: Sequence[FeatureVector], target, n_bins: int = 10) -> dict[str, float]:
    """IV of every feature for ``label == target`` versus the rest."""
    X = feature_matrix(vectors)
    y = np.array([v.label == target for v in vectors])
    return {name: information_value(X[:, i], y, n_bins) for i, name in enumerate(FEATURE_NAMES)}


def save_features(vectors: Sequence[FeatureVector], path) -> None:
    lines = [",".join(FEATURE_NAMES + ("label",))]
    for v in vectors:
        row = [repr(float(x)) for x in v.as_array()]
        row.append("" if v.label is None else str(v.label))
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_features(path) -> list[FeatureVector]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    if tuple(header) != FEATURE_NAMES + ("label",):
        raise FeatureError(f"{path}: unexpected header")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        try:
            vals = [float(p) for p in parts[:-1]]
        except ValueError:
            raise FeatureError(f"{path}: line {lineno}: bad number") from None
        label = int(parts[-1]) if parts[-1] else None
        out.append(FeatureVector(*vals, label=label))
    return out

