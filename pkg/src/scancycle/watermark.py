"""Watermark schedules, injection into the control-logic phase, and verification."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping

import numpy as np

from .featurize import DEFAULT_CHUNK
from .ksdetect import KsDecision, ks_decide
from .simnet import ConfigError, PlantConfig, check_watchdog
from .tracestore import TescSeries

DEFAULT_ALPHA_SIG = 0.01


class WatermarkError(ValueError):
    pass


class Kind(str, Enum):
    NONE = "NONE"
    CONSTANT = "CONSTANT"
    RANDOM = "RANDOM"


@dataclass(frozen=True)
class WatermarkSchedule:
    """Per-cycle delay added to a PLC's control logic.

    RANDOM holds each uniform draw from [alpha_min_ms, alpha_max_ms] for a
    dwell drawn uniformly from [dwell_min, dwell_max] cycles.
    """

    kind: Kind = Kind.NONE
    alpha_ms: float = 0.0
    alpha_min_ms: float = 0.0
    alpha_max_ms: float = 0.0
    dwell_min: int = 1
    dwell_max: int = 1
    seed: int = 0
    start_cycle: int = 0
    duration_cycles: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        self.validate()

    @classmethod
    def none(cls) -> "WatermarkSchedule":
        return cls(Kind.NONE)

    @classmethod
    def constant(cls, alpha_ms: float, start_cycle: int = 0, duration_cycles=None) -> "WatermarkSchedule":
        return cls(Kind.CONSTANT, alpha_ms=alpha_ms, start_cycle=start_cycle, duration_cycles=duration_cycles)

    @classmethod
    def random(cls, alpha_min_ms: float, alpha_max_ms: float, dwell_min: int, dwell_max: int, seed: int = 0,
               start_cycle: int = 0, duration_cycles=None) -> "WatermarkSchedule":
        return cls(Kind.RANDOM, alpha_min_ms=alpha_min_ms, alpha_max_ms=alpha_max_ms, dwell_min=dwell_min,
                   dwell_max=dwell_max, seed=seed, start_cycle=start_cycle, duration_cycles=duration_cycles)

    def validate(self, path: str = "/watermark") -> None:
        for name in ("alpha_ms", "alpha_min_ms", "alpha_max_ms"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{path}/{name}", f"must be a finite value >= 0, got {v}")
        if self.kind is Kind.RANDOM:
            if self.alpha_min_ms > self.alpha_max_ms:
                raise ConfigError(f"{path}/alpha_min_ms", "must not exceed alpha_max_ms")
            if not 1 <= self.dwell_min <= self.dwell_max:
                raise ConfigError(f"{path}/dwell_min", "need 1 <= dwell_min <= dwell_max")
        if self.start_cycle < 0:
            raise ConfigError(f"{path}/start_cycle", "must be >= 0")
        if self.duration_cycles is not None and self.duration_cycles < 0:
            raise ConfigError(f"{path}/duration_cycles", "must be >= 0")

    def max_alpha(self) -> float:
        if self.kind is Kind.CONSTANT:
            return self.alpha_ms
        if self.kind is Kind.RANDOM:
            return self.alpha_max_ms
        return 0.0

    def active(self, cycles) -> np.ndarray:
        c = np.asarray(cycles)
        on = c >= self.start_cycle
        if self.duration_cycles is not None:
            on &= c < self.start_cycle + self.duration_cycles
        return on & (self.kind is not Kind.NONE)

    def offsets(self, n_cycles: int) -> np.ndarray:
        """Delay in ms for cycles 0..n_cycles-1; longer calls extend shorter ones."""
        out = np.zeros(n_cycles)
        if self.kind is Kind.NONE or n_cycles <= self.start_cycle:
            return out
        end = n_cycles if self.duration_cycles is None else min(n_cycles, self.start_cycle + self.duration_cycles)
        if self.kind is Kind.CONSTANT:
            out[self.start_cycle:end] = self.alpha_ms
            return out
        rng = np.random.default_rng(self.seed)
        pos = self.start_cycle
        while pos < end:
            a = rng.uniform(self.alpha_min_ms, self.alpha_max_ms)
            dwell = int(rng.integers(self.dwell_min, self.dwell_max + 1))
            out[pos:min(pos + dwell, end)] = a
            pos += dwell
        return out

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value}
        if self.kind is Kind.CONSTANT:
            d["alpha_ms"] = self.alpha_ms
        elif self.kind is Kind.RANDOM:
            d.update(alpha_min_ms=self.alpha_min_ms, alpha_max_ms=self.alpha_max_ms, dwell_min=self.dwell_min,
                     dwell_max=self.dwell_max, seed=self.seed)
        d["start_cycle"] = self.start_cycle
        d["duration_cycles"] = self.duration_cycles
        return d


def schedule_from_dict(data: Mapping, path: str = "/watermark") -> WatermarkSchedule:
    if not isinstance(data, Mapping):
        raise ConfigError(path, "expected an object")
    known = set(WatermarkSchedule.__dataclass_fields__)
    extra = set(data) - known
    if extra:
        raise ConfigError(f"{path}/{sorted(extra)[0]}", "unknown field")
    kind = data.get("kind", "NONE")
    if kind not in Kind.__members__:
        raise ConfigError(f"{path}/kind", f"expected one of {list(Kind.__members__)}, got {kind!r}")
    try:
        return WatermarkSchedule(**data)
    except ConfigError as exc:
        raise ConfigError(path + exc.path.removeprefix("/watermark"), exc.message) from None
    except TypeError as exc:
        raise ConfigError(path, str(exc)) from None


def apply_schedule(config: PlantConfig, plc_id: int, schedule: WatermarkSchedule) -> PlantConfig:
    """Return a config whose PLC ``plc_id`` runs ``schedule`` on its control logic.

    Raises ConfigError if the schedule could push the scan past the watchdog.
    """
    prof = config.profile(plc_id)
    check_watchdog(prof, schedule.max_alpha(), path=f"/watermark/{plc_id}")
    others = tuple((k, s) for k, s in config.schedules if k != plc_id)
    if schedule.kind is Kind.NONE:
        return replace(config, schedules=others)
    return replace(config, schedules=others + ((plc_id, schedule),))


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WatermarkReference:
    """Enrollment series recorded without and with the watermark."""

    baseline: TescSeries
    expected: TescSeries

    def __post_init__(self):
        if len(self.baseline) == 0 or len(self.expected) == 0:
            raise WatermarkError("reference series must be non-empty")

    @property
    def degenerate(self) -> bool:
        """True when the expected series is the baseline (no watermark commanded)."""
        b, e = self.baseline, self.expected
        return len(b) == len(e) and np.array_equal(b.samples, e.samples)

    @property
    def commanded_shift_ms(self) -> float:
        return self.expected.mean() - self.baseline.mean()


class VerifyOutcome(str, Enum):
    AUTHENTIC = "AUTHENTIC"
    SPOOFED = "SPOOFED"
    INCONCLUSIVE = "INCONCLUSIVE"


@dataclass(frozen=True)
class Verification:
    outcome: VerifyOutcome
    vs_baseline: KsDecision
    vs_expected: KsDecision
    observed_mean: float


def _aligned(ref: TescSeries, observed: TescSeries, min_len: int) -> np.ndarray:
    """Reference samples over the observed time span, or the whole series if too few."""
    t = observed.times_s()
    w = ref.window(float(t[0]) - 1e-9, float(t[-1]) + 1e-9)
    return w.samples if len(w) >= min_len else ref.samples


def verify_watermark(observed, ref: WatermarkReference, alpha_sig: float = DEFAULT_ALPHA_SIG,
                     chunk_size: int = DEFAULT_CHUNK, align: bool = True) -> Verification:
    """Decide whether ``observed`` carries the enrolled watermark.

    With ``align`` and a TescSeries input, each reference is cut to the
    observed time span, which is what a time-varying schedule requires.
    """
    obs = np.asarray(getattr(observed, "samples", observed), dtype=float)
    if len(obs) < chunk_size:
        raise WatermarkError(f"need at least {chunk_size} observed samples, got {len(obs)}")
    if align and isinstance(observed, TescSeries):
        base = _aligned(ref.baseline, observed, chunk_size // 2)
        exp = _aligned(ref.expected, observed, chunk_size // 2)
    else:
        base, exp = ref.baseline.samples, ref.expected.samples
    d_base = ks_decide(obs, base, alpha_sig)
    d_exp = ks_decide(obs, exp, alpha_sig)
    m_obs, m_base, m_exp = float(np.mean(obs)), float(np.mean(base)), float(np.mean(exp))
    if not d_exp.reject_null and (d_base.reject_null or ref.degenerate):
        outcome = VerifyOutcome.AUTHENTIC
    elif not d_base.reject_null and not ref.degenerate:
        outcome = VerifyOutcome.SPOOFED
    elif d_base.reject_null and d_exp.reject_null and (m_obs - m_exp) * (m_exp - m_base) < 0:
        # differs from both and falls short of the commanded shift
        outcome = VerifyOutcome.SPOOFED
    else:
        outcome = VerifyOutcome.INCONCLUSIVE
    return Verification(outcome, d_base, d_exp, m_obs)


def shifted_moments(alpha_ms: float, beta: float, baseline_mean: float, baseline_var: float) -> tuple[float, float]:
    """Mean and variance of alpha + beta * R given those of R."""
    if not beta > 0:
        raise WatermarkError(f"beta must be > 0, got {beta}")
    return alpha_ms + beta * baseline_mean, beta * beta * baseline_var


def estimate_beta(baseline: TescSeries, observed: TescSeries) -> float:
    """Logic-scaling factor from the standard-deviation ratio."""
    sb = float(np.std(baseline.samples))
    if sb == 0:
        raise WatermarkError("baseline has zero variance")
    return float(np.std(observed.samples)) / sb
