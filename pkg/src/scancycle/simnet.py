"""Seeded discrete-event simulator of PLCs exchanging MSG requests.

Each PLC runs back-to-back scan cycles (input read, control logic, output
write). A flow's MSG instruction is evaluated once per cycle: it executes in
cycle ``j`` only if the previous response was latched at that cycle's input
read (arrived strictly before the cycle started) and the PLC's message queue
has a free slot. An executed message leaves the PLC at the end of the cycle
plus a sampled network overhead; the response comes back one sampled
latency later.

Time is integer nanoseconds internally. Every random stream is derived from
``(seed, plc_id, purpose)`` so runs are a pure function of the config.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

from .tracestore import Flow, TraceLog

PHASE_FLOOR_MS = 1e-3
NS_PER_MS = 1_000_000
FAULT_TAG = "WATCHDOG"
# a schedule is accepted only if mean scan + max offset + this many scan
# standard deviations stays below the watchdog
WATCHDOG_SIGMAS = 6.0


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is a JSON pointer to the bad field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


@dataclass(frozen=True)
class OverheadModel:
    t_proc_ms: float = 0.0
    t_txn_ms: float = 0.0
    t_prog_ms: float = 0.0
    t_que_mean_ms: float = 0.0
    t_que_std_ms: float = 0.0

    def validate(self, path: str = "/overhead") -> None:
        for name in ("t_proc_ms", "t_txn_ms", "t_prog_ms", "t_que_mean_ms", "t_que_std_ms"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{path}/{name}", f"must be a finite value >= 0, got {v}")

    @property
    def constant_ms(self) -> float:
        return self.t_proc_ms + self.t_txn_ms + self.t_prog_ms

    def sample_ms(self, rng: np.random.Generator) -> float:
        que = rng.normal(self.t_que_mean_ms, self.t_que_std_ms) if self.t_que_std_ms > 0 else self.t_que_mean_ms
        return self.constant_ms + max(0.0, que)


@dataclass(frozen=True)
class PlcProfile:
    plc_id: int
    t_in_mean: float
    t_cl_mean: float
    t_op_mean: float
    jitter_std: float = 0.0
    watchdog_ms: float = 500.0
    queue_slots: int = 1
    # per-PLC override of the plant overhead (processing/queuing load differs per PLC)
    overhead: OverheadModel | None = None

    @property
    def scan_mean_ms(self) -> float:
        return self.t_in_mean + self.t_cl_mean + self.t_op_mean

    @property
    def scan_std_ms(self) -> float:
        return math.sqrt(3.0) * self.jitter_std

    def validate(self, path: str) -> None:
        for name in ("t_in_mean", "t_cl_mean", "t_op_mean", "jitter_std", "watchdog_ms"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v)):
                raise ConfigError(f"{path}/{name}", f"must be a finite number, got {v!r}")
        if self.scan_mean_ms <= 0:
            raise ConfigError(f"{path}/t_cl_mean", "phase means must sum to a positive scan time")
        if self.jitter_std < 0:
            raise ConfigError(f"{path}/jitter_std", "must be >= 0")
        if not (isinstance(self.queue_slots, int) and self.queue_slots >= 1):
            raise ConfigError(f"{path}/queue_slots", "must be an integer >= 1")
        if self.scan_mean_ms >= self.watchdog_ms:
            raise ConfigError(
                f"{path}/watchdog_ms",
                f"mean scan {self.scan_mean_ms:.3f} ms is not below the watchdog {self.watchdog_ms} ms",
            )
        if self.overhead is not None:
            self.overhead.validate(f"{path}/overhead")


@dataclass(frozen=True)
class FlowSpec:
    src: int
    dst: int
    tag: str
    resp_latency_mean: float
    resp_latency_std: float = 0.0

    @property
    def flow(self) -> Flow:
        return Flow(self.src, self.dst, self.tag)

    def validate(self, path: str) -> None:
        if self.src == self.dst:
            raise ConfigError(f"{path}/dst", "flow source and destination must differ")
        if not self.resp_latency_mean > 0:
            raise ConfigError(f"{path}/resp_latency_mean", "must be > 0")
        if self.resp_latency_std < 0:
            raise ConfigError(f"{path}/resp_latency_std", "must be >= 0")
        if not self.tag or "," in self.tag or "\n" in self.tag:
            raise ConfigError(f"{path}/tag", "must be a non-empty string without commas or newlines")


class CycleSchedule(Protocol):
    """Anything that yields a per-cycle control-logic offset in ms."""

    def offsets(self, n_cycles: int) -> np.ndarray: ...

    def max_alpha(self) -> float: ...


@dataclass(frozen=True)
class PlantConfig:
    profiles: tuple[PlcProfile, ...]
    flows: tuple[FlowSpec, ...]
    overhead: OverheadModel = OverheadModel()
    duration_s: float = 60.0
    seed: int = 0
    # plc_id -> schedule adding time to the control-logic phase per cycle
    schedules: tuple[tuple[int, Any], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "profiles", tuple(self.profiles))
        object.__setattr__(self, "flows", tuple(self.flows))
        object.__setattr__(self, "schedules", tuple(sorted(self.schedules, key=lambda kv: kv[0])))

    def profile(self, plc_id: int) -> PlcProfile:
        for p in self.profiles:
            if p.plc_id == plc_id:
                return p
        raise ConfigError("/profiles", f"no PLC with plc_id {plc_id}")

    def schedule_for(self, plc_id: int):
        return dict(self.schedules).get(plc_id)

    def overhead_for(self, plc_id: int) -> OverheadModel:
        p = self.profile(plc_id)
        return p.overhead if p.overhead is not None else self.overhead

    def validate(self) -> None:
        if not self.profiles:
            raise ConfigError("/profiles", "at least one PLC profile is required")
        ids = [p.plc_id for p in self.profiles]
        if len(set(ids)) != len(ids):
            raise ConfigError("/profiles", "plc_id values must be unique")
        for i, p in enumerate(self.profiles):
            p.validate(f"/profiles/{i}")
        self.overhead.validate("/overhead")
        seen = set()
        for i, f in enumerate(self.flows):
            f.validate(f"/flows/{i}")
            for end in ("src", "dst"):
                if getattr(f, end) not in ids:
                    raise ConfigError(f"/flows/{i}/{end}", f"PLC {getattr(f, end)} has no profile")
            if f.flow in seen:
                raise ConfigError(f"/flows/{i}", f"duplicate flow {f.flow}")
            seen.add(f.flow)
        if not (math.isfinite(self.duration_s) and self.duration_s > 0):
            raise ConfigError("/duration_s", "must be > 0")
        if not (isinstance(self.seed, int) and 0 <= self.seed < 2**64):
            raise ConfigError("/seed", "must be an unsigned 64-bit integer")
        for plc_id, sched in self.schedules:
            prof = self.profile(plc_id)
            check_watchdog(prof, sched.max_alpha(), path=f"/watermark/{plc_id}")


def check_watchdog(profile: PlcProfile, extra_ms: float, path: str = "/watermark") -> float:
    """Raise unless ``extra_ms`` of added logic keeps the PLC under its watchdog.

    Returns the remaining margin in ms.
    """
    worst = profile.scan_mean_ms + extra_ms + WATCHDOG_SIGMAS * profile.scan_std_ms
    margin = profile.watchdog_ms - worst
    if margin <= 0:
        raise ConfigError(
            path,
            f"PLC {profile.plc_id}: scan {profile.scan_mean_ms:.3f} ms + {extra_ms:.3f} ms "
            f"(+{WATCHDOG_SIGMAS:g} sigma) exceeds watchdog {profile.watchdog_ms} ms by {-margin:.3f} ms",
        )
    return margin


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def _build(cls, data: Mapping, path: str):
    if not isinstance(data, Mapping):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    known = {f for f in cls.__dataclass_fields__}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"{path}/{sorted(extra)[0]}", "unknown field")
    kwargs = dict(data)
    if "overhead" in kwargs and kwargs["overhead"] is not None:
        kwargs["overhead"] = _build(OverheadModel, kwargs["overhead"], f"{path}/overhead")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(path, str(exc)) from None


def plant_from_dict(data: Mapping, path: str = "") -> PlantConfig:
    if not isinstance(data, Mapping):
        raise ConfigError(path or "/", "expected an object")
    for req in ("profiles", "flows"):
        if req not in data:
            raise ConfigError(f"{path}/{req}", "missing required field")
    profiles = [_build(PlcProfile, p, f"{path}/profiles/{i}") for i, p in enumerate(data["profiles"])]
    flows = [_build(FlowSpec, f, f"{path}/flows/{i}") for i, f in enumerate(data["flows"])]
    overhead = _build(OverheadModel, data.get("overhead", {}), f"{path}/overhead")
    extra = set(data) - {"profiles", "flows", "overhead", "duration_s", "seed"}
    if extra:
        raise ConfigError(f"{path}/{sorted(extra)[0]}", "unknown field")
    cfg = PlantConfig(
        profiles=profiles,
        flows=flows,
        overhead=overhead,
        duration_s=data.get("duration_s", 60.0),
        seed=data.get("seed", 0),
    )
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(path + exc.path, exc.message) from None
    return cfg


def plant_to_dict(cfg: PlantConfig) -> dict:
    def ov(o: OverheadModel) -> dict:
        return {k: getattr(o, k) for k in OverheadModel.__dataclass_fields__}

    profiles = []
    for p in cfg.profiles:
        d = {k: getattr(p, k) for k in PlcProfile.__dataclass_fields__ if k != "overhead"}
        if p.overhead is not None:
            d["overhead"] = ov(p.overhead)
        profiles.append(d)
    return {
        "profiles": profiles,
        "flows": [{k: getattr(f, k) for k in FlowSpec.__dataclass_fields__} for f in cfg.flows],
        "overhead": ov(cfg.overhead),
        "duration_s": cfg.duration_s,
        "seed": cfg.seed,
    }


def load_plant(path) -> PlantConfig:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return plant_from_dict(data.get("plant", data) if isinstance(data, dict) else data)


# ---------------------------------------------------------------------------
# Config transforms
# ---------------------------------------------------------------------------

def with_profile(config: PlantConfig, profile: PlcProfile) -> PlantConfig:
    profiles = tuple(profile if p.plc_id == profile.plc_id else p for p in config.profiles)
    return replace(config, profiles=profiles)


def inject_logic_delay(config: PlantConfig, plc_id: int, extra_cl_ms: float) -> PlantConfig:
    """Lengthen one PLC's control-logic phase by ``extra_cl_ms`` on every cycle."""
    prof = config.profile(plc_id)
    if extra_cl_ms == 0:
        return config
    if extra_cl_ms < 0 and prof.t_cl_mean + extra_cl_ms <= 0:
        raise ConfigError(f"/profiles/{plc_id}/t_cl_mean", "delay would make the control-logic phase non-positive")
    check_watchdog(prof, extra_cl_ms, path=f"/profiles/{plc_id}/t_cl_mean")
    return with_profile(config, replace(prof, t_cl_mean=prof.t_cl_mean + extra_cl_ms))


def with_seed(config: PlantConfig, seed: int) -> PlantConfig:
    return replace(config, seed=seed)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass
class PlcStats:
    plc_id: int
    n_cycles: int
    mean_scan_ms: float
    fault_t_s: float | None = None


@dataclass
class FlowStats:
    flow: Flow
    exec_cycles: np.ndarray  # cycle index in which each REQ executed
    cycles_between: np.ndarray  # scan cycles spanned by each request IAT
    offset_ms: np.ndarray  # schedule delay accumulated inside each request IAT


@dataclass
class SimResult:
    trace: TraceLog
    plcs: dict[int, PlcStats] = field(default_factory=dict)
    flows: dict[Flow, FlowStats] = field(default_factory=dict)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _scan_cycles(profile: PlcProfile, schedule, duration_ns: int, rng: np.random.Generator):
    """Return (boundaries_ns, durations_ms, offsets_ms, fault_ns).

    ``boundaries_ns[j]`` is the start of cycle j; the last boundary closes the
    last complete cycle.
    """
    means = np.array([profile.t_in_mean, profile.t_cl_mean, profile.t_op_mean], dtype=float)
    start_ns = int(rng.uniform(0.0, profile.scan_mean_ms) * NS_PER_MS)
    est = int(duration_ns / (profile.scan_mean_ms * NS_PER_MS) * 1.1) + 64
    durs: list[np.ndarray] = []
    total = 0
    n = 0
    while True:
        block = max(est - n, 1024)
        if profile.jitter_std > 0:
            ph = rng.normal(means, profile.jitter_std, size=(block, 3))
        else:
            ph = np.broadcast_to(means, (block, 3)).copy()
        np.maximum(ph, PHASE_FLOOR_MS, out=ph)
        durs.append(ph.sum(axis=1))
        n += block
        if schedule is not None:
            offs = np.asarray(schedule.offsets(n), dtype=float)
            d_all = np.concatenate(durs) + offs
        else:
            d_all = np.concatenate(durs)
            offs = np.zeros(n)
        total = start_ns + int(np.sum(np.round(d_all * NS_PER_MS)))
        if total >= duration_ns or (d_all >= profile.watchdog_ms).any():
            break
    dur_ms = d_all
    over = np.flatnonzero(dur_ms >= profile.watchdog_ms)
    fault_ns = None
    step = np.round(dur_ms * NS_PER_MS).astype(np.int64)
    bounds = start_ns + np.concatenate([[0], np.cumsum(step)])
    if len(over):
        j = int(over[0])
        fault_ns = int(bounds[j]) + int(profile.watchdog_ms * NS_PER_MS)
        bounds = bounds[: j + 1]
        dur_ms = dur_ms[:j]
        offs = offs[:j]
    return bounds, dur_ms, offs[: len(dur_ms)], fault_ns


def _run_plc(config: PlantConfig, profile: PlcProfile, flows: Sequence[tuple[int, FlowSpec]],
             duration_ns: int, rows: list, result: SimResult) -> None:
    seed = config.seed
    schedule = config.schedule_for(profile.plc_id)
    bounds, dur_ms, offs, fault_ns = _scan_cycles(
        profile, schedule, duration_ns, _rng(seed, profile.plc_id, 0)
    )
    n_cycles = len(dur_ms)
    in_window = bounds[1:] <= duration_ns
    realized = dur_ms[in_window[: n_cycles]] if n_cycles else dur_ms
    result.plcs[profile.plc_id] = PlcStats(
        profile.plc_id,
        int(len(realized)),
        float(np.mean(realized)) if len(realized) else float("nan"),
        None if fault_ns is None else fault_ns / 1e9,
    )
    if fault_ns is not None and fault_ns < duration_ns:
        rows.append((fault_ns, profile.plc_id, profile.plc_id, 2, FAULT_TAG, 0))
    overhead = config.overhead_for(profile.plc_id)
    offs_cum = np.concatenate([[0.0], np.cumsum(offs)])

    # state per flow
    rngs = {i: _rng(seed, profile.plc_id, 1, i) for i, _ in flows}
    resp_at: dict[int, int] = {}  # flow index -> arrival time of outstanding response
    execs: dict[int, list[int]] = {i: [] for i, _ in flows}
    seqs = {i: 0 for i, _ in flows}
    # (candidate cycle, flow index); every flow may execute in cycle 0
    heap = [(0, i) for i, _ in flows]
    heapq.heapify(heap)
    spec_of = dict(flows)
    slots = profile.queue_slots
    last_cycle = n_cycles - 1  # a REQ executed in cycle j leaves at bounds[j+1]

    while heap:
        j, i = heapq.heappop(heap)
        if j > last_cycle:
            continue
        t_read = int(bounds[j])
        busy = [t for k, t in resp_at.items() if t >= t_read]
        if len(busy) >= slots:
            nxt = int(np.searchsorted(bounds, min(busy), side="right"))
            heapq.heappush(heap, (nxt, i))
            continue
        spec = spec_of[i]
        rng = rngs[i]
        t_req = int(bounds[j + 1]) + int(round(overhead.sample_ms(rng) * NS_PER_MS))
        lat = rng.normal(spec.resp_latency_mean, spec.resp_latency_std) if spec.resp_latency_std > 0 else spec.resp_latency_mean
        t_resp = t_req + int(round(max(lat, PHASE_FLOOR_MS) * NS_PER_MS))
        if t_req >= duration_ns:
            continue
        q = seqs[i]
        seqs[i] += 1
        rows.append((t_req, spec.src, spec.dst, 0, spec.tag, q))
        if t_resp < duration_ns:
            rows.append((t_resp, spec.dst, spec.src, 1, spec.tag, q))
        execs[i].append(j)
        resp_at[i] = t_resp
        # latched at the first input read strictly after the arrival
        nxt = int(np.searchsorted(bounds, t_resp, side="right"))
        heapq.heappush(heap, (nxt, i))

    for i, spec in flows:
        ex = np.asarray(execs[i], dtype=np.int64)
        between = np.diff(ex)
        # IAT k spans cycles ex[k]+1 .. ex[k+1]
        wm = offs_cum[ex[1:] + 1] - offs_cum[ex[:-1] + 1] if len(ex) > 1 else np.empty(0)
        result.flows[spec.flow] = FlowStats(spec.flow, ex, between, wm)


def simulate_detailed(config: PlantConfig) -> SimResult:
    """Simulate and also return per-PLC scan statistics and per-flow gating data."""
    config.validate()
    duration_ns = int(round(config.duration_s * 1e9))
    rows: list = []
    result = SimResult(TraceLog.empty())
    by_src: dict[int, list[tuple[int, FlowSpec]]] = {}
    for i, f in enumerate(config.flows):
        by_src.setdefault(f.src, []).append((i, f))
    for prof in sorted(config.profiles, key=lambda p: p.plc_id):
        _run_plc(config, prof, by_src.get(prof.plc_id, []), duration_ns, rows, result)
    result.trace = TraceLog.from_rows(rows, sort=True)
    return result


def simulate(config: PlantConfig) -> TraceLog:
    return simulate_detailed(config).trace
