"""Trace-level attack transforms: suspension, interception, masquerade and replay."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from .simnet import ConfigError
from .tracestore import Flow, Kind, TraceError, TraceLog, _resolve_flow

NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000
MIN_IAT_MS = 0.1  # attacker IAT floor; timestamps must stay strictly increasing


class AttackError(ValueError):
    pass


class AttackKind(str, Enum):
    DOS = "DOS"
    MITM = "MITM"
    MASQ_NAIVE = "MASQ_NAIVE"
    MASQ_PDK = "MASQ_PDK"
    MASQ_FDK = "MASQ_FDK"
    REPLAY = "REPLAY"


@dataclass(frozen=True)
class Recording:
    """Immutable copy of one flow's events inside a time window."""

    flow: Flow
    start_ns: int
    end_ns: int
    t_ns: np.ndarray
    is_req: np.ndarray

    def __post_init__(self):
        for name in ("t_ns", "is_req"):
            a = np.array(getattr(self, name))
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_req(self) -> int:
        return int(self.is_req.sum())

    def req_iats_ms(self) -> np.ndarray:
        return np.diff(self.t_ns[self.is_req]) / NS_PER_MS


@dataclass(frozen=True)
class AttackScenario:
    kind: AttackKind
    target_flow: object
    start_s: float
    end_s: float | None = None
    delta_ms: float = 0.0  # MITM one-way interception latency
    period_ms: float = 0.0  # MASQ_NAIVE
    jitter_ms: float = 0.0  # MASQ_NAIVE
    target_mean_ms: float = 0.0  # MASQ_PDK
    attacker_jitter_ms: float = 0.0  # MASQ_PDK std, MASQ_FDK additive jitter
    source: np.ndarray | None = field(default=None, repr=False)  # MASQ_FDK empirical IATs (ms)
    recording: Recording | None = field(default=None, repr=False)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.source is not None:
            object.__setattr__(self, "source", np.asarray(self.source, dtype=float))
        self.validate()

    def validate(self, path: str = "/attack") -> None:
        k = self.kind
        if k is AttackKind.REPLAY:
            if self.recording is None or len(self.recording.t_ns) == 0:
                raise AttackError("REPLAY needs a non-empty recording")
        elif self.end_s is None:
            raise ConfigError(f"{path}/end_s", "required for this attack kind")
        if self.end_s is not None and not self.start_s < self.end_s:
            raise ConfigError(f"{path}/end_s", "start_s must be < end_s")
        if k is AttackKind.MITM and not self.delta_ms > 0:
            raise ConfigError(f"{path}/delta_ms", "must be > 0")
        if k is AttackKind.MASQ_NAIVE and not self.period_ms > 0:
            raise ConfigError(f"{path}/period_ms", "must be > 0")
        if k is AttackKind.MASQ_PDK and not self.target_mean_ms > 0:
            raise ConfigError(f"{path}/target_mean_ms", "must be > 0")
        if k is AttackKind.MASQ_FDK:
            if self.source is None or len(self.source) == 0:
                raise ConfigError(f"{path}/source", "MASQ_FDK needs a non-empty empirical sample source")
            if not (self.source > 0).all():
                raise ConfigError(f"{path}/source", "IAT samples must be positive")
        for name in ("jitter_ms", "attacker_jitter_ms"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{path}/{name}", "must be >= 0")

    def window_ns(self) -> tuple[int, int]:
        start = int(round(self.start_s * NS_PER_S))
        if self.end_s is None:
            rec = self.recording
            return start, start + (rec.end_ns - rec.start_ns)
        return start, int(round(self.end_s * NS_PER_S))


def scenario_from_dict(data: Mapping, path: str = "/attack", recording=None, source=None) -> AttackScenario:
    if not isinstance(data, Mapping):
        raise ConfigError(path, "expected an object")
    allowed = set(AttackScenario.__dataclass_fields__) - {"source", "recording"}
    allowed |= {"record_start_s", "record_end_s", "source_start_s", "source_end_s"}
    extra = set(data) - allowed
    if extra:
        raise ConfigError(f"{path}/{sorted(extra)[0]}", "unknown field")
    for req in ("kind", "target_flow", "start_s"):
        if req not in data:
            raise ConfigError(f"{path}/{req}", "missing required field")
    if data["kind"] not in AttackKind.__members__:
        raise ConfigError(f"{path}/kind", f"expected one of {list(AttackKind.__members__)}")
    kw = {k: v for k, v in data.items() if k in AttackScenario.__dataclass_fields__}
    return AttackScenario(**kw, recording=recording, source=source)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _flow_events(log: TraceLog, flow: Flow):
    """Indices, times and REQ flags of a flow's REQ and RESP events, time-ordered."""
    m = log.mask(flow, Kind.REQ) | log.mask(flow, Kind.RESP)
    idx = np.flatnonzero(m)
    return idx, log.t_ns[idx].copy(), log.kind[idx] == 0


def _response_times_ns(t: np.ndarray, is_req: np.ndarray) -> dict[int, int]:
    """Map REQ position -> response delay for REQs whose RESP comes next."""
    out = {}
    last = None
    for i in range(len(t)):
        if is_req[i]:
            last = i
        elif last is not None:
            out[last] = int(t[i] - t[last])
            last = None
    return out


def _rebuild(log: TraceLog, flow: Flow, drop_idx: np.ndarray, t_ns, is_req) -> TraceLog:
    """Replace a flow's events with (t_ns, is_req) and renumber its seqs.

    Each RESP answers the latest REQ before it if that REQ is unanswered;
    other RESPs are dropped.
    """
    keep = np.ones(len(log), dtype=bool)
    keep[drop_idx] = False
    base = log.select(keep)
    t_ns = np.asarray(t_ns, dtype=np.int64)
    is_req = np.asarray(is_req, dtype=bool)
    order = np.lexsort((~is_req, t_ns))  # REQ first on equal times
    rows = list(base.rows())
    seq = -1
    open_req = False
    for i in order:
        t = int(t_ns[i])
        if is_req[i]:
            seq += 1
            rows.append((t, flow.src, flow.dst, 0, flow.tag, seq))
            open_req = True
        elif open_req:
            rows.append((t, flow.dst, flow.src, 1, flow.tag, seq))
            open_req = False
    try:
        return TraceLog.from_rows(rows, sort=True)
    except TraceError as exc:
        raise AttackError(f"attack produced an invalid trace: {exc}") from None


def _shift_after(t: np.ndarray, after_ns: int, by_ns: int) -> np.ndarray:
    t = t.copy()
    t[t >= after_ns] += by_ns
    return t


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def _dos(log, flow, sc):
    idx, t, req = _flow_events(log, flow)
    a, b = sc.window_ns()
    keep = ~((t >= a) & (t < b))
    return _rebuild(log, flow, idx, t[keep], req[keep])


def _mitm(log, flow, sc):
    """Each in-window exchange is delayed by delta on the way out and back.

    The requester only issues its next MSG after the late response is
    latched, so every in-window request gap grows by 2 * delta and later
    traffic of the flow shifts accordingly.
    """
    idx, t, req = _flow_events(log, flow)
    a, b = sc.window_ns()
    two_d = int(round(2 * sc.delta_ms * NS_PER_MS))
    rt = _response_times_ns(t, req)
    new_t = np.empty_like(t)
    shift = 0
    last_req = None
    delayed = False
    for i in range(len(t)):
        if req[i]:
            if delayed:
                shift += two_d  # this REQ waited for a late response
            delayed = a <= t[i] < b
            new_t[i] = t[i] + shift
            last_req = i
        else:
            if last_req is not None and last_req in rt and rt[last_req] == t[i] - t[last_req] and delayed:
                new_t[i] = new_t[last_req] + rt[last_req] + two_d
            else:
                new_t[i] = t[i] + shift
    return _rebuild(log, flow, idx, new_t, req)


def _masquerade(log, flow, sc, rng):
    idx, t, req = _flow_events(log, flow)
    a, b = sc.window_ns()
    req_t = t[req]
    win = (req_t >= a) & (req_t < b)
    n = int(win.sum())
    if n == 0:
        raise AttackError("no victim requests inside the attack window")
    if sc.kind is AttackKind.MASQ_NAIVE:
        iat = sc.period_ms + (rng.normal(0, sc.jitter_ms, n - 1) if sc.jitter_ms > 0 else np.zeros(n - 1))
    elif sc.kind is AttackKind.MASQ_PDK:
        iat = rng.normal(sc.target_mean_ms, sc.attacker_jitter_ms, n - 1) if sc.attacker_jitter_ms > 0 \
            else np.full(n - 1, sc.target_mean_ms)
    else:
        iat = rng.choice(sc.source, size=n - 1, replace=True)
        if sc.attacker_jitter_ms > 0:
            iat = iat + rng.normal(0, sc.attacker_jitter_ms, n - 1)
    iat = np.maximum(iat, MIN_IAT_MS)
    first = int(req_t[win][0])
    fake = first + np.concatenate([[0], np.cumsum(np.round(iat * NS_PER_MS).astype(np.int64))])
    # responses drawn from the victim's own response-time distribution
    rt = np.asarray(list(_response_times_ns(t, req).values()), dtype=np.int64)
    if len(rt) == 0:
        raise AttackError("victim flow has no answered requests to model responses on")
    gaps = np.diff(np.append(fake, np.iinfo(np.int64).max))
    fake_rt = np.minimum(rng.choice(rt, size=n), gaps - 1)
    # victim events between the first and last in-window REQ (and their RESPs) go away
    last_real = int(req_t[win][-1])
    nxt = req_t[req_t > last_real]
    cut_end = int(nxt[0]) if len(nxt) else int(t[-1]) + 1
    drop = (t >= first) & (t < cut_end)
    rest_t, rest_req = t[~drop], req[~drop]
    # the victim resumes with its original gap after the attacker's last REQ
    rest_t = _shift_after(rest_t, cut_end, int(fake[-1]) - last_real)
    new_t = np.concatenate([rest_t, fake, fake + fake_rt])
    new_req = np.concatenate([rest_req, np.ones(n, bool), np.zeros(n, bool)])
    return _rebuild(log, flow, idx, new_t, new_req)


def _replay(log, flow, sc):
    rec = sc.recording
    if rec.flow != flow:
        raise AttackError(f"recording is of flow {rec.flow}, not {flow}")
    idx, t, req = _flow_events(log, flow)
    a, b = sc.window_ns()
    keep = ~((t >= a) & (t < b))
    shifted = rec.t_ns - rec.start_ns + a
    inwin = (shifted >= a) & (shifted < b)
    new_t = np.concatenate([t[keep], shifted[inwin]])
    new_req = np.concatenate([req[keep], rec.is_req[inwin]])
    return _rebuild(log, flow, idx, new_t, new_req)


def apply_attack(log: TraceLog, scenario: AttackScenario) -> TraceLog:
    """Return a new trace with the scenario's timing effects on its target flow."""
    flow = _resolve_flow(log, scenario.target_flow)
    a, b = scenario.window_ns()
    if len(log) and (a >= int(log.t_ns[-1]) or b <= int(log.t_ns[0])):
        raise AttackError("attack window lies outside the trace span")
    k = scenario.kind
    if k is AttackKind.DOS:
        return _dos(log, flow, scenario)
    if k is AttackKind.MITM:
        return _mitm(log, flow, scenario)
    if k is AttackKind.REPLAY:
        return _replay(log, flow, scenario)
    rng = np.random.default_rng(scenario.seed)
    return _masquerade(log, flow, scenario, rng)


def record_window(log: TraceLog, flow, start_s: float, end_s: float) -> Recording:
    flow = _resolve_flow(log, flow)
    if not start_s < end_s:
        raise AttackError("start_s must be < end_s")
    a, b = int(round(start_s * NS_PER_S)), int(round(end_s * NS_PER_S))
    _, t, req = _flow_events(log, flow)
    m = (t >= a) & (t < b)
    if not m.any():
        raise AttackError(f"no events of flow {flow} in [{start_s}, {end_s})")
    return Recording(flow, a, b, t[m], req[m])
