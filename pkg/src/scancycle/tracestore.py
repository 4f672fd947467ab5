"""Trace data model, CSV I/O and timing estimators.

A :class:`TraceLog` is the exchange format between every part of the
toolkit. Internally timestamps are integer nanoseconds so that ordering and
round-trips are exact; the CSV carries seconds with nine decimals.
"""
from __future__ import annotations

import hashlib
import io
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

log = logging.getLogger(__name__)

CSV_HEADER = "t_s,src,dst,kind,flow_tag,seq"
NS_PER_S = 1_000_000_000


class TraceError(ValueError):
    """Raised for malformed traces or invalid estimator inputs."""


class Kind(str, Enum):
    REQ = "REQ"
    RESP = "RESP"
    FAULT = "FAULT"


_KIND_CODE = {Kind.REQ: 0, Kind.RESP: 1, Kind.FAULT: 2}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


class Flow(NamedTuple):
    """A request flow: requester, responder and MSG tag."""

    src: int
    dst: int
    tag: str

    def __str__(self) -> str:
        return f"{self.src}->{self.dst}:{self.tag}"


@dataclass(frozen=True)
class TraceEvent:
    t_s: float
    src: int
    dst: int
    kind: Kind
    flow_tag: str
    seq: int


def format_ns(t_ns: int) -> str:
    sign = "-" if t_ns < 0 else ""
    a = abs(int(t_ns))
    return f"{sign}{a // NS_PER_S}.{a % NS_PER_S:09d}"


def parse_seconds(text: str) -> int:
    """Parse a decimal seconds string into integer nanoseconds, exactly."""
    text = text.strip()
    neg = text.startswith("-")
    if neg or text.startswith("+"):
        text = text[1:]
    if "e" in text or "E" in text:
        return int(round(float(("-" if neg else "") + text) * NS_PER_S))
    whole, _, frac = text.partition(".")
    if not (whole or frac) or (whole and not whole.isdigit()) or (frac and not frac.isdigit()):
        raise ValueError(f"not a number: {text!r}")
    ns = int(whole or "0") * NS_PER_S + int(frac[:9].ljust(9, "0"))
    if len(frac) > 9 and frac[9] >= "5":
        ns += 1
    return -ns if neg else ns


class TraceLog:
    """Immutable, time-ordered sequence of trace events (columnar storage)."""

    __slots__ = ("t_ns", "src", "dst", "kind", "tag", "seq", "_hash")

    def __init__(self, t_ns, src, dst, kind, tag, seq, *, validate: bool = True):
        self.t_ns = np.asarray(t_ns, dtype=np.int64)
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        self.kind = np.asarray(kind, dtype=np.int8)
        self.tag = np.asarray(tag, dtype=object)
        self.seq = np.asarray(seq, dtype=np.int64)
        n = len(self.t_ns)
        for name in ("src", "dst", "kind", "tag", "seq"):
            if len(getattr(self, name)) != n:
                raise TraceError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        for arr in (self.t_ns, self.src, self.dst, self.kind, self.seq):
            arr.flags.writeable = False
        self.tag.flags.writeable = False
        self._hash = None
        if validate:
            _validate(self)

    # construction -----------------------------------------------------
    @classmethod
    def empty(cls) -> "TraceLog":
        return cls([], [], [], [], [], [])

    @classmethod
    def from_events(cls, events: Iterable[TraceEvent], *, sort: bool = False) -> "TraceLog":
        rows = [
            (int(round(e.t_s * NS_PER_S)), e.src, e.dst, _KIND_CODE[Kind(e.kind)], e.flow_tag, e.seq)
            for e in events
        ]
        return cls.from_rows(rows, sort=sort)

    @classmethod
    def from_rows(cls, rows, *, sort: bool = False) -> "TraceLog":
        """Build from ``(t_ns, src, dst, kind_code, tag, seq)`` tuples."""
        rows = list(rows)
        if sort:
            rows.sort(key=_row_key)
        if not rows:
            return cls.empty()
        t, s, d, k, g, q = zip(*rows)
        return cls(t, s, d, k, list(g), q)

    # access -------------------------------------------------------------
    def __len__(self) -> int:
        return len(self.t_ns)

    def __iter__(self) -> Iterator[TraceEvent]:
        for i in range(len(self)):
            yield self.event(i)

    def event(self, i: int) -> TraceEvent:
        return TraceEvent(
            t_s=int(self.t_ns[i]) / NS_PER_S,
            src=int(self.src[i]),
            dst=int(self.dst[i]),
            kind=_CODE_KIND[int(self.kind[i])],
            flow_tag=str(self.tag[i]),
            seq=int(self.seq[i]),
        )

    @property
    def t_s(self) -> np.ndarray:
        return self.t_ns / NS_PER_S

    def rows(self):
        return zip(self.t_ns.tolist(), self.src.tolist(), self.dst.tolist(),
                   self.kind.tolist(), self.tag.tolist(), self.seq.tolist())

    def flows(self) -> list[Flow]:
        """Flows that carry at least one REQ, sorted."""
        m = self.kind == _KIND_CODE[Kind.REQ]
        found = set(zip(self.src[m].tolist(), self.dst[m].tolist(), self.tag[m].tolist()))
        return sorted(Flow(*f) for f in found)

    def mask(self, flow: Flow, kind: Kind) -> np.ndarray:
        code = _KIND_CODE[kind]
        if kind is Kind.RESP:
            src, dst = flow.dst, flow.src
        else:
            src, dst = flow.src, flow.dst
        return (self.kind == code) & (self.src == src) & (self.dst == dst) & (self.tag == flow.tag)

    def faults(self) -> list[TraceEvent]:
        return [self.event(i) for i in np.flatnonzero(self.kind == _KIND_CODE[Kind.FAULT])]

    def select(self, keep: np.ndarray) -> "TraceLog":
        keep = np.asarray(keep)
        return TraceLog(self.t_ns[keep], self.src[keep], self.dst[keep], self.kind[keep],
                        self.tag[keep], self.seq[keep], validate=False)

    # comparison / identity ---------------------------------------------
    def __eq__(self, other) -> bool:
        if not isinstance(other, TraceLog) or len(self) != len(other):
            return False
        return (np.array_equal(self.t_ns, other.t_ns) and np.array_equal(self.src, other.src)
                and np.array_equal(self.dst, other.dst) and np.array_equal(self.kind, other.kind)
                and np.array_equal(self.seq, other.seq) and list(self.tag) == list(other.tag))

    __hash__ = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        kinds = [_CODE_KIND[c].value for c in range(3)]
        buf.writelines(
            f"{format_ns(t)},{s},{d},{kinds[k]},{g},{q}\n" for t, s, d, k, g, q in self.rows()
        )
        return buf.getvalue()

    def checksum(self) -> str:
        if self._hash is None:
            self._hash = hashlib.sha256(self.to_csv().encode("utf-8")).hexdigest()
        return self._hash

    def __repr__(self) -> str:
        return f"TraceLog({len(self)} events, {len(self.flows())} flows)"


def _row_key(row):
    t, s, d, k, g, q = row
    return (t, s, d, g, k, q)


def _validate(trace: TraceLog) -> None:
    n = len(trace)
    if n == 0:
        return
    dt = np.diff(trace.t_ns)
    if (dt < 0).any():
        i = int(np.flatnonzero(dt < 0)[0]) + 1
        raise TraceError(f"event {i}: timestamp {format_ns(trace.t_ns[i])} precedes the previous event")
    bad_kind = ~np.isin(trace.kind, [0, 1, 2])
    if bad_kind.any():
        raise TraceError(f"event {int(np.flatnonzero(bad_kind)[0])}: unknown kind code")
    last_seq: dict = {}
    req_seqs: dict = {}
    for i, (t, s, d, k, g, q) in enumerate(trace.rows()):
        key = (s, d, k, g)
        prev = last_seq.get(key)
        if prev is not None and q <= prev:
            raise TraceError(f"event {i}: seq {q} not increasing for {s}->{d}:{g} {_CODE_KIND[k].value}")
        last_seq[key] = q
        if k == 0:
            req_seqs.setdefault((s, d, g), set()).add(q)
        elif k == 1:
            if q not in req_seqs.get((d, s, g), ()):
                raise TraceError(f"event {i}: RESP seq {q} for {d}->{s}:{g} has no earlier REQ")


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def save_trace(trace: TraceLog, path) -> None:
    Path(path).write_text(trace.to_csv(), encoding="utf-8", newline="\n")


def load_trace(path) -> TraceLog:
    """Load and validate a trace CSV. Errors carry 1-based line numbers."""
    text = Path(path).read_text(encoding="utf-8")
    return parse_trace(text)


def parse_trace(text: str) -> TraceLog:
    lines = text.split("\n")
    if not lines or lines[0].strip().lstrip("﻿") != CSV_HEADER:
        raise TraceError(f"line 1: expected header {CSV_HEADER!r}")
    kind_codes = {k.value: c for k, c in _KIND_CODE.items()}
    t_ns, src, dst, kind, tag, seq = [], [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.rstrip("\r").split(",")
        if len(parts) != 6:
            raise TraceError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        try:
            t_ns.append(parse_seconds(parts[0]))
            src.append(int(parts[1]))
            dst.append(int(parts[2]))
            kind.append(kind_codes[parts[3]])
            seq.append(int(parts[5]))
        except (ValueError, KeyError) as exc:
            raise TraceError(f"line {lineno}: malformed row ({exc})") from None
        tag.append(parts[4])
    try:
        return TraceLog(t_ns, src, dst, kind, tag, seq)
    except TraceError as exc:
        # map "event i" back onto the file line
        msg = str(exc)
        if msg.startswith("event "):
            idx, _, rest = msg[6:].partition(":")
            if idx.isdigit():
                raise TraceError(f"line {int(idx) + 2}:{rest}") from None
        raise


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TescSeries:
    """Estimated scan-cycle samples (successive REQ inter-arrival times, ms)."""

    flow: Flow
    samples: np.ndarray
    t0_s: float

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        object.__setattr__(self, "samples", s)
        if len(s) and not (s > 0).all():
            raise TraceError("TescSeries samples must be strictly positive")

    def __len__(self) -> int:
        return len(self.samples)

    def times_s(self) -> np.ndarray:
        """Arrival time of the REQ that closes each sample."""
        return self.t0_s + np.cumsum(self.samples) / 1000.0

    def window(self, start_s: float, end_s: float) -> "TescSeries":
        """Samples whose closing REQ falls in ``[start_s, end_s)``."""
        t = self.times_s()
        idx = np.flatnonzero((t >= start_s) & (t < end_s))
        if len(idx) == 0:
            return TescSeries(self.flow, np.empty(0), start_s)
        i0 = idx[0]
        t0 = self.t0_s + (np.sum(self.samples[:i0]) / 1000.0)
        return TescSeries(self.flow, self.samples[idx[0]: idx[-1] + 1], t0)

    def mean(self) -> float:
        return float(np.mean(self.samples))


def _resolve_flow(trace: TraceLog, flow) -> Flow:
    available = trace.flows()
    if isinstance(flow, str):
        matches = [f for f in available if str(f) == flow or f.tag == flow]
        if len(matches) == 1:
            return matches[0]
    else:
        flow = Flow(*flow)
        if flow in available:
            return flow
    listing = ", ".join(str(f) for f in available) or "none"
    raise TraceError(f"unknown flow {flow!s}; available flows: {listing}")


def estimate_tesc(trace: TraceLog, flow) -> TescSeries:
    flow = _resolve_flow(trace, flow)
    t = trace.t_ns[trace.mask(flow, Kind.REQ)]
    if len(t) < 2:
        raise TraceError(f"flow {flow} has {len(t)} REQ events; at least 2 are needed")
    return TescSeries(flow, np.diff(t) / 1e6, int(t[0]) / NS_PER_S)


class ResponseTimes(NamedTuple):
    samples: np.ndarray
    unmatched: int


def response_times(trace: TraceLog, flow) -> ResponseTimes:
    """RESP minus REQ time per sequence number, in ms.

    REQs with no RESP are skipped and counted in ``unmatched``.
    """
    flow = _resolve_flow(trace, flow)
    rq = trace.mask(flow, Kind.REQ)
    rs = trace.mask(flow, Kind.RESP)
    req_t = dict(zip(trace.seq[rq].tolist(), trace.t_ns[rq].tolist()))
    resp_seq = trace.seq[rs].tolist()
    resp_t = trace.t_ns[rs].tolist()
    out = [(t - req_t[q]) / 1e6 for q, t in zip(resp_seq, resp_t) if q in req_t]
    unmatched = len(req_t) - len(out)
    if not out:
        raise TraceError(f"flow {flow} has no matched REQ/RESP pair")
    if unmatched:
        log.info("flow %s: %d REQ without RESP skipped", flow, unmatched)
    return ResponseTimes(np.asarray(out), unmatched)


def response_iat(trace: TraceLog, flow) -> tuple[np.ndarray, np.ndarray]:
    """Aligned request/response inter-arrival series of matched pairs (ms).

    Returns ``(u, y)`` where ``u[k]`` is the gap between requests k and k+1 and
    ``y[k]`` the gap between their responses.
    """
    flow = _resolve_flow(trace, flow)
    rq = trace.mask(flow, Kind.REQ)
    rs = trace.mask(flow, Kind.RESP)
    resp = dict(zip(trace.seq[rs].tolist(), trace.t_ns[rs].tolist()))
    pairs = [(t, resp[q]) for q, t in zip(trace.seq[rq].tolist(), trace.t_ns[rq].tolist()) if q in resp]
    if len(pairs) < 2:
        raise TraceError(f"flow {flow} has fewer than 2 matched REQ/RESP pairs")
    a = np.asarray(pairs, dtype=np.int64)
    return np.diff(a[:, 0]) / 1e6, np.diff(a[:, 1]) / 1e6


def compute_eta(tesc: TescSeries, t_sc_mean_ms: float) -> float:
    if not t_sc_mean_ms > 0:
        raise TraceError("t_sc_mean_ms must be positive")
    return float(np.mean(tesc.samples)) / t_sc_mean_ms


# TescSeries CSV (enrollment references)

TESC_HEADER = "sample_ms"


def save_tesc(series: TescSeries, path) -> None:
    f = series.flow
    lines = [f"# flow={f.src},{f.dst},{f.tag} t0_ns={format_ns(round(series.t0_s * NS_PER_S))}",
             TESC_HEADER]
    lines += [repr(float(v)) for v in series.samples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_tesc(path) -> TescSeries:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2 or not lines[0].startswith("# flow=") or lines[1] != TESC_HEADER:
        raise TraceError(f"{path}: not a TescSeries file")
    meta = dict(part.split("=", 1) for part in lines[0][2:].split(" "))
    src, dst, tag = meta["flow"].split(",", 2)
    samples = []
    for lineno, line in enumerate(lines[2:], start=3):
        try:
            samples.append(float(line))
        except ValueError:
            raise TraceError(f"{path}: line {lineno}: bad sample {line!r}") from None
    t0 = parse_seconds(meta["t0_ns"]) / NS_PER_S
    return TescSeries(Flow(int(src), int(dst), tag), np.asarray(samples), t0)
