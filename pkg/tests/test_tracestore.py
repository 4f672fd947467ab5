import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from scancycle.tracestore import (
    Flow,
    Kind,
    TescSeries,
    TraceError,
    TraceEvent,
    TraceLog,
    compute_eta,
    estimate_tesc,
    format_ns,
    load_tesc,
    load_trace,
    parse_seconds,
    parse_trace,
    response_iat,
    response_times,
    save_tesc,
    save_trace,
)

HEADER = "t_s,src,dst,kind,flow_tag,seq\n"


def ev(t, src, dst, kind, seq, tag="FIT-201"):
    return TraceEvent(t, src, dst, kind, tag, seq)


def simple_log():
    return TraceLog.from_events([
        ev(0.0, 1, 2, Kind.REQ, 0),
        ev(0.011, 2, 1, Kind.RESP, 0),
        ev(0.022, 1, 2, Kind.REQ, 1),
        ev(0.030, 2, 1, Kind.RESP, 1),
        ev(0.044, 1, 2, Kind.REQ, 2),
    ])


def test_round_trip_equal(tmp_path, swat6_trace):
    p = tmp_path / "t.csv"
    save_trace(swat6_trace, p)
    back = load_trace(p)
    assert back == swat6_trace
    assert back.checksum() == swat6_trace.checksum()
    assert p.read_bytes().startswith(HEADER.encode())


def test_csv_uses_nine_decimals_and_lf(tmp_path):
    p = tmp_path / "t.csv"
    save_trace(simple_log(), p)
    raw = p.read_bytes()
    assert b"\r" not in raw
    assert raw.splitlines()[2] == b"0.011000000,2,1,RESP,FIT-201,0"


def test_resp_before_req_is_rejected():
    text = HEADER + "0.001,2,1,RESP,FIT-201,0\n0.002,1,2,REQ,FIT-201,0\n"
    with pytest.raises(TraceError, match="line 2"):
        parse_trace(text)


def test_non_monotone_timestamps_rejected():
    text = HEADER + "0.002,1,2,REQ,A,0\n0.001,1,2,REQ,A,1\n"
    with pytest.raises(TraceError, match="line 3"):
        parse_trace(text)


@pytest.mark.parametrize("row", ["abc,1,2,REQ,A,0", "0.1,1,2,PING,A,0", "0.1,1,2,REQ,A", "0.1,x,2,REQ,A,0"])
def test_malformed_row_reports_line(row):
    with pytest.raises(TraceError, match="line 3"):
        parse_trace(HEADER + "0.0,1,2,REQ,A,0\n" + row + "\n")


def test_seq_must_increase():
    with pytest.raises(TraceError, match="not increasing"):
        parse_trace(HEADER + "0.0,1,2,REQ,A,1\n0.1,1,2,REQ,A,1\n")


def test_estimate_tesc_arithmetic():
    s = estimate_tesc(simple_log(), Flow(1, 2, "FIT-201"))
    np.testing.assert_allclose(s.samples, [22.0, 22.0])
    assert len(s) == 3 - 1
    assert s.t0_s == 0.0


def test_estimate_tesc_flow_by_tag_and_string():
    log = simple_log()
    assert estimate_tesc(log, "FIT-201") .samples.tolist() == estimate_tesc(log, "1->2:FIT-201").samples.tolist()


def test_unknown_flow_lists_available():
    with pytest.raises(TraceError, match=r"available flows: 1->2:FIT-201"):
        estimate_tesc(simple_log(), Flow(3, 2, "MV-201"))


def test_empty_flow_is_error():
    log = TraceLog.from_events([ev(0.0, 1, 2, Kind.REQ, 0)])
    with pytest.raises(TraceError, match="at least 2"):
        estimate_tesc(log, "FIT-201")
    with pytest.raises(TraceError):
        estimate_tesc(TraceLog.empty(), Flow(1, 2, "X"))


def test_response_times():
    log = TraceLog.from_events([ev(1.000, 1, 2, Kind.REQ, 0), ev(1.011, 2, 1, Kind.RESP, 0)])
    r = response_times(log, "FIT-201")
    np.testing.assert_allclose(r.samples, [11.0])
    assert r.unmatched == 0
    r2 = response_times(simple_log(), "FIT-201")
    assert r2.unmatched == 1
    np.testing.assert_allclose(r2.samples, [11.0, 8.0])


def test_response_times_without_resp_is_error():
    log = TraceLog.from_events([ev(0.0, 1, 2, Kind.REQ, 0), ev(0.02, 1, 2, Kind.REQ, 1)])
    with pytest.raises(TraceError, match="no matched"):
        response_times(log, "FIT-201")


def test_response_iat_pairs():
    u, y = response_iat(simple_log(), "FIT-201")
    np.testing.assert_allclose(u, [22.0])
    np.testing.assert_allclose(y, [19.0])


def test_compute_eta():
    s = TescSeries(Flow(1, 2, "A"), np.array([22.153]), 0.0)
    eta = compute_eta(s, 4.387)
    assert eta == pytest.approx(5.0497, abs=1e-3)
    assert abs(eta - 5.34) / 5.34 <= 0.10
    assert compute_eta(TescSeries(Flow(1, 2, "A"), np.array([4.0, 4.0]), 0.0), 4.0) == 1.0
    with pytest.raises(TraceError):
        compute_eta(s, 0.0)


def test_tesc_samples_positive():
    with pytest.raises(TraceError):
        TescSeries(Flow(1, 2, "A"), np.array([1.0, 0.0]), 0.0)


def test_tesc_window_and_round_trip(tmp_path):
    s = TescSeries(Flow(1, 2, "A"), np.array([10.0, 20.0, 30.0, 40.0]), 1.0)
    np.testing.assert_allclose(s.times_s(), [1.01, 1.03, 1.06, 1.10])
    w = s.window(1.02, 1.07)
    np.testing.assert_allclose(w.samples, [20.0, 30.0])
    assert w.t0_s == pytest.approx(1.01)
    p = tmp_path / "s.csv"
    save_tesc(s, p)
    back = load_tesc(p)
    assert back.flow == s.flow and back.t0_s == s.t0_s
    np.testing.assert_array_equal(back.samples, s.samples)


@given(st.integers(min_value=-10**15, max_value=10**15))
def test_seconds_format_parse_round_trip(ns):
    assert parse_seconds(format_ns(ns)) == ns


@pytest.mark.parametrize("text,ns", [("1.5", 1_500_000_000), (".25", 250_000_000), ("2", 2_000_000_000),
                                     ("0.0000000015", 2), ("1e-3", 1_000_000), ("-0.5", -500_000_000)])
def test_parse_seconds_cases(text, ns):
    assert parse_seconds(text) == ns


def test_trace_is_immutable(swat6_trace):
    with pytest.raises(ValueError):
        swat6_trace.t_ns[0] = 5


def test_million_event_round_trip_speed(tmp_path):
    n = 500_000
    t = np.arange(2 * n, dtype=np.int64) * 10_000
    kind = np.tile([0, 1], n)
    seq = np.repeat(np.arange(n), 2)
    src = np.where(kind == 0, 1, 2)
    dst = np.where(kind == 0, 2, 1)
    log = TraceLog(t, src, dst, kind, ["A"] * (2 * n), seq)
    p = tmp_path / "big.csv"
    t0 = time.perf_counter()
    save_trace(log, p)
    back = load_trace(p)
    elapsed = time.perf_counter() - t0
    assert back == log
    assert elapsed < 10.0, elapsed  # first measurement about 4-5 s on this single-core box, times two


def test_condition_one_and_eta_bound(swat6, swat6_trace):
    for flow in swat6_trace.flows():
        rq = swat6_trace.t_ns[swat6_trace.mask(flow, Kind.REQ)]
        rs = swat6_trace.t_ns[swat6_trace.mask(flow, Kind.RESP)]
        # every REQ after the first strictly follows the previous RESP
        assert (rq[1:len(rs) + 1] > rs[: len(rq) - 1]).all()
        tsc = swat6.profile(flow.src).scan_mean_ms
        assert compute_eta(estimate_tesc(swat6_trace, flow), tsc) >= 1 - 1e-9
