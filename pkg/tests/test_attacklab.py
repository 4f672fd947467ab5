import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scancycle.attacklab import (
    AttackError,
    AttackKind,
    AttackScenario,
    apply_attack,
    record_window,
    scenario_from_dict,
)
from scancycle.ksdetect import ks_decide
from scancycle.simnet import ConfigError, simulate, with_seed
from scancycle.tracestore import Flow, Kind, estimate_tesc, load_trace, save_trace

F1 = Flow(1, 2, "FIT-201")


@pytest.fixture(scope="module")
def trace(swat6):
    return simulate(dataclasses.replace(with_seed(swat6, 77), duration_s=40.0))


@pytest.fixture(scope="module")
def victim_iats(swat6):
    return estimate_tesc(simulate(dataclasses.replace(with_seed(swat6, 1), duration_s=600.0)), F1).samples


def in_window(log, flow, kind, a, b):
    t = log.t_ns[log.mask(flow, kind)]
    return int(np.sum((t >= a * 1e9) & (t < b * 1e9)))


def req_count(log, flow=F1):
    return int(log.mask(flow, Kind.REQ).sum())


def scenarios(victim):
    return [
        AttackScenario(AttackKind.DOS, F1, 10.0, 20.0),
        AttackScenario(AttackKind.MITM, F1, 10.0, 20.0, delta_ms=5.0),
        AttackScenario(AttackKind.MASQ_NAIVE, F1, 10.0, 20.0, period_ms=22.0, jitter_ms=1.0, seed=1),
        AttackScenario(AttackKind.MASQ_PDK, F1, 10.0, 20.0, target_mean_ms=22.15, attacker_jitter_ms=2.0, seed=2),
        AttackScenario(AttackKind.MASQ_FDK, F1, 10.0, 20.0, source=victim, seed=3),
    ]


def test_transforms_yield_valid_round_tripping_traces(trace, victim_iats, tmp_path):
    rec = record_window(trace, F1, 2.0, 8.0)
    all_sc = scenarios(victim_iats) + [AttackScenario(AttackKind.REPLAY, F1, 25.0, recording=rec)]
    for sc in all_sc:
        out = apply_attack(trace, sc)
        p = tmp_path / f"{sc.kind.value}.csv"
        save_trace(out, p)
        assert load_trace(p) == out
        # other flows are untouched
        for f in trace.flows():
            if f != F1:
                np.testing.assert_array_equal(out.t_ns[out.mask(f, Kind.REQ)], trace.t_ns[trace.mask(f, Kind.REQ)])


def test_count_rules(trace, victim_iats):
    dos, mitm, naive, pdk, fdk = (apply_attack(trace, sc) for sc in scenarios(victim_iats))
    assert in_window(dos, F1, Kind.REQ, 10, 20) == 0
    assert len(dos) < len(trace)
    assert len(mitm) == len(trace)
    for out in (naive, pdk, fdk):
        assert abs(req_count(out) - req_count(trace)) <= 1


def test_mitm_stretches_in_window_gaps_by_two_delta(trace):
    out = apply_attack(trace, AttackScenario(AttackKind.MITM, F1, 10.0, 20.0, delta_ms=5.0))
    before = trace.t_ns[trace.mask(F1, Kind.REQ)]
    after = out.t_ns[out.mask(F1, Kind.REQ)]
    d0, d1 = np.diff(before), np.diff(after)
    inside = (before[:-1] >= 10e9) & (before[:-1] < 20e9)
    np.testing.assert_array_equal(d1[inside] - d0[inside], 10_000_000)
    np.testing.assert_array_equal(d1[~inside], d0[~inside])


def test_replay_same_offset_is_identity(trace):
    rec = record_window(trace, F1, 10.0, 20.0)
    out = apply_attack(trace, AttackScenario(AttackKind.REPLAY, F1, 10.0, recording=rec))
    assert out == trace


def test_replay_copies_recorded_iats(trace):
    rec = record_window(trace, F1, 3.0, 9.0)
    assert rec.n_req >= 120 // 2
    out = apply_attack(trace, AttackScenario(AttackKind.REPLAY, F1, 20.0, recording=rec))
    t = out.t_ns[out.mask(F1, Kind.REQ)]
    w = t[(t >= 20e9) & (t < 26e9)]
    assert sorted(np.diff(w).tolist()) == sorted(np.round(rec.req_iats_ms() * 1e6).astype(int).tolist())
    assert abs(req_count(out) - req_count(trace)) <= 1 + abs(rec.n_req - in_window(trace, F1, Kind.REQ, 20, 26))


def test_overlapping_replay_window_allowed(trace):
    rec = record_window(trace, F1, 5.0, 15.0)
    out = apply_attack(trace, AttackScenario(AttackKind.REPLAY, F1, 10.0, recording=rec))
    t = out.t_ns[out.mask(F1, Kind.REQ)]
    assert np.all(np.diff(t) > 0)


def test_recording_is_immutable(trace):
    rec = record_window(trace, F1, 5.0, 6.0)
    with pytest.raises(ValueError):
        rec.t_ns[0] = 0


@settings(max_examples=15, deadline=None)
@given(st.floats(1.0, 30.0), st.floats(0.5, 8.0), st.sampled_from(["DOS", "MITM", "MASQ_NAIVE", "MASQ_PDK"]))
def test_any_window_gives_valid_seq(trace, start, length, kind):
    sc = AttackScenario(kind, F1, start, start + length, delta_ms=3.0, period_ms=20.0, jitter_ms=2.0,
                        target_mean_ms=22.0, attacker_jitter_ms=1.0)
    out = apply_attack(trace, sc)
    seq = out.seq[out.mask(F1, Kind.REQ)]
    assert (np.diff(seq) == 1).all()


def test_errors(trace):
    with pytest.raises(AttackError, match="no events"):
        record_window(trace, F1, 100.0, 101.0)
    with pytest.raises(AttackError, match="non-empty recording"):
        AttackScenario(AttackKind.REPLAY, F1, 1.0)
    with pytest.raises(ConfigError, match="source"):
        AttackScenario(AttackKind.MASQ_FDK, F1, 1.0, 2.0, source=np.empty(0))
    with pytest.raises(ConfigError):
        AttackScenario(AttackKind.MITM, F1, 5.0, 2.0, delta_ms=1.0)
    with pytest.raises(AttackError, match="outside"):
        apply_attack(trace, AttackScenario(AttackKind.DOS, F1, 500.0, 600.0))
    with pytest.raises(ConfigError) as e:
        scenario_from_dict({"kind": "MITM", "target_flow": "FIT-201", "start_s": 1, "end_s": 2, "delta": 5})
    assert e.value.path == "/attack/delta"


def test_fdk_zero_jitter_passes_ks(swat6, victim_iats):
    reference = estimate_tesc(simulate(dataclasses.replace(with_seed(swat6, 2), duration_s=600.0)), F1).samples
    accepted = []
    for trial in range(100):
        tr = simulate(dataclasses.replace(with_seed(swat6, 1000 + trial), duration_s=8.0))
        out = apply_attack(tr, AttackScenario(AttackKind.MASQ_FDK, F1, 1.0, 4.0, source=victim_iats, seed=trial))
        s = estimate_tesc(out, F1)
        t = s.times_s()
        x = s.samples[(t > 1.0) & (t <= 4.0)][:120]
        assert len(x) == 120
        accepted.append(not ks_decide(x, reference, 0.05).reject_null)
    assert np.mean(accepted) >= 0.90
