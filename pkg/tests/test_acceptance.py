"""End-to-end acceptance criteria, each run at its stated tolerance.

Every test records a PASS/FAIL line (printed in the terminal summary) and
then asserts, so a missed criterion shows up both ways.
"""
import dataclasses
import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import record
from scancycle.attacklab import AttackKind, AttackScenario, apply_attack
from scancycle.cli import (
    DEFAULT_ANALYSIS,
    fingerprint_sweep,
    labelled_dataset,
    main,
    oneclass_models,
    parse_experiment,
    rejection_rate,
    split_chunks,
    statemodel_experiment,
    tesc_by_flow,
    watermark_enrollment,
    watermark_experiment,
)
from scancycle.featurize import dft_magnitudes, featurize_series, feature_matrix
from scancycle.fingerprint import OUTLIER, Mode, kkt_violations, train
from scancycle.ksdetect import ks_critical, ks_decide, ks_statistic
from scancycle.simnet import load_plant, simulate, simulate_detailed, with_seed
from scancycle.statemodel import StateSpaceModel, kalman_filter, steady_state_gain
from scancycle.tracestore import compute_eta, estimate_tesc
from scancycle.watermark import VerifyOutcome, apply_schedule, verify_watermark

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
# mean request inter-arrival per source PLC on the reference testbed (ms)
TABLE_TESC = {1: 22.153, 2: 34.327, 3: 39.814, 4: 44.529, 5: 57.126, 6: 25.364}
CHUNK = 120
ENROLL_S = 6000.0  # long enough for about 800 chunks of the slowest PLC


@pytest.fixture(scope="module")
def plant():
    return load_plant(CONFIGS / "swat6.json")


def sim(plant, seed, duration):
    return simulate(dataclasses.replace(with_seed(plant, seed), duration_s=float(duration)))


@pytest.fixture(scope="module")
def enrollment(plant):
    return tesc_by_flow(sim(plant, 1, ENROLL_S))


@pytest.fixture(scope="module")
def oneclass(enrollment):
    return oneclass_models(enrollment, DEFAULT_ANALYSIS)


# ---------------------------------------------------------------------------

def test_criterion_1_simulator_calibration(plant):
    checks = []
    t0 = time.perf_counter()
    trace = simulate(dataclasses.replace(plant, duration_s=60.0))
    elapsed = time.perf_counter() - t0
    long = simulate_detailed(dataclasses.replace(with_seed(plant, 21), duration_s=600.0))
    for f in plant.flows:
        s = estimate_tesc(long.trace, f.flow)
        want = TABLE_TESC[f.src]
        rel = abs(s.mean() - want) / want
        checks.append((f"PLC{f.src} E[T_ESC] {s.mean():.2f} vs {want} ms ({rel * 100:.1f}%)", rel <= 0.10))
        eta_min = float(np.min(s.samples / long.plcs[f.src].mean_scan_ms))
        eta = compute_eta(s, plant.profile(f.src).scan_mean_ms)
        checks.append((f"PLC{f.src} eta {eta:.2f}, min per-sample {eta_min:.2f}", eta_min >= 1.0))
    checks.append((f"60 s x 6 PLCs in {elapsed:.2f} s ({len(trace)} events)", elapsed < 10.0))
    assert record(1, "simulator calibration", checks)


def test_criterion_2_multiclass_fingerprinting(plant):
    rows = {r["chunk_size"]: r["accuracy"] for r in fingerprint_sweep(plant, [10, 120], DEFAULT_ANALYSIS)}
    checks = [
        (f"5-fold CV at chunk 120: {rows[120] * 100:.2f}%", rows[120] >= 0.95),
        (f"chunk 10 {rows[10] * 100:.2f}% < chunk 120 {rows[120] * 100:.2f}%", rows[10] < rows[120]),
    ]
    assert record(2, "multi-class fingerprinting", checks)


def test_criterion_3_oneclass_holdout(plant, oneclass):
    holdout = tesc_by_flow(sim(plant, 2, 1200.0))
    checks = []
    for flow, model in sorted(oneclass.items()):
        acc = 1.0 - rejection_rate(model, holdout[flow], CHUNK)
        checks.append((f"PLC{flow.src} hold-out acceptance {acc * 100:.1f}%", acc >= 0.90))
    assert record(3, "one-class hold-out acceptance", checks)


def attack_tpr(model, trace, flow, scenario):
    # masquerades replace the victim one-for-one, so the forged run can end
    # before the window does; only the forged inter-arrivals are scored
    n = len(estimate_tesc(trace, flow).window(scenario.start_s, scenario.end_s))
    s = estimate_tesc(apply_attack(trace, scenario), flow).window(scenario.start_s, scenario.end_s)
    v = featurize_series(s.samples[:n], CHUNK)
    return float(np.mean(model.predict(feature_matrix(v)) == OUTLIER)), len(v)


def test_criterion_4_static_fingerprint_attacks(plant, enrollment, oneclass):
    trace = sim(plant, 3, 400.0)
    checks = []
    fdk = {}
    for flow, model in sorted(oneclass.items()):
        normal = enrollment[flow]
        start, end = 10.0, 390.0
        mitm, n = attack_tpr(model, trace, flow, AttackScenario(AttackKind.MITM, flow, start, end, delta_ms=5.0))
        checks.append((f"PLC{flow.src} MITM+5 TPR {mitm * 100:.0f}% ({n} chunks)", mitm == 1.0))
        naive, n = attack_tpr(model, trace, flow, AttackScenario(
            AttackKind.MASQ_NAIVE, flow, start, end, period_ms=round(normal.mean()), jitter_ms=0.0))
        checks.append((f"PLC{flow.src} MASQ_NAIVE TPR {naive * 100:.0f}%", naive == 1.0))
        fdk[flow.src], _ = attack_tpr(model, trace, flow, AttackScenario(
            AttackKind.MASQ_FDK, flow, start, end, source=normal.samples, attacker_jitter_ms=0.0, seed=flow.src))
    best = min(fdk, key=fdk.get)
    listing = ", ".join(f"PLC{k} {v * 100:.0f}%" for k, v in sorted(fdk.items()))
    checks.append((f"MASQ_FDK TPR {listing}; lowest PLC{best}", fdk[best] <= 0.10))
    assert record(4, "static fingerprint vs attacks", checks)


def test_criterion_5_ks_suite(plant):
    rng = np.random.default_rng(55)
    s = estimate_tesc(sim(plant, 7, 1200.0), "FIT-201").samples
    chunks = [s[i * CHUNK:(i + 1) * CHUNK] for i in range(len(s) // CHUNK)]
    pairs = [(chunks[2 * i], chunks[2 * i + 1]) for i in range(len(chunks) // 2)]
    same = float(np.mean([not ks_decide(a, b, 0.05).reject_null for a, b in pairs]))
    h0 = float(np.mean([ks_decide(rng.normal(size=120), rng.normal(size=120), 0.05).reject_null
                        for _ in range(2000)]))
    worst = 0.0
    for _ in range(200):
        a = rng.normal(size=int(rng.integers(1, 60)))
        b = rng.normal(rng.uniform(-1, 1), 1, size=int(rng.integers(1, 60)))
        brute = max(abs(np.mean(a <= x) - np.mean(b <= x)) for x in np.r_[a, b])
        worst = max(worst, abs(ks_statistic(a, b) - brute))
    thr = ks_critical(0.05, 120, 120)
    checks = [
        (f"same-PLC chunk pairs accepted {same * 100:.2f}% over {len(pairs)} pairs", same >= 0.99),
        (f"H0 rejection at alpha 0.05: {h0:.4f} over 2000 trials", 0.02 <= h0 <= 0.09),
        (f"brute-force oracle max |diff| {worst:.1e} over 200 cases", worst <= 1e-12),
        (f"c(0.05)*sqrt(2/120) = {thr:.5f}", abs(thr - 0.1580) <= 1e-4),
    ]
    assert record(5, "K-S suite", checks)


def wm_config(watermark, duration):
    return parse_experiment({"plant_file": str(CONFIGS / "swat6.json"), "watermark": watermark,
                             "analysis": {"test_duration_s": duration}})


def test_criterion_6_watermark_verification():
    checks = []
    for wm in ({"plc_id": 1, "kind": "CONSTANT", "alpha_ms": 40.0},
               {"plc_id": 1, "kind": "RANDOM", "alpha_min_ms": 5.0, "alpha_max_ms": 45.0, "dwell_min": 50,
                "dwell_max": 200, "seed": 7}):
        body = watermark_experiment(wm_config(wm, 600.0))
        n = sum(1 for c in body["chunks"] if c["source"] == "live")
        checks.append((f"{wm['kind']} changed vs baseline {body['live_changed_rate'] * 100:.2f}% ({n} chunks)",
                       body["live_changed_rate"] >= 0.95))
        checks.append((f"{wm['kind']} watchdog faults {body['faults']}", body["faults"] == 0))
    assert record(6, "watermark verification", checks)


def test_criterion_7_replay_detection(plant):
    wm = {"plc_id": 1, "kind": "RANDOM", "alpha_min_ms": 5.0, "alpha_max_ms": 45.0, "dwell_min": 50,
          "dwell_max": 200, "seed": 7}
    cfg = wm_config(wm, 600.0)
    body = statemodel_experiment(cfg)
    alpha = cfg.analysis["alpha_sig"]
    checks = [
        (f"replay without watermark alarm rate {body['replay_no_watermark_alarm_rate'] * 100:.2f}% "
         f"(limit {(alpha + 0.02) * 100:.0f}%)", body["replay_no_watermark_alarm_rate"] <= alpha + 0.02),
        (f"replay with watermark TPR {body['replay_watermark_alarm_rate'] * 100:.2f}%",
         body["replay_watermark_alarm_rate"] >= 0.95),
    ]
    # full-distribution masquerader imitating the unwatermarked PLC while the watermark is commanded
    _, sched = cfg.watermark
    flow = [f.flow for f in plant.flows if f.src == 1][0]
    ref = watermark_enrollment(plant, 1, sched, flow, 100, 600.0)
    live = simulate(dataclasses.replace(with_seed(apply_schedule(plant, 1, sched), 5), duration_s=600.0))
    attacked = apply_attack(live, AttackScenario(AttackKind.MASQ_FDK, flow, 5.0, 595.0,
                                                 source=ref.baseline.samples, seed=11))
    obs = estimate_tesc(attacked, flow).window(5.0, 595.0)
    caught = [verify_watermark(c, ref).outcome is not VerifyOutcome.AUTHENTIC for c in split_chunks(obs, CHUNK)]
    tpr = float(np.mean(caught))
    checks.append((f"MASQ_FDK against watermark TPR {tpr * 100:.2f}% ({len(caught)} chunks)", tpr >= 0.80))
    assert record(7, "replay detection", checks)


def test_criterion_8_numerics(plant):
    rng = np.random.default_rng(88)
    worst = 0.0
    pars = 0.0
    for n in range(1, 65):
        x = rng.normal(20, 3, n)
        k = np.arange(n)
        naive = np.abs(np.exp(-2j * np.pi * np.outer(k, k) / n) @ x)
        _, m = dft_magnitudes(x)
        worst = max(worst, float(np.max(np.abs(m - naive) / np.maximum(naive, 1e-300 + np.abs(x).sum() * 1e-9))))
        pars = max(pars, abs(np.sum(x**2) - np.sum(m**2) / n) / np.sum(x**2))
    ds = labelled_dataset(tesc_by_flow(sim(plant, 1, 600.0)), CHUNK, 150)
    kkt = float(kkt_violations(train(ds, Mode.MULTI), ds).max())

    model = StateSpaceModel([[0.6, 1.0], [-0.2, 0.0]], [0.4, 0.1], [1.0, 0.0], [[0.3, 0.0], [0.0, 0.1]], [[0.2]],
                            0.0, 0.0)
    N = 5000
    u = rng.normal(0, 2, N)
    x = np.zeros(2)
    y = np.empty(N)
    for i in range(N):
        y[i] = x[0] + rng.normal(0, math.sqrt(0.2))
        x = model.A @ x + model.B[:, 0] * u[i] + rng.multivariate_normal([0, 0], model.Q)
    st = kalman_filter(model, u, y).stats
    mean_ok = abs(st.mean) <= 3 * math.sqrt(st.covariance) / math.sqrt(N)
    cov_rel = abs(st.covariance - st.expected_cov) / st.expected_cov

    # residual expansion under replay with a watermark, known system and gain
    L, _ = steady_state_gain(model)
    ua, ur = rng.normal(0, 1, 300), rng.normal(0, 1, 300)
    du = np.repeat(rng.uniform(0.5, 2.0, 10), 30)
    v = rng.multivariate_normal([0, 0], model.Q, 300)
    w = rng.normal(0, math.sqrt(0.2), 300)
    xa = np.zeros((301, 2))
    for i in range(300):
        xa[i + 1] = model.A @ xa[i] + model.B[:, 0] * ua[i] + v[i]
    res = kalman_filter(model, ur + du, xa[:300, 0] + w, fixed_gain=L)
    r, xh = res.stats.residuals, res.state.x_pred
    C, A, CB = model.C[0], model.A, model.cb
    CAL = float(C @ A @ L[:, 0])
    gap = max(abs(r[i + 1] - ((C @ A - CAL * C) @ (xa[i] - xh[i]) + CB * (ua[i] - ur[i]) - CB * du[i]
                              + C @ v[i] + w[i + 1] - CAL * w[i])) for i in range(299))
    checks = [
        (f"FFT vs naive DFT, lengths 1-64, max rel err {worst:.1e}", worst <= 1e-9),
        (f"Parseval max rel err {pars:.1e}", pars <= 1e-9),
        (f"SVM max KKT violation {kkt:.1e} on {len(ds)} training vectors", kkt <= 1e-3),
        (f"Kalman residual mean {st.mean:.4f} within 3 sigma/sqrt(N)", mean_ok),
        (f"residual covariance {st.covariance:.4f} vs CPC'+R {st.expected_cov:.4f} ({cov_rel * 100:.1f}%)",
         cov_rel <= 0.25),
        (f"residual expansion term-by-term max gap {gap:.1e}", gap <= 1e-9),
    ]
    assert record(8, "numerics", checks)


def test_criterion_9_determinism(tmp_path, capsys):
    exp = {"plant_file": str(CONFIGS / "swat6.json"),
           "watermark": {"plc_id": 1, "kind": "RANDOM", "alpha_min_ms": 5.0, "alpha_max_ms": 45.0,
                         "dwell_min": 50, "dwell_max": 200, "seed": 7},
           "attack": {"kind": "REPLAY", "target_flow": "FIT-201", "start_s": 20.0, "record_start_s": 2.0,
                      "record_end_s": 12.0},
           "analysis": {"train_duration_s": 200.0, "test_duration_s": 120.0, "max_per_class": 60}}
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps(exp))

    def pipeline(out):
        out.mkdir()
        cmds = [
            ["simulate", "--config", cfg, "--duration", 30, "--out", out / "trace.csv"],
            ["attack", "--config", cfg, "--trace", out / "trace.csv", "--out", out / "attacked.csv"],
            ["fingerprint", "--config", cfg, "--sweep", "chunk=30,120", "--out", out],
            ["fingerprint", "--config", cfg, "--mode", "ONECLASS", "--out", out / "oc"],
            ["watermark", "--config", cfg, "--out", out],
            ["statemodel", "--config", cfg, "--out", out],
            ["report", out],
        ]
        codes = [main([str(a) for a in c]) for c in cmds]
        capsys.readouterr()
        return codes, {p.relative_to(out).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
                       for p in sorted(out.rglob("*")) if p.is_file()}

    codes_a, a = pipeline(tmp_path / "a")
    codes_b, b = pipeline(tmp_path / "b")
    differ = sorted(k for k in a if a.get(k) != b.get(k))
    checks = [
        (f"exit codes {codes_a}", all(c == 0 for c in codes_a + codes_b)),
        (f"{len(a)} output files compared, {len(differ)} differ {differ}", a == b and len(a) >= 10),
    ]
    assert record(9, "determinism", checks)
