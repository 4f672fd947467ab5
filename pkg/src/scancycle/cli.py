"""Command-line harness: simulate, attack, fingerprint, watermark, statemodel, report.

Examples:
  scancycle simulate --out run/trace.csv
  scancycle fingerprint --sweep chunk=10,30,60,100,120,150,200 --out run
  scancycle watermark --config configs/watermark40.json --out run
  scancycle report run
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import __version__
from .attacklab import AttackError, AttackKind, apply_attack, record_window, scenario_from_dict
from .featurize import DEFAULT_CHUNK, FeatureError, featurize_series
from .fingerprint import (
    Dataset,
    FingerprintError,
    Mode,
    cross_validate,
    evaluate,
    feature_matrix,
    train,
)
from .ksdetect import DEFAULT_ALPHA, KsError, ks_decide
from .simnet import ConfigError, PlantConfig, plant_from_dict, simulate, simulate_detailed, with_seed
from .statemodel import (
    StateModelError,
    closed_loop_series,
    detect_replay_with_watermark,
    fit_state_space,
    kalman_filter,
    residual_alarms,
)
from .tracestore import Flow, TescSeries, TraceError, estimate_tesc, load_trace, response_iat, save_trace
from .watermark import (
    DEFAULT_ALPHA_SIG,
    WatermarkError,
    WatermarkReference,
    WatermarkSchedule,
    apply_schedule,
    schedule_from_dict,
    verify_watermark,
)

log = logging.getLogger("scancycle")

DEFAULT_SEEDS = {"train": 1, "test": 2, "enroll": 100, "live": 5, "replay": 6}
DEFAULT_ANALYSIS = {
    "chunk_size": DEFAULT_CHUNK,
    "alpha": DEFAULT_ALPHA,
    "alpha_sig": DEFAULT_ALPHA_SIG,
    "k_folds": 5,
    "C": 10.0,
    "nu": 0.05,
    "gamma": None,
    "order": 1,
    "threshold_sigma": 3.0,
    "train_duration_s": 600.0,
    "test_duration_s": 120.0,
    "max_per_class": 150,
    "seeds": DEFAULT_SEEDS,
}


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class ExperimentConfig:
    plant: PlantConfig
    raw: dict
    watermark: tuple[int, WatermarkSchedule] | None = None
    attack: dict | None = None
    analysis: dict = dataclasses.field(default_factory=lambda: dict(DEFAULT_ANALYSIS))
    output_dir: str | None = None

    @property
    def seeds(self) -> dict:
        return self.analysis["seeds"]

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def bundled_config() -> dict:
    text = resources.files("scancycle").joinpath("data/swat6.json").read_text(encoding="utf-8")
    return json.loads(text)


def parse_experiment(data: Mapping, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("/", "expected an object")
    known = {"plant", "plant_file", "watermark", "attack", "analysis", "output_dir"}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"/{sorted(extra)[0]}", "unknown field")
    raw = dict(data)
    if "plant" in data:
        plant_doc = data["plant"]
    elif "plant_file" in data:
        p = Path(data["plant_file"])
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        if not p.exists():
            raise ConfigError("/plant_file", f"file not found: {p}")
        doc = json.loads(p.read_text(encoding="utf-8"))
        plant_doc = doc.get("plant", doc)
        raw = {**raw, "plant": plant_doc}
        raw.pop("plant_file")
    else:
        plant_doc = bundled_config()["plant"]
        raw = {**raw, "plant": plant_doc}
    plant = plant_from_dict(plant_doc, "/plant")
    wm = None
    if data.get("watermark") is not None:
        w = data["watermark"]
        if not isinstance(w, Mapping) or "plc_id" not in w:
            raise ConfigError("/watermark/plc_id", "missing required field")
        sched = schedule_from_dict({k: v for k, v in w.items() if k != "plc_id"}, "/watermark")
        plant.profile(w["plc_id"])
        wm = (int(w["plc_id"]), sched)
    analysis = dict(DEFAULT_ANALYSIS)
    a = data.get("analysis", {})
    if not isinstance(a, Mapping):
        raise ConfigError("/analysis", "expected an object")
    for k, v in a.items():
        if k not in DEFAULT_ANALYSIS and k not in ("sweep", "target_plc"):
            raise ConfigError(f"/analysis/{k}", "unknown field")
        if k == "seeds":
            if not isinstance(v, Mapping):
                raise ConfigError("/analysis/seeds", "expected an object")
            bad = set(v) - set(DEFAULT_SEEDS)
            if bad:
                raise ConfigError(f"/analysis/seeds/{sorted(bad)[0]}", "unknown seed name")
            v = {**DEFAULT_SEEDS, **v}
        analysis[k] = v
    if not 0 < analysis["alpha"] < 1:
        raise ConfigError("/analysis/alpha", "must be in (0, 1)")
    if int(analysis["chunk_size"]) < 4:
        raise ConfigError("/analysis/chunk_size", "must be >= 4")
    return ExperimentConfig(plant, raw, wm, data.get("attack"), analysis, data.get("output_dir"))


def load_experiment(path: str | None) -> ExperimentConfig:
    if path is None:
        return parse_experiment(bundled_config())
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}: invalid JSON: {exc}") from None
    return parse_experiment(data, p.parent)


def _override(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.plant = with_seed(cfg.plant, args.seed)
        cfg.raw = {**cfg.raw, "seed_override": args.seed}
    if getattr(args, "alpha", None) is not None:
        cfg.analysis["alpha"] = args.alpha
        cfg.raw = {**cfg.raw, "alpha_override": args.alpha}
    if getattr(args, "chunk_size", None) is not None:
        cfg.analysis["chunk_size"] = args.chunk_size
        cfg.raw = {**cfg.raw, "chunk_override": args.chunk_size}
    return cfg


# ---------------------------------------------------------------------------
# Pipelines (also used directly by the acceptance suite)
# ---------------------------------------------------------------------------

def run_plant(plant: PlantConfig, seed: int, duration_s: float | None = None):
    cfg = with_seed(plant, seed)
    if duration_s is not None:
        cfg = dataclasses.replace(cfg, duration_s=float(duration_s))
    return simulate(cfg)


def tesc_by_flow(trace) -> dict[Flow, TescSeries]:
    return {f: estimate_tesc(trace, f) for f in trace.flows()}


def labelled_dataset(series: Mapping[Flow, TescSeries], chunk_size: int, max_per_class: int | None = None) -> Dataset:
    vecs = []
    for flow, s in series.items():
        v = featurize_series(s, chunk_size, label=flow.src)
        if max_per_class:
            v = v[:max_per_class]
        vecs.extend(v)
    if not vecs:
        raise CliError(f"no complete chunks of size {chunk_size}")
    return Dataset.from_vectors(vecs)


def fingerprint_sweep(plant: PlantConfig, chunks, analysis: Mapping) -> list[dict]:
    """k-fold multi-class accuracy per chunk size on one simulated run."""
    seeds = analysis["seeds"]
    trace = run_plant(plant, seeds["train"], analysis["train_duration_s"])
    series = tesc_by_flow(trace)
    rows = []
    for size in chunks:
        ds = labelled_dataset(series, size, analysis["max_per_class"])
        acc = cross_validate(ds, analysis["k_folds"], Mode.MULTI, seed=seeds["train"], C=analysis["C"],
                             gamma=analysis["gamma"])
        rows.append({"chunk_size": int(size), "n_vectors": len(ds), "k": analysis["k_folds"], "accuracy": acc})
    return rows


def oneclass_models(series: Mapping[Flow, TescSeries], analysis: Mapping) -> dict:
    size = int(analysis["chunk_size"])
    out = {}
    for flow, s in series.items():
        ds = Dataset.from_vectors(featurize_series(s, size, label=flow.src))
        out[flow] = train(ds, Mode.ONECLASS, nu=analysis["nu"], gamma=analysis["gamma"])
    return out


def rejection_rate(model, series: TescSeries, chunk_size: int) -> float:
    v = featurize_series(series, chunk_size)
    if not v:
        raise CliError(f"series too short for chunk size {chunk_size}")
    return float(np.mean(model.predict(feature_matrix(v)) == -1))


def watermark_enrollment(plant: PlantConfig, plc_id: int, schedule: WatermarkSchedule, flow, seed: int,
                         duration_s: float | None = None) -> WatermarkReference:
    base = run_plant(plant, seed, duration_s)
    marked = run_plant(apply_schedule(plant, plc_id, schedule), seed + 1, duration_s)
    return WatermarkReference(estimate_tesc(base, flow), estimate_tesc(marked, flow))


def split_chunks(series: TescSeries, size: int) -> list[TescSeries]:
    out = []
    t0 = series.t0_s
    for i in range(len(series) // size):
        seg = series.samples[i * size:(i + 1) * size]
        out.append(TescSeries(series.flow, seg, t0))
        t0 += float(np.sum(seg)) / 1000.0
    return out


def watermark_experiment(cfg: ExperimentConfig) -> dict:
    if cfg.watermark is None:
        raise CliError("config has no watermark section")
    plc_id, schedule = cfg.watermark
    a = cfg.analysis
    seeds = a["seeds"]
    size = int(a["chunk_size"])
    flows = [f.flow for f in cfg.plant.flows if f.src == plc_id]
    if not flows:
        raise CliError(f"PLC {plc_id} originates no flow")
    flow = flows[0]
    dur = a["test_duration_s"]
    ref = watermark_enrollment(cfg.plant, plc_id, schedule, flow, seeds["enroll"], dur)
    live_res = simulate_detailed(dataclasses.replace(
        with_seed(apply_schedule(cfg.plant, plc_id, schedule), seeds["live"]), duration_s=float(dur)))
    faults = len(live_res.trace.faults())
    live = estimate_tesc(live_res.trace, flow)
    replay = estimate_tesc(run_plant(cfg.plant, seeds["replay"], dur), flow)
    rows = []
    for label, s in (("live", live), ("replay", replay)):
        for c in split_chunks(s, size):
            v = verify_watermark(c, ref, a["alpha_sig"], size)
            changed = ks_decide(c.samples, ref.baseline.samples, a["alpha"]).reject_null
            rows.append({"source": label, "outcome": v.outcome.value, "d_baseline": v.vs_baseline.d_nm,
                         "d_expected": v.vs_expected.d_nm, "changed": bool(changed), "mean_ms": v.observed_mean})
    live_rows = [r for r in rows if r["source"] == "live"]
    rep_rows = [r for r in rows if r["source"] == "replay"]
    return {
        "plc_id": plc_id,
        "flow": str(flow),
        "schedule": schedule.to_dict(),
        "chunk_size": size,
        "baseline_mean_ms": ref.baseline.mean(),
        "expected_mean_ms": ref.expected.mean(),
        "faults": faults,
        "live_authentic_rate": _frac(r["outcome"] == "AUTHENTIC" for r in live_rows),
        "live_changed_rate": _frac(r["changed"] for r in live_rows),
        "replay_spoofed_rate": _frac(r["outcome"] == "SPOOFED" for r in rep_rows),
        "chunks": rows,
    }


def _frac(it) -> float:
    xs = list(it)
    return float(np.mean(xs)) if xs else float("nan")


def flow_io(res, flow: Flow):
    """Model-aligned (u, y, du) for one flow of a detailed simulation."""
    u, y = response_iat(res.trace, flow)
    du = res.flows[flow].offset_ms[:len(u)]
    return u[1:], y[:-1], du[1:]


def statemodel_experiment(cfg: ExperimentConfig) -> dict:
    a = cfg.analysis
    seeds = a["seeds"]
    w = int(a["chunk_size"])
    dur = float(a["test_duration_s"])
    if cfg.watermark is None:
        raise CliError("config has no watermark section")
    plc_id, schedule = cfg.watermark
    flow = [f.flow for f in cfg.plant.flows if f.src == plc_id][0]

    def detailed(plant, seed):
        return simulate_detailed(dataclasses.replace(with_seed(plant, seed), duration_s=dur))

    enroll = detailed(cfg.plant, seeds["enroll"])
    u, y = closed_loop_series(enroll.trace, flow)
    model = fit_state_space(u, y, int(a["order"]))
    ref = kalman_filter(model, u, y).stats
    # replay without watermark: the defender sees recorded requests and responses
    ua, ya, _ = flow_io(detailed(cfg.plant, seeds["replay"]), flow)
    rep_stats = kalman_filter(model, ua, ya).stats
    no_wm = residual_alarms(rep_stats, w, a["threshold_sigma"], ref, a["alpha_sig"])
    # with watermark: live requests carry du; responses are live or replayed
    ul, yl, dl = flow_io(detailed(apply_schedule(cfg.plant, plc_id, schedule), seeds["live"]), flow)
    live_alarm, rep_alarm = [], []
    for i in range(min(len(ul), len(ya)) // w):
        s = slice(i * w, (i + 1) * w)
        live_alarm.append(detect_replay_with_watermark(model, None, dl[s], ul[s], yl[s], a["threshold_sigma"], ref).alarm)
        rep_alarm.append(detect_replay_with_watermark(model, None, dl[s], ul[s], ya[s], a["threshold_sigma"], ref).alarm)
    return {
        "plc_id": plc_id,
        "flow": str(flow),
        "model": model.to_dict(),
        "enrollment": ref.to_dict(),
        "window": w,
        "replay_no_watermark_alarm_rate": _frac(no_wm),
        "live_watermark_alarm_rate": _frac(live_alarm),
        "replay_watermark_alarm_rate": _frac(rep_alarm),
    }


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def write_report(out_dir: Path, name: str, cfg: ExperimentConfig, body: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"report": name, "version": __version__, "config_hash": cfg.config_hash(), **body}
    path = out_dir / f"{name}_report.json"
    path.write_text(json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(_fmt(v) for v in r))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path("run")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _override(load_experiment(args.config), args)
    plant = cfg.plant
    if cfg.watermark is not None:
        plant = apply_schedule(plant, *cfg.watermark)
    if args.duration is not None:
        plant = dataclasses.replace(plant, duration_s=args.duration)
    trace = simulate(plant)
    out = Path(args.out) if args.out else _out_dir(args, cfg) / "trace.csv"
    if out.suffix != ".csv":
        out = out / "trace.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_trace(trace, out)
    print(f"wrote {len(trace)} events ({len(trace.flows())} flows) to {out}")
    return 0


def cmd_attack(args) -> int:
    cfg = load_experiment(args.config)
    if cfg.attack is None:
        raise ConfigError("/attack", "missing required section")
    trace = load_trace(args.trace)
    a = dict(cfg.attack)
    recording = source = None
    if a.get("kind") == AttackKind.REPLAY.value:
        if "record_start_s" not in a or "record_end_s" not in a:
            raise ConfigError("/attack/record_start_s", "REPLAY needs record_start_s and record_end_s")
        recording = record_window(trace, a["target_flow"], a["record_start_s"], a["record_end_s"])
    if a.get("kind") == AttackKind.MASQ_FDK.value:
        s = estimate_tesc(trace, a["target_flow"])
        lo = a.get("source_start_s", s.t0_s)
        hi = a.get("source_end_s", a.get("start_s", float("inf")))
        source = s.window(lo, hi).samples
    scenario = scenario_from_dict(a, "/attack", recording=recording, source=source)
    attacked = apply_attack(trace, scenario)
    out = Path(args.out) if args.out else Path(args.trace).with_name("attacked.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_trace(attacked, out)
    print(f"{scenario.kind.value} on {a['target_flow']}: {len(trace)} -> {len(attacked)} events, wrote {out}")
    return 0


def _parse_sweep(text: str) -> list[int]:
    key, _, vals = text.partition("=")
    if key != "chunk" or not vals:
        raise CliError(f"--sweep expects chunk=N1,N2,..., got {text!r}")
    try:
        return [int(v) for v in vals.split(",")]
    except ValueError:
        raise CliError(f"--sweep: bad chunk list {vals!r}") from None


def _traces_series(paths) -> dict[Flow, list[TescSeries]]:
    out: dict[Flow, list[TescSeries]] = {}
    for p in paths:
        for f, s in tesc_by_flow(load_trace(p)).items():
            out.setdefault(f, []).append(s)
    return out


def _merge(series_lists) -> dict[Flow, TescSeries]:
    return {f: TescSeries(f, np.concatenate([s.samples for s in ss]), ss[0].t0_s) for f, ss in series_lists.items()}


def cmd_fingerprint(args) -> int:
    cfg = _override(load_experiment(args.config), args)
    a = cfg.analysis
    out_dir = _out_dir(args, cfg)
    mode = Mode(args.mode)
    body: dict[str, Any] = {"mode": mode.value}
    if args.k is not None:
        a["k_folds"] = args.k
    if mode is Mode.MULTI:
        chunks = _parse_sweep(args.sweep) if args.sweep else [int(a["chunk_size"])]
        if args.train:
            series = _merge(_traces_series(args.train))
            rows = []
            for size in chunks:
                ds = labelled_dataset(series, size, a["max_per_class"])
                acc = cross_validate(ds, a["k_folds"], mode, seed=a["seeds"]["train"], C=a["C"], gamma=a["gamma"])
                rows.append({"chunk_size": size, "n_vectors": len(ds), "k": a["k_folds"], "accuracy": acc})
        else:
            rows = fingerprint_sweep(cfg.plant, chunks, a)
        body["sweep"] = rows
        table = [(r["chunk_size"], r["n_vectors"], r["k"], r["accuracy"]) for r in rows]
        write_csv(out_dir_mk(out_dir) / "fingerprint_sweep.csv", ["chunk_size", "n_vectors", "k", "accuracy"], table)
        print(f"{'chunk':>6} {'vectors':>8} {'k':>3} {'accuracy':>9}")
        for c, n, k, acc in table:
            print(f"{c:>6} {n:>8} {k:>3} {acc * 100:>8.2f}%")
    else:
        size = int(a["chunk_size"])
        train_series = _merge(_traces_series(args.train)) if args.train else tesc_by_flow(
            run_plant(cfg.plant, a["seeds"]["train"], a["train_duration_s"]))
        test_series = _merge(_traces_series(args.test)) if args.test else tesc_by_flow(
            run_plant(cfg.plant, a["seeds"]["test"], a["test_duration_s"]))
        per = []
        for flow in sorted(train_series):
            if args.target is not None and flow.src != args.target:
                continue
            if mode is Mode.ONECLASS:
                ds = Dataset.from_vectors(featurize_series(train_series[flow], size, label=flow.src))
                model = train(ds, mode, nu=a["nu"], gamma=a["gamma"])
                vt = featurize_series(test_series[flow], size)
                pred = model.predict(feature_matrix(vt))
                rep = evaluate(pred.tolist(), [1] * len(vt), positive=1)
            else:
                vecs = []
                for f2, s in train_series.items():
                    vecs += featurize_series(s, size, label=int(f2.src == flow.src))[: a["max_per_class"]]
                model = train(Dataset.from_vectors(vecs), mode, C=a["C"], gamma=a["gamma"])
                tv, tl = [], []
                for f2, s in test_series.items():
                    v = featurize_series(s, size)[: a["max_per_class"]]
                    tv += v
                    tl += [int(f2.src == flow.src)] * len(v)
                pred = model.predict(feature_matrix(tv))
                rep = evaluate([int(p) for p in pred], tl, positive=1)
            per.append({"plc_id": flow.src, "flow": str(flow), **rep.as_dict()})
        body["per_plc"] = per
        write_csv(out_dir_mk(out_dir) / f"fingerprint_{mode.value.lower()}.csv", ["plc_id", "acc", "tpr", "fpr"],
                  [(r["plc_id"], r["acc"], r["tpr"], r["fpr"]) for r in per])
        print(f"{'plc':>4} {'acc':>8} {'tpr':>8} {'fpr':>8}")
        for r in per:
            print(f"{r['plc_id']:>4} {r['acc'] * 100:>7.2f}% {r['tpr'] * 100:>7.2f}% {r['fpr'] * 100:>7.2f}%")
    path = write_report(out_dir, "fingerprint", cfg, body)
    print(f"report: {path}")
    return 0


def out_dir_mk(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_watermark(args) -> int:
    cfg = _override(load_experiment(args.config), args)
    body = watermark_experiment(cfg)
    out_dir = _out_dir(args, cfg)
    path = write_report(out_dir, "watermark", cfg, body)
    print(f"PLC {body['plc_id']} {body['schedule']['kind']}: baseline {body['baseline_mean_ms']:.3f} ms, "
          f"watermarked {body['expected_mean_ms']:.3f} ms")
    print(f"  live chunks authentic: {body['live_authentic_rate'] * 100:.2f}%  "
          f"changed vs baseline: {body['live_changed_rate'] * 100:.2f}%")
    print(f"  replayed chunks spoofed: {body['replay_spoofed_rate'] * 100:.2f}%  faults: {body['faults']}")
    print(f"report: {path}")
    return 0


def cmd_statemodel(args) -> int:
    cfg = _override(load_experiment(args.config), args)
    body = statemodel_experiment(cfg)
    out_dir = _out_dir(args, cfg)
    path = write_report(out_dir, "statemodel", cfg, body)
    print(f"flow {body['flow']}: CB = {body['model']['B'][0]:.4f}, residual var {body['enrollment']['covariance']:.4f}")
    print(f"  replay without watermark, alarm rate: {body['replay_no_watermark_alarm_rate'] * 100:.2f}%")
    print(f"  live with watermark, alarm rate:      {body['live_watermark_alarm_rate'] * 100:.2f}%")
    print(f"  replay with watermark, alarm rate:    {body['replay_watermark_alarm_rate'] * 100:.2f}%")
    print(f"report: {path}")
    return 0


def _roc(neg: list[float], pos: list[float]) -> list[tuple[float, float, float]]:
    """(threshold, fpr, tpr) for 'score > threshold' over every observed score."""
    neg_a, pos_a = np.asarray(neg), np.asarray(pos)
    pts = [(float("inf"), 0.0, 0.0)]
    for thr in sorted(set(neg) | set(pos), reverse=True):
        pts.append((thr, float(np.mean(neg_a >= thr)) if len(neg_a) else 0.0,
                    float(np.mean(pos_a >= thr)) if len(pos_a) else 0.0))
    return pts


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    if not run.is_dir():
        raise CliError(f"not a directory: {run}")
    reports = sorted(run.glob("*_report.json"))
    traces = sorted(p for p in run.glob("*.csv") if _is_trace(p))
    if not reports and not traces:
        raise CliError(f"{run}: no reports or traces to aggregate")
    out = run / "aggregate"
    out.mkdir(exist_ok=True)
    written = []
    summary = []
    for p in reports:
        doc = json.loads(p.read_text(encoding="utf-8"))
        for k, v in sorted(doc.items()):
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                summary.append((doc.get("report", p.stem), k, v))
        for row in doc.get("sweep", []):
            summary.append(("fingerprint", f"accuracy_chunk_{row['chunk_size']}", row["accuracy"]))
        if doc.get("report") == "watermark":
            live = [c["d_expected"] for c in doc["chunks"] if c["source"] == "live"]
            rep = [c["d_expected"] for c in doc["chunks"] if c["source"] == "replay"]
            write_csv(out / "watermark_roc.csv", ["threshold", "fpr", "tpr"], _roc(live, rep))
            written.append("watermark_roc.csv")
    if summary:
        write_csv(out / "summary.csv", ["report", "metric", "value"], summary)
        written.append("summary.csv")
    ts_rows, ecdf_rows = [], []
    for p in traces:
        for f, s in tesc_by_flow(load_trace(p)).items():
            t = s.times_s()
            ts_rows += [(p.name, str(f), float(ti), float(v)) for ti, v in zip(t, s.samples)]
            xs = np.sort(s.samples)
            ecdf_rows += [(p.name, str(f), float(x), (i + 1) / len(xs)) for i, x in enumerate(xs)]
    if ts_rows:
        write_csv(out / "tesc_timeseries.csv", ["trace", "flow", "t_s", "tesc_ms"], ts_rows)
        write_csv(out / "tesc_ecdf.csv", ["trace", "flow", "tesc_ms", "F"], ecdf_rows)
        written += ["tesc_timeseries.csv", "tesc_ecdf.csv"]
    for name in written:
        print(out / name)
    return 0


def _is_trace(p: Path) -> bool:
    with p.open(encoding="utf-8") as fh:
        return fh.readline().strip() == "t_s,src,dst,kind,flow_tag,seq"


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scancycle", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, analysis=True):
        p.add_argument("--config", help="experiment JSON (default: bundled six-PLC benchmark)")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--seed", type=int, help="override the plant seed")
        if analysis:
            p.add_argument("--alpha", type=float, help="K-S significance level")
            p.add_argument("--chunk-size", type=int, help="samples per chunk")

    p = sub.add_parser("simulate", help="simulate the plant and write a trace CSV")
    common(p, analysis=False)
    p.add_argument("--duration", type=float, help="override simulated seconds")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("attack", help="apply the config's attack scenario to a trace")
    common(p, analysis=False)
    p.add_argument("--trace", required=True, help="input trace CSV")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("fingerprint", help="train and evaluate SVM fingerprints")
    common(p)
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.MULTI.value)
    p.add_argument("--train", nargs="+", help="training trace CSVs (default: simulate)")
    p.add_argument("--test", nargs="+", help="test trace CSVs (default: simulate)")
    p.add_argument("--sweep", help="chunk sizes, e.g. chunk=10,30,60,100,120,150,200")
    p.add_argument("--k", type=int, help="cross-validation folds")
    p.add_argument("--target", type=int, help="only this PLC (BINARY/ONECLASS)")
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("watermark", help="enroll and verify a watermark schedule")
    common(p)
    p.set_defaults(func=cmd_watermark)

    p = sub.add_parser("statemodel", help="fit the response model and test replay detection")
    common(p)
    p.set_defaults(func=cmd_statemodel)

    p = sub.add_parser("report", help="aggregate a run directory into plot-ready CSVs")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config {exc.path}: {exc.message}", file=sys.stderr)
        return 2
    except (CliError, TraceError, FeatureError, FingerprintError, KsError, WatermarkError, StateModelError,
            AttackError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
