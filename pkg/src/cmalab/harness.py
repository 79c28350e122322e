"""Run scenarios, fan members out over worker processes, and persist tables.

Workers only compute; every file is written by the parent process after the
results are collected and put in schedule order.
"""
import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mage
from .config import ExperimentConfig, validate_config
from .errors import CmaError, NoConvergence
from .scenarios import SCENARIO_TABLE, SERIES


@dataclass
class ScenarioResult:
    config: ExperimentConfig
    parameter: str
    rows: list
    failures: list
    summary: dict
    timings: list = field(default_factory=list)
    fields: list = field(default_factory=list)

    @property
    def passed(self):
        return bool(self.summary.get("passed", False))


def _run_member(raw, index, param):
    """Worker entry point: returns a picklable record, never raises."""
    cfg = ExperimentConfig(raw)
    _, _, member, _ = SCENARIO_TABLE[cfg.scenario]
    start = time.perf_counter()
    try:
        out = member(cfg, param, index)
    except (CmaError, ValueError, ArithmeticError) as exc:
        rec = {"param": param, "kind": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, NoConvergence):
            rec["best_residual"] = exc.best_residual
        return {"index": index, "param": param, "failure": rec, "seconds": time.perf_counter() - start}
    rows, blobs = out[0], out[1]
    extra = out[2] if len(out) > 2 else {}
    return {"index": index, "param": param, "rows": rows, "fields": blobs, "extra": extra,
            "seconds": time.perf_counter() - start}


def _execute(tasks, parallelism):
    """Run ``(raw, index, param)`` tasks; results come back in task order."""
    if parallelism <= 1 or len(tasks) <= 1:
        return [_run_member(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(parallelism, len(tasks))) as pool:
        futures = [pool.submit(_run_member, *t) for t in tasks]
        return [f.result() for f in futures]


def _assemble(cfg, records):
    parameter, _, _, summarize = SCENARIO_TABLE[cfg.scenario]
    rows, failures, timings, fields = [], [], [], []
    extra = {}
    for rec in records:
        timings.append({"param": rec["param"], "seconds": rec["seconds"]})
        if "failure" in rec:
            failures.append(rec["failure"])
            continue
        rows.extend(rec["rows"])
        fields.extend(rec["fields"])
        extra.update(rec.get("extra", {}))
    if rows:
        if cfg.scenario == "ContinuityPath":
            summary = summarize(cfg, rows, extra)
        else:
            summary = summarize(cfg, rows)
    else:
        summary = {"checks": {}}
    checks = summary.get("checks", {})
    summary["scenario"] = cfg.scenario
    summary["name"] = cfg.name
    summary["parameter"] = parameter
    summary["row_count"] = len(rows)
    summary["failure_count"] = len(failures)
    summary["quantities"] = quantity_stats(rows, parameter)
    summary["passed"] = bool(rows) and not failures and all(bool(v) for v in checks.values())
    return ScenarioResult(cfg, parameter, rows, failures, summary, timings, fields)


def quantity_stats(rows, parameter):
    out = {}
    if not rows:
        return out
    for key in rows[0]:
        if key == parameter:
            continue
        vals = [r.get(key) for r in rows]
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
            continue
        arr = np.asarray(vals, float)
        if not np.all(np.isfinite(arr)):
            continue
        d = np.diff(arr)
        out[key] = {
            "min": float(arr.min()),
            "max": float(arr.max()),
            "first": float(arr[0]),
            "last": float(arr[-1]),
            "trend": "flat" if d.size == 0 else ("nonincreasing" if np.all(d <= 0) else
                                                 "nondecreasing" if np.all(d >= 0) else "mixed"),
        }
    return out


def run_scenario(cfg, parallelism=None, out=None, dump_fields=False):
    """Run every member of one configuration and optionally persist the results."""
    return sweep([cfg], parallelism, out, dump_fields)[0]


def sweep(configs, parallelism=None, out=None, dump_fields=False):
    """Run several configurations; members of all of them share one pool."""
    cfgs = [c if isinstance(c, ExperimentConfig) else validate_config(c) for c in configs]
    if not cfgs:
        if out is not None:
            write_results(Path(out), [], [], {"configs": 0, "passed": True})
        return []
    if parallelism is None:
        parallelism = max(c.parallelism for c in cfgs)
    tasks, owners = [], []
    for ci, cfg in enumerate(cfgs):
        _, members, _, _ = SCENARIO_TABLE[cfg.scenario]
        for mi, param in enumerate(members(cfg)):
            tasks.append((cfg.raw, mi, param))
            owners.append(ci)
    records = _execute(tasks, int(parallelism))
    grouped = [[] for _ in cfgs]
    for owner, rec in zip(owners, records):
        grouped[owner].append(rec)
    results = [_assemble(cfg, recs) for cfg, recs in zip(cfgs, grouped)]
    if out is not None:
        out = Path(out)
        if len(results) == 1:
            _persist_single(cfgs[0], results[0], out, dump_fields)
        else:
            for i, res in enumerate(results):
                _persist_single(res.config, res, out / f"{i:02d}_{res.config.name}", dump_fields)
            rows = []
            for i, res in enumerate(results):
                for r in res.rows:
                    rows.append({"config": f"{i:02d}_{res.config.name}", **r})
            fails = [{"config": f"{i:02d}_{res.config.name}", **f} for i, res in enumerate(results) for f in res.failures]
            write_results(out, rows, fails, {
                "configs": len(results),
                "passed": all(r.passed for r in results),
                "members": [r.summary for r in results],
            })
    return results


# ---------------------------------------------------------------------------
# persistence


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple, dict)):
        return json.dumps(v, sort_keys=True)
    return str(v)


def csv_text(rows, columns=None):
    """RFC 4180 text (CRLF line ends) with exact float round-trip."""
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o).__name__)


def json_text(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=True) + "\n"


def write_results(out, rows, failures, summary):
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(csv_text(rows), newline="")
    (out / "failures.csv").write_text(csv_text(failures, ["config", "param", "kind", "message", "best_residual"]
                                              if failures and "config" in failures[0]
                                              else ["param", "kind", "message", "best_residual"]), newline="")
    (out / "summary.json").write_text(json_text(summary))


def _persist_single(cfg, res, out, dump_fields):
    out = Path(out)
    write_results(out, res.rows, res.failures, res.summary)
    (out / "timings.csv").write_text(csv_text(res.timings, ["param", "seconds"]), newline="")
    (out / "config.json").write_text(json_text(cfg.raw))
    if dump_fields and res.fields:
        fdir = out / "fields"
        fdir.mkdir(exist_ok=True)
        for blob in res.fields:
            path = fdir / f"{blob['name']}.mage"
            path.write_bytes(blob["phi"])
            if "meta" in blob:
                path.with_name(path.name + ".json").write_text(json_text(blob["meta"]))
    return res


def checkpoint_roundtrip(solution, path):
    """Write a checkpoint and read it back; returns ``(phi, metadata)``."""
    mage.save_checkpoint(path, solution)
    return mage.load_checkpoint(path)


# ---------------------------------------------------------------------------
# report


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return None


def make_report(results_dir, out_dir=None):
    """Series files per quantity and ``bounds.json`` with the empirical constants."""
    results_dir = Path(results_dir)
    out_dir = Path(out_dir) if out_dir is not None else results_dir / "report"
    summary = json.loads((results_dir / "summary.json").read_text())
    rows = _read_csv(results_dir / "results.csv")
    if not rows:
        raise ValueError(f"no result rows in {results_dir}")
    scenario = summary.get("scenario")
    parameter = summary.get("parameter")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    sdir = out_dir / "series"
    for q in SERIES.get(scenario, ()):
        pts = [(_num(r.get(parameter)), _num(r.get(q))) for r in rows]
        pts = [(p, v) for p, v in pts if p is not None and v is not None and np.isfinite(v)]
        if not pts:
            continue
        sdir.mkdir(exist_ok=True)
        path = sdir / f"{q}.csv"
        path.write_text(csv_text([{parameter: p, q: v} for p, v in pts], [parameter, q]), newline="")
        written.append(path)
    bounds = {"scenario": scenario}
    mapping = {"C_diam": "diameter", "C_grad": "gradient_sup", "C_ric": "ricci_lower_C", "C_osc": "oscillation"}
    for key, col in mapping.items():
        vals = [_num(r.get(col)) for r in rows]
        vals = [v for v in vals if v is not None and np.isfinite(v)]
        if vals:
            bounds[key] = max(vals)
    cts = [_num(r.get("c_t")) for r in rows]
    cts = [v for v in cts if v is not None]
    if cts:
        bounds["c_t_range"] = [min(cts), max(cts)]
    path = out_dir / "bounds.json"
    path.write_text(json_text(bounds))
    written.append(path)
    return written
