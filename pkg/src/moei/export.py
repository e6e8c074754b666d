"""CSV / JSON export of forgetting reports, router statistics and replay sweeps.

Every file is written atomically (temp file + rename). Floats are written with
``repr`` so a CSV reparses to exactly the values that produced it.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .bench.experiment import ForgettingReport, ForgettingRow, RouterStats, SweepRow
from .bench.tasks import EI_FAMILIES
from .errors import CorruptionError

COLUMNS = ("method", "seed", "dimension", "metric", "before", "after", "delta")
ABLATION_COLUMNS = ("method", "seed") + EI_FAMILIES + ("gi_before", "gi_after", "delta_gi")
SWEEP_COLUMNS = ("method", "seed", "replay_size", "gi_before", "gi_after", "delta_gi") + EI_FAMILIES
SUMMARY_SEEDS = ("mean", "spread")


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _csv_text(columns: Sequence[str], records: Iterable[Dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for rec in records:
        writer.writerow([_fmt(rec[c]) for c in columns])
    return buf.getvalue()


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- forgetting reports
def report_records(report: ForgettingReport, summary: bool = True) -> List[Dict]:
    """Long-format rows in ``COLUMNS`` order; with several seeds, mean and spread rows follow."""
    records = []
    for row in report.rows:
        for dim, metric, before, after in row.dimensions():
            records.append(dict(method=row.method, seed=row.seed, dimension=dim, metric=metric,
                                before=before, after=after, delta=after - before))
    if summary and len(report.seeds()) > 1:
        records.extend(summary_records(records))
    return records


def summary_records(records: Sequence[Dict]) -> List[Dict]:
    """Mean and spread (population standard deviation) across seeds per method and dimension."""
    groups: Dict[tuple, List[Dict]] = {}
    for rec in records:
        if str(rec["seed"]) in SUMMARY_SEEDS:
            continue
        groups.setdefault((rec["method"], rec["dimension"], rec["metric"]), []).append(rec)
    out = []
    for (method, dim, metric), recs in groups.items():
        cols = {k: np.array([float(r[k]) for r in recs]) for k in ("before", "after", "delta")}
        out.append(dict(method=method, seed="mean", dimension=dim, metric=metric,
                        **{k: float(v.mean()) for k, v in cols.items()}))
        out.append(dict(method=method, seed="spread", dimension=dim, metric=metric,
                        **{k: float(v.std()) for k, v in cols.items()}))
    return out


def report_from_records(records: Iterable[Dict]) -> ForgettingReport:
    """Inverse of :func:`report_records` (summary and GI-mean rows are derived, so skipped)."""
    rows: Dict[tuple, ForgettingRow] = {}
    for rec in records:
        if str(rec["seed"]) in SUMMARY_SEEDS or rec["dimension"] == "GI":
            continue
        key = (rec["method"], int(rec["seed"]))
        row = rows.get(key)
        if row is None:
            row = rows[key] = ForgettingRow(rec["method"], int(rec["seed"]), {}, {}, {}, {}, {})
        dim = rec["dimension"]
        before, after = float(rec["before"]), float(rec["after"])
        if dim in EI_FAMILIES:
            row.ei_before[dim], row.ei_after[dim] = before, after
        else:
            row.gi_before[dim], row.gi_after[dim] = before, after
        row.metrics[dim] = rec["metric"]
    return ForgettingReport(list(rows.values()))


def report_csv(report: ForgettingReport, summary: bool = True) -> str:
    return _csv_text(COLUMNS, report_records(report, summary))


def write_report_csv(report: ForgettingReport, path: str, summary: bool = True) -> None:
    atomic_write_text(path, report_csv(report, summary))


def read_report_csv(path: str) -> ForgettingReport:
    records = read_csv(path)
    if records and tuple(records[0].keys()) != COLUMNS:
        raise CorruptionError(f"{path}: expected columns {COLUMNS}, found {tuple(records[0].keys())}")
    return report_from_records(records)


def write_report_json(report: ForgettingReport, path: str, summary: bool = True) -> None:
    records = report_records(report, summary)
    atomic_write_text(path, json.dumps({"columns": list(COLUMNS), "rows": records}, indent=1) + "\n")


def read_report_json(path: str) -> ForgettingReport:
    with open(path) as fh:
        return report_from_records(json.load(fh)["rows"])


def ablation_records(report: ForgettingReport) -> List[Dict]:
    """One wide row per (method, seed)."""
    out = []
    for row in report.rows:
        rec = dict(method=row.method, seed=row.seed, gi_before=row.gi_before_mean, gi_after=row.gi_after_mean,
                   delta_gi=row.delta_GI)
        rec.update({f: row.ei_after.get(f, float("nan")) for f in EI_FAMILIES})
        out.append(rec)
    return out


def write_ablation_csv(report: ForgettingReport, path: str) -> None:
    atomic_write_text(path, _csv_text(ABLATION_COLUMNS, ablation_records(report)))


# ---------------------------------------------------------------- router stats
def router_columns(N: int, labels: Sequence[str] = ("site", "dataset", "domain")) -> List[str]:
    return list(labels) + ["alpha"] + [f"beta_{i}" for i in range(1, N + 1)]


def router_records(stats: RouterStats, site: Optional[str] = None) -> List[Dict]:
    """Site x slot matrix rows; restricted to one site when ``site`` is given."""
    out = []
    for (s, d), vec in stats.means.items():
        if site is not None and s != site:
            continue
        rec = dict(site=s, dataset=d, domain=stats.domains.get(d, ""), alpha=float(vec[0]))
        rec.update({f"beta_{i}": float(v) for i, v in enumerate(vec[1:], start=1)})
        out.append(rec)
    return out


def write_router_csv(stats: RouterStats, path: str, site: Optional[str] = None) -> None:
    atomic_write_text(path, _csv_text(router_columns(stats.N), router_records(stats, site)))


def write_router_json(stats: RouterStats, path: str) -> None:
    payload = {"N": stats.N, "summary_site": stats.summary_site, "columns": router_columns(stats.N),
               "rows": router_records(stats)}
    atomic_write_text(path, json.dumps(payload, indent=1) + "\n")


# ---------------------------------------------------------------- replay sweep
def sweep_records(rows: Sequence[SweepRow]) -> List[Dict]:
    out = []
    for r in rows:
        rec = dict(method=r.method, seed=r.seed, replay_size=r.replay_size, gi_before=r.gi_before,
                   gi_after=r.gi_after, delta_gi=r.delta_GI)
        rec.update({f: r.ei_after.get(f, float("nan")) for f in EI_FAMILIES})
        out.append(rec)
    return out


def write_sweep_csv(rows: Sequence[SweepRow], path: str) -> None:
    atomic_write_text(path, _csv_text(SWEEP_COLUMNS, sweep_records(rows)))
