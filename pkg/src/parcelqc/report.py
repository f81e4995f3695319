"""Deterministic report files: metric tables, summaries, QC fit outputs.

Data files never carry timestamps or host details; those go to a separate
``run.json`` sidecar so two identical runs produce byte-identical reports.
"""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .cohort_stats import CohortSummary, cohort_summary, wilcoxon_signed_rank
from .gmm_threshold import GmmFit, classify_scores, histogram
from .seg_metrics import GroupSummary, StructureMetrics, write_metrics_csv
from .synth_qc import QcScoreSet

__all__ = [
    "TABLE_HEADER",
    "per_subject_means",
    "summary_dict",
    "table_rows",
    "emit_report",
    "emit_fit_report",
    "comparison_report",
    "write_json",
    "write_sidecar",
]

TABLE_HEADER = "Metric | Mean ± Std | Min | 50% | Max"


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, ensure_ascii=False, allow_nan=False)
        fh.write("\n")


def write_sidecar(out_dir, command: str, argv=None) -> None:
    write_json(
        {
            "command": command,
            "argv": list(sys.argv if argv is None else argv),
            "version": __version__,
            "python": platform.python_version(),
            "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
        Path(out_dir) / "run.json",
    )


def per_subject_means(metrics) -> dict[str, dict[str, float | None]]:
    """Average defined Dice / SD95 over structures, per subject, in first-seen order."""
    acc: dict[str, tuple[list[float], list[float]]] = {}
    for r in metrics:
        d, s = acc.setdefault(r.subject_id, ([], []))
        if r.dice is not None:
            d.append(r.dice)
        if r.sd95_mm is not None:
            s.append(r.sd95_mm)
    return {
        sid: {
            "dice": math.fsum(d) / len(d) if d else None,
            "sd95": math.fsum(s) / len(s) if s else None,
        }
        for sid, (d, s) in acc.items()
    }


def _summary_json(summary: CohortSummary | None):
    if summary is None:
        return None
    return {
        "mean": summary.mean,
        "std": summary.std,
        "min": summary.min,
        "median": summary.median,
        "max": summary.max,
        "n": summary.n,
        "row": summary.format_row(),
    }


def _metric_summaries(metrics):
    means = per_subject_means(metrics)
    out = {}
    for key in ("dice", "sd95"):
        vals = [m[key] for m in means.values() if m[key] is not None]
        out[key] = cohort_summary(vals) if vals else None
    return means, out


def summary_dict(metrics, errors=()) -> dict:
    means, summaries = _metric_summaries(metrics)
    return {
        "n_subjects": len(means),
        "n_records": len(metrics),
        "mean_dice": summaries["dice"].mean if summaries["dice"] else None,
        "mean_sd95": summaries["sd95"].mean if summaries["sd95"] else None,
        "dice": _summary_json(summaries["dice"]),
        "sd95": _summary_json(summaries["sd95"]),
        "per_subject": [
            {"subject_id": sid, "mean_dice": m["dice"], "mean_sd95": m["sd95"]}
            for sid, m in means.items()
        ],
        "errors": [{"subject_id": sid, "message": msg} for sid, msg in errors],
    }


def table_rows(metrics, decimals: int = 2) -> list[str]:
    """Mean / Min / 50% / Max table over per-subject averages."""
    _, summaries = _metric_summaries(metrics)
    rows = [TABLE_HEADER]
    for name, key in (("Dice", "dice"), ("SD95", "sd95")):
        s = summaries[key]
        rows.append(f"{name} | " + (s.format_row(decimals) if s else "n/a | n/a | n/a | n/a"))
    return rows


def _fmt(v):
    return "" if v is None else repr(float(v))


def _write_groups_csv(groups: list[GroupSummary], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "mean_dice", "mean_sd95", "n", "n_dice", "n_sd95"])
        for g in groups:
            w.writerow([g.group, _fmt(g.mean_dice), _fmt(g.mean_sd95), g.n, g.n_dice, g.n_sd95])


def emit_report(out_dir, metrics: list[StructureMetrics], groups: list[GroupSummary], errors=()) -> dict:
    """Write ``metrics.csv``, ``groups.csv``, ``summary.json`` and ``table.txt``."""
    out_dir = Path(out_dir)
    write_metrics_csv(metrics, out_dir / "metrics.csv")
    _write_groups_csv(groups, out_dir / "groups.csv")
    summary = summary_dict(metrics, errors)
    write_json(summary, out_dir / "summary.json")
    with open(out_dir / "table.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(table_rows(metrics)) + "\n")
    return summary


def emit_fit_report(out_dir, fit: GmmFit, scores: QcScoreSet, bin_width: float = 0.01) -> None:
    """``fit.json``, ``histogram.csv`` (bin_left,count) and ``classification.csv``."""
    out_dir = Path(out_dir)
    payload = fit.to_json()
    payload["bin_width"] = bin_width
    write_json(payload, out_dir / "fit.json")
    with open(out_dir / "histogram.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "count"])
        for left, count in histogram(scores, bin_width):
            w.writerow([repr(left), count])
    decisions = dict(classify_scores(scores, fit.threshold))
    with open(out_dir / "classification.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "score", "pass"])
        for sid, score in scores.entries:
            w.writerow([sid, repr(score), "true" if decisions[sid] else "false"])


def comparison_report(named_metrics: dict[str, list[StructureMetrics]]) -> dict:
    """Per-method summaries and pairwise Wilcoxon p-values on per-subject averages.

    Pairs are matched on subject id; subjects missing a value in either
    method are left out of that comparison.
    """
    names = list(named_metrics)
    methods = {}
    means = {}
    for name in names:
        m, summaries = _metric_summaries(named_metrics[name])
        means[name] = m
        methods[name] = {k: _summary_json(v) for k, v in summaries.items()}
    pairwise = []
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            for key in ("dice", "sd95"):
                common = [s for s in means[a] if s in means[b]
                          and means[a][s][key] is not None and means[b][s][key] is not None]
                entry = {"a": a, "b": b, "metric": key, "n": len(common)}
                try:
                    res = wilcoxon_signed_rank([means[a][s][key] for s in common],
                                               [means[b][s][key] for s in common])
                    entry.update(statistic=res.statistic, p_two_sided=res.p_two_sided,
                                 mean_difference=math.fsum(means[a][s][key] - means[b][s][key]
                                                           for s in common) / len(common))
                except ValueError as exc:
                    entry.update(statistic=None, p_two_sided=None, note=str(exc))
                pairwise.append(entry)
    return {"methods": methods, "pairwise": pairwise}


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
