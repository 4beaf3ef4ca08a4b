"""Report files (JSON, CSV, figures) and the fixed-width console table."""
from __future__ import annotations

import csv
import json
import math
from importlib import resources
from pathlib import Path

SUMMARY_COLUMNS = ("operator", "K", "mean_acc", "std_acc", "conv_calls", "elapsed_s", "status", "error")
EPOCH_COLUMNS = ("name", "operator", "K", "seed", "epoch", "lr", "train_loss", "train_acc", "test_acc", "seconds")


def schema() -> dict:
    return json.loads((resources.files("tacsnn") / "schema" / "report.schema.json").read_text())


def _clean(obj):
    """Non-finite floats become null so the JSON stays standard."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _training_reports(report: dict) -> list[dict]:
    if report["experiment"] == "train":
        return [report]
    if report["experiment"] == "sweep":
        return report["runs"]
    return []


def summary_rows(report: dict) -> list[dict]:
    exp = report["experiment"]
    if exp == "train":
        rows = [report["summary"]]
    elif exp == "sweep":
        rows = report["rows"]
    elif exp == "call_accounting":
        rows = [dict(r, mean_acc=None, std_acc=None, elapsed_s=None) for r in report["call_accounting"]]
    else:
        rows = [{"operator": exp, "K": None, "mean_acc": None, "std_acc": None, "conv_calls": None,
                 "elapsed_s": report.get("elapsed_s"), "status": "ok", "error": ""}]
    return [{c: r.get(c) for c in SUMMARY_COLUMNS} for r in rows]


def metric_rows(report: dict) -> tuple[tuple[str, ...], list[dict]]:
    exp = report["experiment"]
    if exp in ("train", "sweep"):
        rows = []
        for sub in _training_reports(report):
            for run in sub["runs"]:
                for e in run["epochs"]:
                    rows.append(dict(e, name=sub["name"], operator=sub["operator"], K=sub["K"], seed=run["seed"]))
        return EPOCH_COLUMNS, rows
    if exp == "sparsity_lab":
        rows = report["statistics"]
    elif exp == "error_probe":
        rows = report["error_probe"]["rows"]
    else:
        rows = report["call_accounting"]
    return (tuple(rows[0]) if rows else ()), rows


def _write_csv(path: Path, columns, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: "" if row.get(c) is None else row.get(c) for c in columns})


def write_outputs(report: dict, out_dir: str | Path, figures: bool = True) -> dict:
    """Write report.json, metrics.csv, summary.csv and figures/ under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if figures:
        from .plotting import render
        report["figures"] = [str(Path(p).relative_to(out)) for p in render(report, out)]
    report = _clean(report)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=False) + "\n")
    columns, rows = metric_rows(report)
    _write_csv(out / "metrics.csv", columns, rows)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary_rows(report))
    return report


def _fmt(value, width: int) -> str:
    if value is None:
        text = "-"
    elif isinstance(value, float):
        text = f"{value:.4g}" if abs(value) < 1e-2 and value != 0 else f"{value:.2f}"
    else:
        text = str(value)
    return text[:width].rjust(width)


def format_table(report: dict) -> str:
    """Fixed-width summary for the terminal."""
    widths = {"operator": 14, "K": 4, "mean_acc": 9, "std_acc": 8, "conv_calls": 11, "elapsed_s": 10, "status": 7}
    lines = ["".join(c.rjust(w) for c, w in widths.items()) + "  error"]
    for row in summary_rows(report):
        lines.append("".join(_fmt(row[c], w) for c, w in widths.items()) + "  " + (row["error"] or ""))
    exp = report["experiment"]
    if exp == "sparsity_lab":
        lines.append("")
        lines.append(f"{'method':>16}{'statistic':>34}{'measured':>12}{'predicted':>12}{'agrees':>8}")
        for r in report["statistics"]:
            lines.append(f"{r['method']:>16}{r['statistic']:>34}{r['measured']:>12.5g}{r['predicted']:>12.5g}"
                         f"{str(r['agrees']):>8}")
    elif exp == "error_probe":
        probe = report["error_probe"]
        lines.append("")
        lines.append(f"{'K':>4}{'mean_error':>14}{'sem':>10}{'bound':>14}")
        for r in probe["rows"]:
            lines.append(f"{r['k']:>4}{r['mean_error']:>14.5g}{r['sem_error']:>10.3g}{r['bound']:>14.5g}")
        lines.append(f"monotone={probe['monotone']} within_bound={probe['within_bound']} "
                     f"zero_rate_exact={probe['zero_rate_exact']}")
    return "\n".join(lines)
