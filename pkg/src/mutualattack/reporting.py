"""Serializing transfer reports and plotting iteration curves.

A report is written twice: a comma-separated table rounded for reading,
and a JSON sidecar with full precision that :func:`read_report` loads
back. Curves need matplotlib (``mutualattack[plot]``).
"""

from __future__ import annotations

import csv
import json
import logging
from collections.abc import Mapping, Sequence
from io import StringIO
from pathlib import Path
from typing import Any

from .errors import ExternalDependencyError
from .harness import group_overall
from .models import TransferReport

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("split", "target", "group", "clean_acc", "adv_acc", "attack_success_rate")
OVERALL_ROW = "overall"


def _pct(value: float) -> str:
    return f"{100.0 * value:.2f}"


def report_rows(report: TransferReport) -> list[dict[str, str]]:
    """Table rows in percent: one per target in group order, then the overall row."""
    by_name = {r.name: r for r in report.results}
    rows = []
    for group, names in report.group_map.items():
        for name in names:
            r = by_name[name]
            rows.append(
                {
                    "split": report.split,
                    "target": r.name,
                    "group": group,
                    "clean_acc": _pct(r.clean_acc),
                    "adv_acc": _pct(r.adv_acc),
                    "attack_success_rate": _pct(r.attack_success_rate),
                }
            )
    rows.append(
        {
            "split": report.split,
            "target": OVERALL_ROW,
            "group": "",
            "clean_acc": _pct(report.clean_overall),
            "adv_acc": _pct(report.overall),
            "attack_success_rate": _pct(1.0 - report.overall),
        }
    )
    return rows


def report_csv(report: TransferReport) -> str:
    buffer = StringIO()
    writer = csv.DictWriter(buffer, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(report_rows(report))
    return buffer.getvalue()


def write_report(report: TransferReport, directory: str | Path, stem: str | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.json``; the stem defaults to ``transfer_<split>``."""
    out_dir = Path(directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or f"transfer_{report.split}"
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    csv_path.write_text(report_csv(report), encoding="utf-8")
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, json_path


def read_report(path: str | Path) -> TransferReport:
    src = Path(path)
    if not src.is_file():
        raise FileNotFoundError(f"report not found: {src}")
    return TransferReport.from_dict(json.loads(src.read_text(encoding="utf-8")))


def recompute_overall(report: TransferReport) -> float:
    """The group-wise overall adversarial accuracy rebuilt from the per-target fields."""
    return group_overall(report.adversarial_accuracies(), report.group_map)


def render_table(report: TransferReport) -> str:
    """Fixed-width text table of :func:`report_rows` for the console."""
    rows = report_rows(report)
    widths = {c: max(len(c), *(len(row[c]) for row in rows)) for c in CSV_COLUMNS}
    lines = ["  ".join(c.ljust(widths[c]) for c in CSV_COLUMNS)]
    lines.append("  ".join("-" * widths[c] for c in CSV_COLUMNS))
    lines += ["  ".join(row[c].ljust(widths[c]) for c in CSV_COLUMNS) for row in rows]
    return "\n".join(lines)


def iteration_series(records: Sequence[Mapping[str, Any]]) -> dict[str, list[float]]:
    """Per-iteration accuracy series from iteration log records, keyed by curve name."""
    series: dict[str, list[float]] = {
        "iteration": [float(r["iteration"]) for r in records],
        "surrogate": [float(r["surrogate_adv_acc"]) for r in records],
    }
    for record in records:
        for name, acc in record.get("target_adv_acc", {}).items():
            series.setdefault(name, []).append(float(acc))
    return series


def plot_iteration_curves(runs: Mapping[str, Sequence[Mapping[str, Any]]], path: str | Path) -> Path:
    """Adversarial accuracy vs iteration, one line per (run, model), written as PNG."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise ExternalDependencyError("plotting needs matplotlib; install mutualattack[plot]") from exc

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, records in runs.items():
        series = iteration_series(records)
        xs = series.pop("iteration")
        for model, ys in series.items():
            ax.plot(xs[: len(ys)], [100.0 * y for y in ys], marker="o", label=f"{label}: {model}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("adversarial accuracy (%)")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()

    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    logger.debug("wrote %s", out)
    return out
