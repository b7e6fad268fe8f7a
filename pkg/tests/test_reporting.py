import json

import pytest

from mutualattack.harness import group_overall
from mutualattack.models import TargetResult, TransferReport
from mutualattack.reporting import (
    CSV_COLUMNS,
    iteration_series,
    plot_iteration_curves,
    read_report,
    recompute_overall,
    render_table,
    report_csv,
    write_report,
)


@pytest.fixture
def report() -> TransferReport:
    results = [
        TargetResult("surrogate", "surrogate", 0.5, 0.25, 0.75),
        TargetResult("cnn", "conv", 0.875, 0.125, 0.875),
        TargetResult("mlp", "conv", 0.625, 0.375, 0.625),
    ]
    group_map = {"surrogate": ["surrogate"], "conv": ["cnn", "mlp"]}
    return TransferReport(
        split="val",
        results=results,
        group_map=group_map,
        overall=group_overall({r.name: r.adv_acc for r in results}, group_map),
        clean_overall=group_overall({r.name: r.clean_acc for r in results}, group_map),
        epsilon=0.04,
        source_dataset="synthetic",
        eval_dataset="synthetic",
    )


def test_csv_matches_golden(report, assert_matches_golden):
    assert_matches_golden(report_csv(report), "transfer_val.csv")


def test_write_and_read_back(report, tmp_path):
    csv_path, json_path = write_report(report, tmp_path / "reports")
    assert csv_path.name == "transfer_val.csv"
    assert json_path.name == "transfer_val.json"
    loaded = read_report(json_path)
    assert loaded == report
    assert json.loads(json_path.read_text(encoding="utf-8"))["overall"] == pytest.approx(0.25)


def test_custom_stem(report, tmp_path):
    csv_path, _ = write_report(report, tmp_path, stem="baseline")
    assert csv_path.name == "baseline.csv"


def test_read_missing_report(tmp_path):
    with pytest.raises(FileNotFoundError, match="report not found"):
        read_report(tmp_path / "none.json")


def test_recompute_overall_matches(report):
    assert recompute_overall(report) == report.overall
    report.results[1] = TargetResult("cnn", "conv", 0.875, 0.5, 0.5)
    assert recompute_overall(report) != report.overall


def test_render_table_has_every_row(report):
    lines = render_table(report).splitlines()
    assert lines[0].split() == list(CSV_COLUMNS)
    assert len(lines) == 2 + len(report.results) + 1
    assert lines[-1].split()[1] == "overall"


def test_iteration_series():
    records = [
        {"iteration": 1, "surrogate_adv_acc": 0.5, "target_adv_acc": {"cnn": 0.6}},
        {"iteration": 2, "surrogate_adv_acc": 0.3, "target_adv_acc": {"cnn": 0.4}},
    ]
    series = iteration_series(records)
    assert series == {"iteration": [1.0, 2.0], "surrogate": [0.5, 0.3], "cnn": [0.6, 0.4]}


def test_plot_iteration_curves(tmp_path):
    pytest.importorskip("matplotlib")
    records = [
        {"iteration": 1, "surrogate_adv_acc": 0.5, "target_adv_acc": {}},
        {"iteration": 2, "surrogate_adv_acc": 0.3, "target_adv_acc": {}},
    ]
    out = plot_iteration_curves({"full": records, "attack-only": records}, tmp_path / "plots" / "it.png")
    assert out.is_file()
    assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
