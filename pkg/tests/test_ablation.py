import csv
import io

import numpy as np
import pytest

from cal.ablation import AblationRow, AblationTable, parse_values, run_ablation
from cal.synthdata import DatasetSpec
from cal.train import MetricsReport, TrainConfig

SPEC = DatasetSpec(num_classes=3, samples_per_class=4, test_per_class=2, image_size=16)
CFG = TrainConfig(epochs=1, batch_size=6)


def rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_parse_values():
    assert parse_values("M", ["1", "8"]) == [1, 8]
    assert parse_values("strategy", None) == ["random", "uniform", "reversed", "shuffle"]
    with pytest.raises(ValueError, match="strategy, M, objective"):
        parse_values("lr", None)
    with pytest.raises(ValueError):
        parse_values("M", ["0"])
    with pytest.raises(ValueError):
        parse_values("objective", ["mixup"])


def test_aggregation_oracle():
    reports = [MetricsReport(top1_accuracy=a, attention_miou=b, epoch_losses=[c]) for a, b, c in [(0.5, 0.1, 1.0), (0.7, 0.3, 2.0), (0.9, 0.2, 3.0)]]
    table = AblationTable("objective", [AblationRow("cal", reports)], 3)
    header, line = rows(table.to_csv())
    got = dict(zip(header, line))
    assert got["objective"] == "cal" and got["seeds"] == "3"
    assert float(got["top1_accuracy_mean"]) == pytest.approx(0.7)
    assert float(got["top1_accuracy_sd"]) == pytest.approx(np.std([0.5, 0.7, 0.9], ddof=1), abs=1e-6)
    assert float(got["final_loss_mean"]) == pytest.approx(2.0)
    assert "wall_clock_seconds" not in header
    assert "wall_clock_seconds" in rows(table.to_csv(include_timing=True))[0]


def test_strategy_axis_four_rows():
    table = run_ablation(SPEC, CFG, "strategy", num_heads=2)
    out = rows(table.to_csv())
    assert [r[0] for r in out[1:]] == ["random", "uniform", "reversed", "shuffle"]
    for r in out[1:]:
        assert all(v != "nan" for v in r)


def test_m_axis_three_rows_and_repeatable():
    a = run_ablation(SPEC, CFG, "M", values=[1, 2, 4]).to_csv()
    b = run_ablation(SPEC, CFG, "M", values=[1, 2, 4]).to_csv()
    assert a == b
    assert [r[0] for r in rows(a)[1:]] == ["1", "2", "4"]


def test_objective_axis_seeds():
    table = run_ablation(SPEC, CFG, "objective", values=["baseline", "cal"], seeds=2, num_heads=2)
    for row in table.rows:
        assert len(row.reports) == 2
        assert row.sd("top1_accuracy") >= 0
    # seeds differ, so the per-seed reports are not copies of each other
    assert table.rows[0].reports[0].step_losses != table.rows[0].reports[1].step_losses


def test_retrieval_rejected():
    with pytest.raises(ValueError):
        run_ablation(SPEC, TrainConfig(mode="retrieval"), "M")
