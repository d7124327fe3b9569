"""Ablation harness: one training run per (value, seed), aggregated per value.

Axes:

* ``strategy``: CAL with each counterfactual strategy.
* ``M``: number of attention heads, with the objective from the base config.
* ``objective``: baseline, CAL and the attention regularizers.

Seed ``i`` (0-based) uses ``base seed + i`` for both the dataset and the
training run, so every value of the axis sees the same data and
initialization under a given seed.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from .counterfactual import STRATEGIES
from .model import AttentionModel
from .synthdata import DatasetSpec, generate_dataset
from .train import OBJECTIVES, MetricsReport, TrainConfig, train

logger = logging.getLogger(__name__)

AXES = ("strategy", "M", "objective")
DEFAULT_VALUES = {"strategy": STRATEGIES, "M": (1, 8, 32), "objective": OBJECTIVES}
METRICS = ("top1_accuracy", "attention_miou", "final_loss")


@dataclasses.dataclass
class AblationRow:
    value: str
    reports: list[MetricsReport]

    def values(self, metric: str) -> np.ndarray:
        if metric == "final_loss":
            return np.array([r.epoch_losses[-1] for r in self.reports])
        return np.array([getattr(r, metric) for r in self.reports], dtype=np.float64)

    def mean(self, metric: str) -> float:
        return float(self.values(metric).mean())

    def sd(self, metric: str) -> float:
        v = self.values(metric)
        return float(v.std(ddof=1)) if len(v) > 1 else 0.0

    @property
    def wall_clock_seconds(self) -> float:
        return float(sum(r.wall_clock_seconds for r in self.reports))


@dataclasses.dataclass
class AblationTable:
    axis: str
    rows: list[AblationRow]
    seeds: int

    def to_csv(self, include_timing: bool = False) -> str:
        header = [self.axis, "seeds"]
        for m in METRICS:
            header += [f"{m}_mean", f"{m}_sd"]
        if include_timing:
            header.append("wall_clock_seconds")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in self.rows:
            line = [row.value, self.seeds]
            for m in METRICS:
                line += [f"{row.mean(m):.6f}", f"{row.sd(m):.6f}"]
            if include_timing:
                line.append(f"{row.wall_clock_seconds:.3f}")
            w.writerow(line)
        return buf.getvalue()

    def write_csv(self, path, include_timing: bool = False) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(include_timing))
        return path


def parse_values(axis: str, values: Sequence | None) -> list:
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; valid axes: {', '.join(AXES)}")
    if values is None:
        return list(DEFAULT_VALUES[axis])
    out = []
    for v in values:
        if axis == "M":
            m = int(v)
            if m < 1:
                raise ValueError(f"head count must be positive, got {v}")
            out.append(m)
        elif axis == "strategy":
            if v not in STRATEGIES:
                raise ValueError(f"unknown strategy {v!r}; expected one of {', '.join(STRATEGIES)}")
            out.append(v)
        else:
            if v not in OBJECTIVES:
                raise ValueError(f"unknown objective {v!r}; expected one of {', '.join(OBJECTIVES)}")
            out.append(v)
    if not out:
        raise ValueError("no ablation values given")
    return out


def run_ablation(
    data_spec: DatasetSpec,
    config: TrainConfig,
    axis: str,
    values: Sequence | None = None,
    seeds: int = 1,
    num_heads: int = 32,
    depth: int = 2,
    threshold_fraction: float = 0.5,
    threads: int = 1,
) -> AblationTable:
    if seeds < 1:
        raise ValueError("seeds must be positive")
    if config.mode != "classification":
        raise ValueError("ablations run in classification mode only")
    vals = parse_values(axis, values)
    config.validate()
    data_spec.validate()
    rows = [AblationRow(str(v), []) for v in vals]
    for s in range(seeds):
        seed = config.seed + s
        train_set, test_set = generate_dataset(dataclasses.replace(data_spec, seed=data_spec.seed + s), threads)
        for row, v in zip(rows, vals):
            heads = num_heads
            cfg = dataclasses.replace(config, seed=seed)
            if axis == "strategy":
                cfg = dataclasses.replace(cfg, objective="cal", strategy=v)
            elif axis == "objective":
                cfg = dataclasses.replace(cfg, objective=v)
            else:
                heads = v
            cfg.validate()
            model = AttentionModel.create(data_spec.num_classes, num_heads=heads, depth=depth, seed=seed)
            _, report = train(model, train_set, cfg, eval_data=test_set, threshold_fraction=threshold_fraction)
            logger.info(
                "%s=%s seed %d: top1 %.4f mIoU %.4f", axis, v, seed, report.top1_accuracy, report.attention_miou
            )
            row.reports.append(report)
    return AblationTable(axis, rows, seeds)
