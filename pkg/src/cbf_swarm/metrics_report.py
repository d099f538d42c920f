"""Side-by-side metrics for controller variants run on the same scenario and seed."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import IO, Sequence

from .core import InvalidArgument
from .sim import DEVIATION_THRESHOLD, TrajectoryLog, compute_metrics

METRIC_FIELDS = (
    "completion_time",
    "total_deviation_integral",
    "max_individual_deviation",
    "deviation_active_duration",
    "relaxed_step_count",
    "min_pairwise_distance",
)


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    values: dict


@dataclass(frozen=True)
class DeltaRow:
    label: str
    baseline: str
    percent: dict  # metric -> percent change relative to baseline, or None


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[ComparisonRow, ...]
    deltas: tuple[DeltaRow, ...]

    def row(self, label: str) -> ComparisonRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def delta(self, label: str, baseline: str) -> DeltaRow:
        for d in self.deltas:
            if d.label == label and d.baseline == baseline:
                return d
        raise KeyError((label, baseline))

    def to_csv(self, fp: IO[str]) -> None:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["record", "label", "baseline", *METRIC_FIELDS])
        for r in self.rows:
            w.writerow(["metrics", r.label, "", *(_cell(r.values[m]) for m in METRIC_FIELDS)])
        for d in self.deltas:
            w.writerow(["delta_pct", d.label, d.baseline, *(_cell(d.percent[m]) for m in METRIC_FIELDS)])

    def format(self) -> str:
        head = ["controller", *METRIC_FIELDS]
        body = [[r.label, *(_fmt(r.values[m]) for m in METRIC_FIELDS)] for r in self.rows]
        body += [[f"{d.label} vs {d.baseline} (%)", *(_fmt(d.percent[m], pct=True) for m in METRIC_FIELDS)]
                 for d in self.deltas]
        widths = [max(len(str(line[k])) for line in [head, *body]) for k in range(len(head))]
        lines = ["  ".join(str(v).ljust(wd) for v, wd in zip(line, widths)).rstrip() for line in [head, *body]]
        return "\n".join(lines)


def _cell(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def _fmt(v, pct: bool = False) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:+.2f}" if pct else f"{v:.4g}"
    return str(v)


def percent_delta(value, baseline) -> float | None:
    """``100 * (value - baseline) / |baseline|``; 0 when both are equal, None when undefined."""
    if value is None or baseline is None:
        return None
    if value == baseline:
        return 0.0
    if baseline == 0:
        return None
    return 100.0 * (value - baseline) / abs(baseline)


def _scenario_key(log: TrajectoryLog) -> tuple:
    agents = tuple((a.id, a.position.as_tuple(), a.velocity.as_tuple(), a.safety_radius, a.gamma)
                   for a in log.scene.agents)
    cfg = log.config
    return agents, tuple(t.as_tuple() for t in log.targets), cfg.seed, cfg.dt, cfg.horizon_steps, cfg.dynamics


def compare(logs: Sequence[TrajectoryLog], labels: Sequence[str] | None = None,
            threshold: float = DEVIATION_THRESHOLD) -> ComparisonTable:
    """Tabulate each log's metrics and the percent change of every later log vs every earlier one."""
    logs = list(logs)
    if not logs:
        raise InvalidArgument("compare needs at least one log")
    labels = list(labels) if labels is not None else [log.label or str(log.config.controller) for log in logs]
    if len(labels) != len(logs) or len(set(labels)) != len(labels):
        raise InvalidArgument(f"need one distinct label per log, got {labels}")
    key = _scenario_key(logs[0])
    for lab, log in zip(labels, logs):
        if _scenario_key(log) != key:
            raise InvalidArgument(f"log {lab!r} does not share the scenario and seed of {labels[0]!r}")

    rows = []
    for lab, log in zip(labels, logs):
        m = compute_metrics(log, threshold, log.metrics.completion_time if log.metrics else None)
        rows.append(ComparisonRow(lab, {f: getattr(m, f) for f in METRIC_FIELDS}))
    deltas = [DeltaRow(b.label, a.label, {f: percent_delta(b.values[f], a.values[f]) for f in METRIC_FIELDS})
              for a, b in itertools.combinations(rows, 2)]
    return ComparisonTable(tuple(rows), tuple(deltas))
