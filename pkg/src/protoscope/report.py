"""Metric report assembly and serialization.

A report is a mapping from ``suite/metric`` keys to per-entity value series,
plus run metadata.  Aggregation is mean +/- population standard deviation
(divisor N, not N-1) over the numeric entities; entities whose value is
``None`` mark "not applicable" results and are excluded from aggregation, as
are skipped entities (which carry a reason string instead of a value).

Serialized forms:

* JSON — canonical key order, loadable back into :class:`MetricReport`;
* CSV — one ``metric,entity,value`` row per entity.

The ``created_utc`` and ``duration_seconds`` run fields are the only
nondeterministic parts of a report; comparisons in tests strip them.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from protoscope.errors import FormatError, IoError, ValidationError

SCHEMA = "protoscope-report/1"


def aggregate(values) -> tuple[float, float]:
    """Mean and population standard deviation of a nonempty value sequence."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValidationError("cannot aggregate an empty value list")
    mean = sum(vals) / len(vals)
    var = sum((v - mean) ** 2 for v in vals) / len(vals)
    return mean, math.sqrt(var)


@dataclass
class MetricSeries:
    """One metric's per-entity values within a report."""

    metric: str                  # "suite/name"
    direction: str               # "lower" or "higher" is better
    entities: dict[str, float | None] = field(default_factory=dict)
    skipped: dict[str, str] = field(default_factory=dict)

    def add(self, entity: str, value: float | None) -> None:
        self.entities[entity] = value if value is None else float(value)

    def skip(self, entity: str, reason: str) -> None:
        self.skipped[entity] = str(reason)

    @property
    def numeric_values(self) -> list[float]:
        return [v for v in self.entities.values() if v is not None]

    @property
    def mean(self) -> float | None:
        vals = self.numeric_values
        return aggregate(vals)[0] if vals else None

    @property
    def std(self) -> float | None:
        vals = self.numeric_values
        return aggregate(vals)[1] if vals else None


@dataclass
class MetricReport:
    run: dict = field(default_factory=dict)
    series: dict[str, MetricSeries] = field(default_factory=dict)

    def series_for(self, metric: str, direction: str) -> MetricSeries:
        if metric not in self.series:
            self.series[metric] = MetricSeries(metric=metric, direction=direction)
        return self.series[metric]

    def to_dict(self) -> dict:
        metrics = {}
        for key in sorted(self.series):
            s = self.series[key]
            metrics[key] = {
                "direction": s.direction,
                "mean": s.mean,
                "std": s.std,
                "count": len(s.numeric_values),
                "entities": dict(s.entities),
                "skipped": dict(s.skipped),
            }
        return {"schema": SCHEMA, "run": dict(self.run), "metrics": metrics}


def report_to_json(report: MetricReport) -> str:
    """Canonical JSON text (sorted keys, stable float repr)."""
    return json.dumps(report.to_dict(), sort_keys=True, indent=2, allow_nan=False)


def write_report(report: MetricReport, path: str | Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report_to_json(report) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write report {path}: {exc}") from exc


def load_report(path: str | Path) -> MetricReport:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise IoError(f"cannot read report {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"report {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != SCHEMA:
        raise FormatError(f"report {path} does not carry schema '{SCHEMA}'")
    report = MetricReport(run=dict(doc.get("run", {})))
    for key, block in doc.get("metrics", {}).items():
        series = MetricSeries(metric=key, direction=block.get("direction", "lower"))
        for entity, value in block.get("entities", {}).items():
            series.add(entity, value)
        for entity, reason in block.get("skipped", {}).items():
            series.skip(entity, reason)
        report.series[key] = series
    return report


def write_csv(report: MetricReport, path: str | Path) -> None:
    """One row per entity; not-applicable entities serialize to an empty cell."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["metric", "entity", "value"])
            for key in sorted(report.series):
                series = report.series[key]
                for entity, value in series.entities.items():
                    writer.writerow([key, entity, "" if value is None else repr(value)])
    except OSError as exc:
        raise IoError(f"cannot write CSV {path}: {exc}") from exc


def strip_volatile(report_dict: dict) -> dict:
    """Drop the wall-clock fields so two runs can be compared for equality."""
    out = json.loads(json.dumps(report_dict))
    out.get("run", {}).pop("created_utc", None)
    out.get("run", {}).pop("duration_seconds", None)
    return out
