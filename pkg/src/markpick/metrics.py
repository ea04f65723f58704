"""Overlap accuracy metrics: IoU, Acc@T, and improvement deltas.

All internal arithmetic is full precision; rounding (half-up, two decimals)
happens only at presentation or where an operation's contract says so.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Optional, Sequence

from .dataset import Box, SplitManifest
from .errors import MetricsError

THRESHOLDS = (0.25, 0.5)


def round_half_up(value: float, places: int = 2) -> float:
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP))


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area of two boxes; 0.0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def acc_at(ious: Sequence[float], threshold: float) -> float:
    """Percentage of IoU values reaching the threshold (inclusive >=)."""
    if len(ious) == 0:
        raise MetricsError("acc_at requires at least one record")
    if not (0.0 < threshold < 1.0):
        raise MetricsError(f"threshold must be in (0, 1), got {threshold}")
    hits = sum(1 for v in ious if v >= threshold)
    return 100.0 * hits / len(ious)


def delta(ours: float, baseline: float) -> float:
    """Improvement in percentage points, rounded half-up to two decimals."""
    for name, value in (("ours", ours), ("baseline", baseline)):
        if not (0.0 <= value <= 100.0):
            raise MetricsError(f"{name} must be a percentage in [0, 100], got {value}")
    return round_half_up(ours - baseline)


@dataclass(frozen=True)
class EvalRecord:
    """Per-sample outcome: IoU against ground truth and threshold hits."""

    sample_id: str
    iou: float
    hit_025: bool
    hit_05: bool

    @classmethod
    def from_iou(cls, sample_id: str, value: float) -> "EvalRecord":
        if not (0.0 <= value <= 1.0):
            raise MetricsError(f"iou must be in [0, 1], got {value}")
        return cls(sample_id, value, value >= 0.25, value >= 0.5)


@dataclass(frozen=True)
class MetricsRow:
    """One aggregated table row for a (dataset, split, method) cell.

    Accuracies are stored full precision; deltas (when present) follow the
    delta() contract and carry the baseline method name.
    """

    dataset: str
    split: str
    method: str
    n: int
    acc_025: float
    acc_05: float
    delta_025: Optional[float] = None
    delta_05: Optional[float] = None
    baseline: Optional[str] = None

    def with_delta(self, baseline_row: "MetricsRow") -> "MetricsRow":
        if (self.dataset, self.split) != (baseline_row.dataset, baseline_row.split):
            raise MetricsError(
                f"cannot delta across splits: {self.dataset}:{self.split} "
                f"vs {baseline_row.dataset}:{baseline_row.split}"
            )
        return replace(
            self,
            delta_025=delta(self.acc_025, baseline_row.acc_025),
            delta_05=delta(self.acc_05, baseline_row.acc_05),
            baseline=baseline_row.method,
        )


@dataclass
class MetricsTable:
    """Aggregated rows, one per (dataset, split, method) cell."""

    rows: list = None

    def __post_init__(self):
        if self.rows is None:
            self.rows = []

    def add(self, row: MetricsRow) -> None:
        key = (row.dataset, row.split, row.method)
        if any((r.dataset, r.split, r.method) == key for r in self.rows):
            raise MetricsError(f"duplicate table cell {key}")
        self.rows.append(row)

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)


def aggregate(outcomes, manifest: SplitManifest, method: str = "pipeline"):
    """Score one outcome per manifest sample and fold into a table row.

    Outcomes must align with the manifest one-to-one; a predicted_box of None
    scores IoU 0. Returns (records, MetricsRow).
    """
    samples = manifest.samples
    if len(outcomes) != len(samples):
        raise MetricsError(
            f"{len(outcomes)} outcomes for {len(samples)} manifest samples"
        )
    records = []
    for outcome, sample in zip(outcomes, samples):
        if outcome.sample_id != sample.id:
            raise MetricsError(
                f"outcome id {outcome.sample_id!r} does not match sample {sample.id!r}"
            )
        value = 0.0 if outcome.predicted_box is None else iou(outcome.predicted_box, sample.gt_box)
        records.append(EvalRecord.from_iou(sample.id, value))
    ious = [r.iou for r in records]
    row = MetricsRow(
        dataset=manifest.dataset,
        split=manifest.split,
        method=method,
        n=len(records),
        acc_025=acc_at(ious, 0.25),
        acc_05=acc_at(ious, 0.5),
    )
    return records, row


def records_to_jsonl(records: Iterable[EvalRecord]) -> str:
    lines = [
        json.dumps(
            {"id": r.sample_id, "iou": r.iou, "hit_025": r.hit_025, "hit_05": r.hit_05},
            sort_keys=True,
        )
        for r in records
    ]
    return "\n".join(lines) + "\n"


def records_to_csv(records: Iterable[EvalRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["id", "iou", "hit_025", "hit_05"])
    for r in records:
        writer.writerow([r.sample_id, repr(r.iou), int(r.hit_025), int(r.hit_05)])
    return buf.getvalue()
