"""Canonical referring-expression records: ingestion, validation, seeded sampling.

A split manifest is a JSONL file, one record per line:

    {"id": str, "image": str, "expression": str,
     "bbox": [x_min, y_min, x_max, y_max], "dataset": str, "split": str}

Image paths are stored verbatim and resolved against a configured image root
at load time by the pipeline.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

from .errors import EmptyManifestError, ManifestError

DATASET_TAGS = ("refcoco", "refcoco+", "refcocog", "ref-l4", "custom")
SPLIT_TAGS = ("train", "val", "testA", "testB", "test")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixel coordinates, origin top-left.

    Coordinates are real-valued (fractional pixels are legal). Strictly
    positive area is required; negative coordinates are allowed until the box
    is clipped to an image frame.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ValueError(f"{name} must be a finite number, got {value!r}")
        if self.x_max <= self.x_min:
            raise ValueError(f"x_max ≤ x_min ({self.x_max} ≤ {self.x_min})")
        if self.y_max <= self.y_min:
            raise ValueError(f"y_max ≤ y_min ({self.y_max} ≤ {self.y_min})")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_seq(cls, coords) -> "Box":
        coords = list(coords)
        if len(coords) != 4:
            raise ValueError(f"bbox must have 4 coordinates, got {len(coords)}")
        return cls(float(coords[0]), float(coords[1]), float(coords[2]), float(coords[3]))


@dataclass(frozen=True)
class QuerySample:
    """One referring-expression instance: image, query text, ground-truth box."""

    id: str
    image_path: str
    expression: str
    gt_box: Box
    dataset: str
    split: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("id must be non-empty")
        if not self.expression.strip():
            raise ValueError("expression is empty after trimming whitespace")
        if self.dataset not in DATASET_TAGS:
            raise ValueError(f"dataset must be one of {DATASET_TAGS}, got {self.dataset!r}")
        if self.split not in SPLIT_TAGS:
            raise ValueError(f"split must be one of {SPLIT_TAGS}, got {self.split!r}")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "image": self.image_path,
            "expression": self.expression,
            "bbox": self.gt_box.as_list(),
            "dataset": self.dataset,
            "split": self.split,
        }


@dataclass(frozen=True)
class SplitManifest:
    """Ordered samples of one (dataset, split), plus the source checksum."""

    dataset: str
    split: str
    samples: tuple[QuerySample, ...]
    source_checksum: str

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def sample_by_id(self, sample_id: str) -> QuerySample:
        for sample in self.samples:
            if sample.id == sample_id:
                return sample
        raise KeyError(sample_id)


_REQUIRED_FIELDS = ("id", "image", "expression", "bbox", "dataset", "split")


def _sample_from_record(record: dict, line_no: int) -> QuerySample:
    for field in _REQUIRED_FIELDS:
        if field not in record:
            raise ManifestError(f"line {line_no}: missing field {field!r}")
    try:
        gt_box = Box.from_seq(record["bbox"])
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"line {line_no}: invalid bbox: {exc}") from exc
    try:
        return QuerySample(
            id=str(record["id"]),
            image_path=str(record["image"]),
            expression=str(record["expression"]),
            gt_box=gt_box,
            dataset=str(record["dataset"]),
            split=str(record["split"]),
        )
    except ValueError as exc:
        raise ManifestError(f"line {line_no}: {exc}") from exc


def load_manifest(path: str | Path) -> SplitManifest:
    """Parse and validate a JSONL manifest, preserving file order.

    Raises ManifestError with the offending line number on parse failures,
    invariant violations, duplicate ids, or mixed (dataset, split) tags.
    """
    path = Path(path)
    raw = path.read_bytes()
    checksum = hashlib.sha256(raw).hexdigest()

    samples: list[QuerySample] = []
    seen_ids: set[str] = set()
    for line_no, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {line_no}: not valid JSON: {exc}") from exc
        if not isinstance(record, dict):
            raise ManifestError(f"line {line_no}: record must be a JSON object")
        sample = _sample_from_record(record, line_no)
        if sample.id in seen_ids:
            raise ManifestError(f"line {line_no}: duplicate id {sample.id!r}")
        seen_ids.add(sample.id)
        if samples and (sample.dataset, sample.split) != (samples[0].dataset, samples[0].split):
            raise ManifestError(
                f"line {line_no}: mixed (dataset, split): "
                f"({sample.dataset}, {sample.split}) vs expected "
                f"({samples[0].dataset}, {samples[0].split})"
            )
        samples.append(sample)

    if not samples:
        raise EmptyManifestError(f"{path}: manifest contains no records")
    return SplitManifest(
        dataset=samples[0].dataset,
        split=samples[0].split,
        samples=tuple(samples),
        source_checksum=checksum,
    )


def dump_manifest(manifest: SplitManifest, path: str | Path) -> None:
    """Serialize back to the canonical JSONL form (lossless round-trip)."""
    path = Path(path)
    lines = [json.dumps(s.to_record(), ensure_ascii=False) for s in manifest.samples]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def manifest_from_samples(samples: Iterable[QuerySample], checksum: str = "") -> SplitManifest:
    samples = tuple(samples)
    if not samples:
        raise EmptyManifestError("no samples")
    return SplitManifest(samples[0].dataset, samples[0].split, samples, checksum)


def uniform_sample(manifest: SplitManifest, ratio: float, seed: int) -> SplitManifest:
    """Seeded uniform subsample keeping ceil(ratio * N) records.

    Shuffles indices with a seeded Fisher-Yates pass (random.Random.shuffle),
    takes the first ceil(ratio * N), then restores the original relative
    order. Deterministic for a fixed (manifest, ratio, seed).
    """
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    n = len(manifest.samples)
    k = math.ceil(ratio * n)
    indices = list(range(n))
    random.Random(seed).shuffle(indices)
    kept = sorted(indices[:k])
    return replace(manifest, samples=tuple(manifest.samples[i] for i in kept))


def split_stats(manifest: SplitManifest) -> dict:
    """Sample count and mean whitespace-token expression length."""
    if not manifest.samples:
        raise EmptyManifestError("cannot compute stats of an empty manifest")
    lengths = [len(s.expression.split()) for s in manifest.samples]
    return {
        "count": len(lengths),
        "mean_expression_words": sum(lengths) / len(lengths),
    }


def resolve_image_path(sample: QuerySample, image_root: str | Path) -> str:
    """Resolve a sample's image reference against the configured root.

    URLs and absolute paths pass through unchanged.
    """
    raw = sample.image_path
    if "://" in raw:
        return raw
    p = Path(raw)
    if p.is_absolute():
        return str(p)
    return str(Path(image_root) / p)
