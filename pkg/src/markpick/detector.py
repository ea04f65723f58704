"""Detector client: per-subject backend calls, merge, NMS dedup, mark assignment.

The wire contract (shared with any conforming server):

    POST {endpoint}/detect
        {"image_b64": str, "prompt": str, "box_threshold": num,
         "text_threshold": num, "max_detections": int}
        -> {"boxes": [[x_min, y_min, x_max, y_max], ...],
            "scores": [num, ...], "labels": [str, ...]}   (equal lengths)
    GET {endpoint}/health -> {"status": "ok", "model": str}
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import requests
from PIL import Image, UnidentifiedImageError

from .dataset import Box
from .errors import (
    BackendContractError,
    BackendError,
    DegenerateBoxError,
    ImageDecodeError,
)
from .marker import clip_box
from .metrics import iou
from .mllm import SubjectSet


@dataclass(frozen=True)
class BackendDescriptor:
    """Identity and capabilities of a detector backend."""

    backend_id: str
    single_prompt_only: bool = False
    synthesizes_scores: bool = False


@dataclass(frozen=True)
class DetectionRequest:
    """One backend call: an encoded image plus a text prompt and thresholds."""

    image: bytes
    prompt: str
    box_threshold: float = 0.25
    text_threshold: float = 0.25
    max_detections: int = 20

    def __post_init__(self):
        if not self.prompt.strip():
            raise ValueError("prompt must be non-empty")
        for name in ("box_threshold", "text_threshold"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.max_detections < 1:
            raise ValueError("max_detections must be positive")


@dataclass(frozen=True)
class RawDetections:
    boxes: tuple[tuple[float, float, float, float], ...]
    scores: tuple[float, ...]
    labels: tuple[str, ...]


@dataclass(frozen=True)
class Candidate:
    box: Box
    score: float
    label: str
    subject_index: int

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if self.subject_index < 1:
            raise ValueError(f"subject_index must be >= 1, got {self.subject_index}")


def _sort_key(c: Candidate):
    # Descending score, then ascending box corners, then attribution: total order.
    return (-c.score, c.box.x_min, c.box.y_min, c.box.x_max, c.box.y_max, c.subject_index, c.label)


@dataclass(frozen=True)
class DetectionSet:
    """Deduplicated candidates in final mark order; marks are 1..K implicitly."""

    candidates: tuple[Candidate, ...]
    dropped_degenerate: int = 0

    @property
    def marks(self) -> tuple[int, ...]:
        return tuple(range(1, len(self.candidates) + 1))

    def candidate_for_mark(self, mark: int) -> Candidate:
        if not (1 <= mark <= len(self.candidates)):
            raise IndexError(f"mark {mark} out of 1..{len(self.candidates)}")
        return self.candidates[mark - 1]


class DetectorBackend(Protocol):
    descriptor: BackendDescriptor

    def detect(self, request: DetectionRequest) -> RawDetections: ...

    def health(self) -> dict: ...


def dedup_candidates(candidates: Sequence[Candidate], iou_threshold: float) -> list[Candidate]:
    """Greedy cross-subject NMS.

    Sorts by descending score (deterministic tie-break) and keeps a candidate
    iff its IoU with every kept candidate is below the threshold.
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    kept: list[Candidate] = []
    for cand in sorted(candidates, key=_sort_key):
        if all(iou(cand.box, k.box) < iou_threshold for k in kept):
            kept.append(cand)
    return kept


def assign_marks(candidates: Sequence[Candidate], dropped_degenerate: int = 0) -> DetectionSet:
    """Freeze an already deduplicated, sorted candidate list into mark order."""
    ordered = tuple(sorted(candidates, key=_sort_key))
    return DetectionSet(candidates=ordered, dropped_degenerate=dropped_degenerate)


def image_size(image: bytes) -> tuple[int, int]:
    try:
        with Image.open(io.BytesIO(image)) as im:
            return im.size
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode image: {exc}") from exc


def detect(
    subjects: SubjectSet,
    image: bytes,
    cfg,
    backend: DetectorBackend,
) -> DetectionSet:
    """Collect scored candidates for every subject phrase and merge them.

    One backend call per subject (subject_index records attribution) unless
    the backend only takes a single joined prompt. Raw boxes are clipped to
    the image frame (degenerate ones dropped and counted), scores asserted
    against the contract, then merged, deduplicated, truncated and marked.
    """
    if not subjects.subjects:
        raise ValueError("subjects must be non-empty")
    width, height = image_size(image)

    if backend.descriptor.single_prompt_only:
        prompts = [(None, subjects.detector_prompt())]
    else:
        prompts = [(r, phrase) for r, phrase in enumerate(subjects.subjects, start=1)]

    merged: list[Candidate] = []
    dropped = 0
    for subject_index, prompt in prompts:
        raw = backend.detect(
            DetectionRequest(
                image=image,
                prompt=prompt,
                box_threshold=cfg.box_threshold,
                text_threshold=cfg.text_threshold,
                max_detections=cfg.max_detections,
            )
        )
        for coords, score, label in zip(raw.boxes, raw.scores, raw.labels):
            if not (0.0 <= score <= 1.0) or score < cfg.box_threshold:
                raise BackendContractError(
                    f"backend {backend.descriptor.backend_id!r} returned score {score} "
                    f"violating threshold {cfg.box_threshold}"
                )
            try:
                box = Box.from_seq(coords)
            except ValueError as exc:
                raise BackendContractError(
                    f"backend {backend.descriptor.backend_id!r} returned invalid box "
                    f"{list(coords)}: {exc}"
                ) from exc
            try:
                box = clip_box(box, width, height)
            except DegenerateBoxError:
                dropped += 1
                continue
            if subject_index is None:
                # Joined-prompt backend: attribute by label match, else first subject.
                try:
                    r = subjects.subjects.index(label) + 1
                except ValueError:
                    r = 1
            else:
                r = subject_index
            merged.append(Candidate(box=box, score=float(score), label=str(label), subject_index=r))

    deduped = dedup_candidates(merged, cfg.dedup_iou)
    return assign_marks(deduped[: cfg.max_detections], dropped_degenerate=dropped)


class HTTPDetectorBackend:
    """Client for the POST /detect + GET /health wire contract."""

    def __init__(
        self,
        endpoint: str,
        descriptor: Optional[BackendDescriptor] = None,
        timeout: float = 120.0,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.descriptor = descriptor or BackendDescriptor(backend_id=endpoint)
        self.timeout = timeout
        self.session = session or requests.Session()

    def detect(self, request: DetectionRequest) -> RawDetections:
        body = {
            "image_b64": base64.b64encode(request.image).decode("ascii"),
            "prompt": request.prompt,
            "box_threshold": request.box_threshold,
            "text_threshold": request.text_threshold,
            "max_detections": request.max_detections,
        }
        try:
            resp = self.session.post(f"{self.endpoint}/detect", json=body, timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendError(f"detector at {self.endpoint} unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(
                f"detector at {self.endpoint} answered HTTP {resp.status_code}: {resp.text[:200]}"
            )
        try:
            payload = resp.json()
        except ValueError as exc:
            raise BackendContractError(f"detector response is not JSON: {exc}") from exc
        return _parse_detection_payload(payload)

    def health(self) -> dict:
        try:
            resp = self.session.get(f"{self.endpoint}/health", timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendError(f"detector at {self.endpoint} unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"health check failed: HTTP {resp.status_code}")
        return resp.json()


def _parse_detection_payload(payload: dict) -> RawDetections:
    for key in ("boxes", "scores", "labels"):
        if key not in payload:
            raise BackendContractError(f"detector response missing {key!r}")
    boxes, scores, labels = payload["boxes"], payload["scores"], payload["labels"]
    if not (len(boxes) == len(scores) == len(labels)):
        raise BackendContractError(
            f"array length mismatch: {len(boxes)} boxes, {len(scores)} scores, "
            f"{len(labels)} labels"
        )
    return RawDetections(
        boxes=tuple(tuple(float(v) for v in b) for b in boxes),
        scores=tuple(float(s) for s in scores),
        labels=tuple(str(l) for l in labels),
    )


def image_content_hash(image: bytes) -> str:
    return hashlib.sha256(image).hexdigest()


class MockDetectorBackend:
    """In-process backend backed by a fixture map keyed (image hash, prompt)."""

    def __init__(
        self,
        fixtures: dict[str, dict[str, dict]],
        descriptor: Optional[BackendDescriptor] = None,
    ):
        self.fixtures = fixtures
        self.descriptor = descriptor or BackendDescriptor(backend_id="mock")
        self.calls = 0
        self.call_log: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, descriptor: Optional[BackendDescriptor] = None):
        fixtures = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(fixtures, descriptor)

    def detect(self, request: DetectionRequest) -> RawDetections:
        key = image_content_hash(request.image)
        with self._lock:
            self.calls += 1
            self.call_log.append((key, request.prompt))
        by_prompt = self.fixtures.get(key)
        if by_prompt is None or request.prompt not in by_prompt:
            raise BackendError(
                f"no detector fixture for image {key[:12]}… prompt {request.prompt!r}"
            )
        return _parse_detection_payload(by_prompt[request.prompt])

    def health(self) -> dict:
        return {"status": "ok", "model": self.descriptor.backend_id}
