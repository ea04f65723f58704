"""Three-stage orchestration per sample and per split, with caching and traces.

Stage flow by variant (subject extraction / positioning+marking / selection):

    full           extract -> detect+mark -> choose by mark
    no_tase        subjects := [expression] -> detect+mark -> choose by mark
    no_moos        extract -> detect+mark -> argmax score
    detector_only  subjects := [expression] -> detect -> argmax score

A selection reply that fails to parse (out_of_range / unparseable / refused)
falls back to the argmax-score candidate; zero candidates scores as a miss.

All remote calls are cached content-addressed on disk, so interrupted runs
resume and warm reruns make zero transport calls. Trace files are fully
deterministic: wall-clock timings go to a timings.jsonl sidecar instead.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import requests
from PIL import Image, UnidentifiedImageError

from . import __version__
from .cache import CacheStore, atomic_write_bytes, atomic_write_json
from .config import VARIANT_STAGES, PipelineConfig
from .dataset import Box, QuerySample, SplitManifest, dump_manifest, resolve_image_path
from .detector import (
    BackendDescriptor,
    DetectionRequest,
    HTTPDetectorBackend,
    MockDetectorBackend,
    RawDetections,
    detect,
    image_content_hash,
)
from .errors import (
    ConfigError,
    FailureCeilingError,
    ImageDecodeError,
    MarkpickError,
    SubjectParseError,
)
from .marker import render
from .mllm import (
    HTTPMLLMTransport,
    MockMLLMTransport,
    RateLimiter,
    SubjectSet,
    build_moos_prompt,
    build_tase_prompt,
    chat_complete,
    parse_selection,
    parse_subjects,
    PARSE_OK,
)

SOURCE_MOOS = "moos"
SOURCE_ARGMAX = "argmax_score_fallback"
SOURCE_NONE = "no_candidates"


@dataclass(frozen=True)
class SelectionOutcome:
    sample_id: str
    predicted_box: Optional[Box]
    source: str

    def __post_init__(self):
        if (self.predicted_box is None) != (self.source == SOURCE_NONE):
            raise ValueError(
                f"predicted_box must be None exactly when source is {SOURCE_NONE!r} "
                f"(got source={self.source!r})"
            )


@dataclass
class StageTrace:
    """Per-sample record of everything each stage saw and produced.

    Serialized trace files must be byte-stable across runs, so wall-clock
    timings are kept in memory here and persisted separately.
    """

    sample_id: str
    variant: str
    expression: str
    image_hash: Optional[str] = None
    tase_raw_reply: Optional[str] = None
    subjects: tuple = ()
    subjects_source: str = ""  # tase | expression_fallback | variant_no_tase
    detect_prompts: tuple = ()
    candidates: tuple = ()  # dicts: box, score, label, subject_index, mark
    dropped_degenerate: int = 0
    marked_image_hash: Optional[str] = None
    marked_size: Optional[tuple] = None
    moos_raw_reply: Optional[str] = None
    moos_parse_status: Optional[str] = None
    chosen_mark: Optional[int] = None
    predicted_box: Optional[list] = None
    outcome_source: str = ""
    fallback_flags: tuple = ()
    retry_counts: dict = field(default_factory=dict)
    error: Optional[str] = None
    timings_ms: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        data = asdict(self)
        data.pop("timings_ms")
        return data

    @classmethod
    def from_json_dict(cls, data: dict) -> "StageTrace":
        known = {f for f in cls.__dataclass_fields__ if f != "timings_ms"}
        kwargs = {k: v for k, v in data.items() if k in known}
        for key in ("subjects", "detect_prompts", "fallback_flags", "candidates"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        if kwargs.get("marked_size") is not None:
            kwargs["marked_size"] = tuple(kwargs["marked_size"])
        return cls(**kwargs)

    def to_outcome(self) -> SelectionOutcome:
        box = None if self.predicted_box is None else Box.from_seq(self.predicted_box)
        return SelectionOutcome(self.sample_id, box, self.outcome_source)


@dataclass
class SampleResult:
    sample_id: str
    outcome: Optional[SelectionOutcome]
    trace: Optional[StageTrace]
    error: Optional[str] = None


@dataclass
class Backends:
    """Runtime collaborators for a run; shareable across worker threads."""

    mllm_transport: object
    detector_backend: object
    cache: CacheStore
    rate_limiter: Optional[RateLimiter] = None
    sleep: Callable[[float], None] = time.sleep


def build_backends(cfg: PipelineConfig) -> Backends:
    if cfg.mllm.transport == "mock":
        if not cfg.mllm.fixtures:
            raise ConfigError("mllm.transport = 'mock' requires mllm.fixtures")
        transport = MockMLLMTransport.from_file(cfg.mllm.fixtures)
    elif cfg.mllm.transport == "http":
        if not cfg.mllm.endpoint:
            raise ConfigError("mllm.transport = 'http' requires mllm.endpoint")
        api_key = os.environ.get(cfg.mllm.api_key_env, "")
        transport = HTTPMLLMTransport(cfg.mllm.endpoint, api_key=api_key, timeout=cfg.mllm.timeout)
    else:
        raise ConfigError(f"unknown mllm transport {cfg.mllm.transport!r}")

    descriptor = BackendDescriptor(
        backend_id=cfg.detector.backend_id,
        single_prompt_only=cfg.detector.single_prompt_only,
    )
    if cfg.detector.transport == "mock":
        if not cfg.detector.fixtures:
            raise ConfigError("detector.transport = 'mock' requires detector.fixtures")
        backend = MockDetectorBackend.from_file(cfg.detector.fixtures, descriptor)
    elif cfg.detector.transport == "http":
        if not cfg.detector.endpoint:
            raise ConfigError("detector.transport = 'http' requires detector.endpoint")
        backend = HTTPDetectorBackend(cfg.detector.endpoint, descriptor, timeout=cfg.detector.timeout)
    else:
        raise ConfigError(f"unknown detector transport {cfg.detector.transport!r}")

    limiter = (
        RateLimiter(cfg.mllm.requests_per_minute) if cfg.mllm.requests_per_minute > 0 else None
    )
    return Backends(
        mllm_transport=transport,
        detector_backend=backend,
        cache=CacheStore(cfg.cache_dir),
        rate_limiter=limiter,
    )


def cache_key(
    stage: str,
    *,
    backend_id: str,
    template_version: str,
    prompt_text: str,
    image_hash: Optional[str],
    thresholds: Optional[dict],
) -> str:
    """Key identical logical inputs to the same record; any field change misses."""
    if stage not in ("tase", "detect", "moos"):
        raise ValueError(f"unknown stage {stage!r}")
    payload = {
        "stage": stage,
        "backend": backend_id,
        "template_version": template_version,
        "prompt": prompt_text,
        "image": image_hash,
        "thresholds": thresholds,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class _CachingDetectorBackend:
    """Wraps a backend with the per-call (prompt, image, thresholds) cache."""

    def __init__(self, inner, cache: CacheStore, template_version: str):
        self.inner = inner
        self.cache = cache
        self.template_version = template_version
        self.descriptor = inner.descriptor

    def detect(self, request: DetectionRequest) -> RawDetections:
        key = cache_key(
            "detect",
            backend_id=self.descriptor.backend_id,
            template_version=self.template_version,
            prompt_text=request.prompt,
            image_hash=image_content_hash(request.image),
            thresholds={
                "box": request.box_threshold,
                "text": request.text_threshold,
                "max": request.max_detections,
            },
        )
        cached = self.cache.get("detect", key)
        if cached is None:
            raw = self.inner.detect(request)
            cached = {
                "boxes": [list(b) for b in raw.boxes],
                "scores": list(raw.scores),
                "labels": list(raw.labels),
            }
            self.cache.put("detect", key, cached)
        return RawDetections(
            boxes=tuple(tuple(v) for v in cached["boxes"]),
            scores=tuple(cached["scores"]),
            labels=tuple(cached["labels"]),
        )

    def health(self):
        return self.inner.health()


def _read_image_bytes(path: str) -> bytes:
    if "://" in path:
        try:
            resp = requests.get(path, timeout=60)
            resp.raise_for_status()
            return resp.content
        except requests.RequestException as exc:
            raise MarkpickError(f"cannot fetch image {path}: {exc}") from exc
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise MarkpickError(f"cannot read image {path}: {exc}") from exc


def _decode_image(image_bytes: bytes) -> Image.Image:
    try:
        im = Image.open(io.BytesIO(image_bytes))
        im.load()
        return im
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode image: {exc}") from exc


def _cached_completion(stage, request, cfg, backends):
    key = cache_key(
        stage,
        backend_id=cfg.mllm.model,
        template_version=cfg.template_version,
        prompt_text=request.text_content(),
        image_hash=_request_image_hash(request),
        thresholds=None,
    )
    record = backends.cache.get(stage, key)
    if record is None:
        result = chat_complete(
            request,
            backends.mllm_transport,
            max_retries=cfg.mllm.max_retries,
            backoff_base=cfg.mllm.backoff_base,
            rate_limiter=backends.rate_limiter,
            sleep=backends.sleep,
        )
        record = {"reply": result.text, "retries": result.retries}
        backends.cache.put(stage, key, record)
    return record


def _request_image_hash(request) -> Optional[str]:
    from .mllm import ImagePart

    for message in request.messages:
        for part in message.parts:
            if isinstance(part, ImagePart):
                return hashlib.sha256(part.data).hexdigest()
    return None


def _fallback_subjects(expression: str, raw_reply: str) -> SubjectSet:
    # The full expression becomes the subject; expressions that themselves
    # contain the " ." separator are split at it so the SubjectSet invariant
    # holds and the joined detector prompt reproduces the expression.
    try:
        parsed = parse_subjects(expression + " .")
        return SubjectSet(parsed.subjects, raw_reply)
    except SubjectParseError:
        return SubjectSet((expression.replace(" .", " ").strip() or "object",), raw_reply)


def run_sample(
    sample: QuerySample, cfg: PipelineConfig, backends: Backends
) -> tuple[SelectionOutcome, StageTrace]:
    """Execute the configured variant's stages for one sample."""
    uses_tase, uses_moos = VARIANT_STAGES[cfg.variant]
    trace = StageTrace(sample_id=sample.id, variant=cfg.variant, expression=sample.expression)
    expression = sample.expression.strip()

    image_path = resolve_image_path(sample, cfg.image_root)
    image_bytes = _read_image_bytes(image_path)
    trace.image_hash = image_content_hash(image_bytes)

    # Stage 1: subject extraction (or its variant/fallback substitutes).
    t0 = time.monotonic()
    if uses_tase:
        request = build_tase_prompt(
            sample.expression,
            model_id=cfg.mllm.model,
            temperature=cfg.mllm.temperature,
            max_tokens=cfg.mllm.max_tokens,
        )
        record = _cached_completion("tase", request, cfg, backends)
        trace.tase_raw_reply = record["reply"]
        trace.retry_counts["tase"] = record["retries"]
        try:
            subject_set = parse_subjects(record["reply"])
            trace.subjects_source = "tase"
        except SubjectParseError:
            subject_set = _fallback_subjects(expression, record["reply"])
            trace.subjects_source = "expression_fallback"
            trace.fallback_flags += ("tase_empty_fallback",)
    else:
        subject_set = _fallback_subjects(expression, "")
        trace.subjects_source = "variant_no_tase"
    trace.subjects = subject_set.subjects
    trace.timings_ms["tase"] = (time.monotonic() - t0) * 1000.0

    # Stage 2: positioning — per-subject detection, merge, dedup, marks.
    t0 = time.monotonic()
    caching_backend = _CachingDetectorBackend(
        backends.detector_backend, backends.cache, cfg.template_version
    )
    detections = detect(subject_set, image_bytes, cfg, caching_backend)
    if caching_backend.descriptor.single_prompt_only:
        trace.detect_prompts = (subject_set.detector_prompt(),)
    else:
        trace.detect_prompts = subject_set.subjects
    trace.candidates = tuple(
        {
            "box": c.box.as_list(),
            "score": c.score,
            "label": c.label,
            "subject_index": c.subject_index,
            "mark": mark,
        }
        for mark, c in zip(detections.marks, detections.candidates)
    )
    trace.dropped_degenerate = detections.dropped_degenerate
    trace.timings_ms["detect"] = (time.monotonic() - t0) * 1000.0

    if not detections.candidates:
        outcome = SelectionOutcome(sample.id, None, SOURCE_NONE)
        trace.outcome_source = SOURCE_NONE
        return outcome, trace

    # Mark rendering happens for every variant with candidates: the
    # positioning stage includes the marked image, and traces stay uniform.
    t0 = time.monotonic()
    marked = render(_decode_image(image_bytes), detections, cfg.style)
    trace.marked_image_hash = marked.content_hash
    trace.marked_size = (marked.width, marked.height)
    trace.timings_ms["render"] = (time.monotonic() - t0) * 1000.0

    k = len(detections.candidates)
    predicted: Optional[Box] = None
    source = SOURCE_ARGMAX

    if uses_moos and (k > 1 or not cfg.short_circuit_single):
        t0 = time.monotonic()
        request = build_moos_prompt(
            sample.expression,
            marked,
            k,
            model_id=cfg.mllm.model,
            temperature=cfg.mllm.temperature,
            max_tokens=cfg.mllm.max_tokens,
        )
        record = _cached_completion("moos", request, cfg, backends)
        trace.moos_raw_reply = record["reply"]
        trace.retry_counts["moos"] = record["retries"]
        reply = parse_selection(record["reply"], k)
        trace.moos_parse_status = reply.parse_status
        trace.chosen_mark = reply.chosen_mark
        if reply.parse_status == PARSE_OK:
            predicted = detections.candidate_for_mark(reply.chosen_mark).box
            source = SOURCE_MOOS
        else:
            predicted = detections.candidates[0].box
            source = SOURCE_ARGMAX
            trace.fallback_flags += (f"moos_{reply.parse_status}",)
        trace.timings_ms["moos"] = (time.monotonic() - t0) * 1000.0
    else:
        predicted = detections.candidates[0].box
        source = SOURCE_ARGMAX
        if uses_moos and k == 1 and cfg.short_circuit_single:
            trace.fallback_flags += ("moos_single_short_circuit",)

    trace.predicted_box = predicted.as_list()
    trace.outcome_source = source
    return SelectionOutcome(sample.id, predicted, source), trace


def _trace_filename(sample_id: str) -> str:
    return sample_id.replace(os.sep, "_").replace("/", "_") + ".json"


def write_run_manifest(run_dir: Path, cfg: PipelineConfig, manifest: SplitManifest) -> None:
    payload = {
        "package_version": __version__,
        "config": asdict(cfg),
        "dataset": manifest.dataset,
        "split": manifest.split,
        "n_samples": len(manifest.samples),
        "source_checksum": manifest.source_checksum,
        "method": cfg.method_label(),
    }
    atomic_write_json(run_dir / "run_manifest.json", payload)


def run_split(
    manifest: SplitManifest,
    cfg: PipelineConfig,
    backends: Backends,
    run_dir: Optional[str | Path] = None,
) -> list[SampleResult]:
    """Process every sample with bounded parallelism; output in manifest order.

    Per-sample failures are recorded, not raised; results are persisted
    incrementally to run_dir (traces + timing sidecar). Raises
    FailureCeilingError (carrying the results) when the failure rate exceeds
    the configured ceiling.
    """
    if not manifest.samples:
        raise ValueError("manifest is empty")
    run_path: Optional[Path] = None
    timing_lock = threading.Lock()
    if run_dir is not None:
        run_path = Path(run_dir)
        (run_path / "traces").mkdir(parents=True, exist_ok=True)
        write_run_manifest(run_path, cfg, manifest)
        dump_manifest(manifest, run_path / "manifest.jsonl")
        (run_path / "timings.jsonl").unlink(missing_ok=True)

    def persist(trace: StageTrace) -> None:
        if run_path is None:
            return
        blob = json.dumps(trace.to_json_dict(), sort_keys=True, indent=2) + "\n"
        atomic_write_bytes(run_path / "traces" / _trace_filename(trace.sample_id), blob.encode())
        line = json.dumps(
            {"id": trace.sample_id, "timings_ms": trace.timings_ms}, sort_keys=True
        )
        with timing_lock:
            with open(run_path / "timings.jsonl", "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def worker(sample: QuerySample) -> SampleResult:
        try:
            outcome, trace = run_sample(sample, cfg, backends)
            persist(trace)
            return SampleResult(sample.id, outcome, trace)
        except MarkpickError as exc:
            trace = StageTrace(
                sample_id=sample.id,
                variant=cfg.variant,
                expression=sample.expression,
                error=f"{type(exc).__name__}: {exc}",
            )
            persist(trace)
            return SampleResult(sample.id, None, trace, error=trace.error)

    with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
        results = list(pool.map(worker, manifest.samples))

    failures = sum(1 for r in results if r.error is not None)
    if failures and failures / len(results) > cfg.failure_ceiling:
        raise FailureCeilingError(
            f"{failures}/{len(results)} samples failed "
            f"(ceiling {cfg.failure_ceiling:.0%})",
            results=results,
        )
    return results
