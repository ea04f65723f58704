"""Run configuration: dataclass settings plus the TOML file loader.

Secrets never live in the file; the MLLM section names an environment
variable holding the bearer token.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import templates
from .errors import ConfigError
from .marker import MarkStyle

VARIANT_NAMES = ("full", "no_tase", "no_moos", "detector_only")

# variant -> (subject extraction stage on, choice selection stage on)
VARIANT_STAGES = {
    "full": (True, True),
    "no_tase": (False, True),
    "no_moos": (True, False),
    "detector_only": (False, False),
}


@dataclass(frozen=True)
class MLLMSettings:
    endpoint: str = ""
    model: str = "gpt-4o"
    api_key_env: str = "MARKPICK_MLLM_API_KEY"
    transport: str = "http"  # http | mock
    fixtures: Optional[str] = None
    temperature: float = 0.0
    max_tokens: int = 256
    max_retries: int = 3
    backoff_base: float = 0.5
    requests_per_minute: int = 0
    timeout: float = 120.0


@dataclass(frozen=True)
class DetectorSettings:
    endpoint: str = ""
    backend_id: str = "detector"
    transport: str = "http"  # http | mock
    fixtures: Optional[str] = None
    single_prompt_only: bool = False
    timeout: float = 120.0


@dataclass(frozen=True)
class PipelineConfig:
    mllm: MLLMSettings = field(default_factory=MLLMSettings)
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    box_threshold: float = 0.25
    text_threshold: float = 0.25
    max_detections: int = 20
    dedup_iou: float = 0.9
    sampling_ratio: float = 1.0
    sampling_seed: int = 1234
    variant: str = "full"
    concurrency: int = 4
    cache_dir: str = ".markpick-cache"
    template_version: str = templates.TEMPLATE_VERSION
    short_circuit_single: bool = False
    failure_ceiling: float = 0.05
    image_root: str = "."
    manifests: dict = field(default_factory=dict)  # "dataset:split" -> path
    style: MarkStyle = field(default_factory=MarkStyle)

    def __post_init__(self):
        if self.variant not in VARIANT_NAMES:
            raise ConfigError(f"variant must be one of {VARIANT_NAMES}, got {self.variant!r}")
        if self.concurrency < 1:
            raise ConfigError(f"concurrency must be >= 1, got {self.concurrency}")
        for name in ("box_threshold", "text_threshold"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if not (0.0 < self.dedup_iou <= 1.0):
            raise ConfigError(f"dedup_iou must be in (0, 1], got {self.dedup_iou}")
        if not (0.0 < self.sampling_ratio <= 1.0):
            raise ConfigError(f"sampling_ratio must be in (0, 1], got {self.sampling_ratio}")
        if self.max_detections < 1:
            raise ConfigError(f"max_detections must be >= 1, got {self.max_detections}")
        if not (0.0 <= self.failure_ceiling <= 1.0):
            raise ConfigError(f"failure_ceiling must be in [0, 1], got {self.failure_ceiling}")

    def method_label(self) -> str:
        return f"{self.detector.backend_id}:{self.variant}"


def _section(data: dict, name: str) -> dict:
    value = data.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a table")
    return value


def _style_from(section: dict) -> MarkStyle:
    kwargs = {}
    if "palette" in section:
        kwargs["palette"] = tuple(tuple(int(c) for c in rgb) for rgb in section["palette"])
    for key in ("outline_width", "badge_divisor", "badge_min_px"):
        if key in section:
            kwargs[key] = int(section[key])
    for key in ("badge_fill", "glyph_color"):
        if key in section:
            kwargs[key] = tuple(int(c) for c in section[key])
    return MarkStyle(**kwargs)


def config_from_dict(data: dict, base_dir: Path = Path(".")) -> PipelineConfig:
    mllm_raw = _section(data, "mllm")
    detector_raw = _section(data, "detector")
    pipeline_raw = _section(data, "pipeline")
    sampling_raw = _section(data, "sampling")
    data_raw = _section(data, "data")
    style_raw = _section(data, "style")

    def resolve(p):
        return None if p is None else str((base_dir / p) if not Path(p).is_absolute() else Path(p))

    try:
        mllm = MLLMSettings(
            endpoint=mllm_raw.get("endpoint", ""),
            model=mllm_raw.get("model", "gpt-4o"),
            api_key_env=mllm_raw.get("api_key_env", "MARKPICK_MLLM_API_KEY"),
            transport=mllm_raw.get("transport", "http"),
            fixtures=resolve(mllm_raw.get("fixtures")),
            temperature=float(mllm_raw.get("temperature", 0.0)),
            max_tokens=int(mllm_raw.get("max_tokens", 256)),
            max_retries=int(mllm_raw.get("max_retries", 3)),
            backoff_base=float(mllm_raw.get("backoff_base", 0.5)),
            requests_per_minute=int(mllm_raw.get("requests_per_minute", 0)),
            timeout=float(mllm_raw.get("timeout", 120.0)),
        )
        detector = DetectorSettings(
            endpoint=detector_raw.get("endpoint", ""),
            backend_id=detector_raw.get("id", "detector"),
            transport=detector_raw.get("transport", "http"),
            fixtures=resolve(detector_raw.get("fixtures")),
            single_prompt_only=bool(detector_raw.get("single_prompt_only", False)),
            timeout=float(detector_raw.get("timeout", 120.0)),
        )
        manifests = {str(k): str((base_dir / v) if not Path(v).is_absolute() else v)
                     for k, v in data_raw.get("manifests", {}).items()}
        return PipelineConfig(
            mllm=mllm,
            detector=detector,
            box_threshold=float(pipeline_raw.get("box_threshold", 0.25)),
            text_threshold=float(pipeline_raw.get("text_threshold", 0.25)),
            max_detections=int(pipeline_raw.get("max_detections", 20)),
            dedup_iou=float(pipeline_raw.get("dedup_iou", 0.9)),
            sampling_ratio=float(sampling_raw.get("ratio", 1.0)),
            sampling_seed=int(sampling_raw.get("seed", 1234)),
            variant=pipeline_raw.get("variant", "full"),
            concurrency=int(pipeline_raw.get("concurrency", 4)),
            cache_dir=str(resolve(pipeline_raw.get("cache_dir", ".markpick-cache"))),
            template_version=pipeline_raw.get("template_version", templates.TEMPLATE_VERSION),
            short_circuit_single=bool(pipeline_raw.get("short_circuit_single", False)),
            failure_ceiling=float(pipeline_raw.get("failure_ceiling", 0.05)),
            image_root=str(resolve(data_raw.get("image_root", "."))),
            manifests=manifests,
            style=_style_from(style_raw),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data, base_dir=path.parent)


def apply_overrides(cfg: PipelineConfig, **overrides) -> PipelineConfig:
    """Replace top-level fields with non-None CLI override values."""
    updates = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **updates) if updates else cfg
