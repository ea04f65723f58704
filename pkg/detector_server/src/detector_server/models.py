"""Detection model backends behind a common predict() protocol.

A model returns raw candidates as (box_xyxy_pixels, score, label) tuples in
the image's absolute pixel frame; thresholding, sorting and truncation are
the server's job. Whatever native coordinate convention a wrapped model
uses must be normalized to absolute corner coordinates here.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image


class ModelLoadError(Exception):
    """Model could not be constructed (missing deps, bad checkpoint)."""


class DetectionModel(Protocol):
    model_id: str

    def predict(self, image: Image.Image, prompt: str) -> list[tuple[list[float], float, str]]: ...


class StubModel:
    """Deterministic pseudo-detector for contract tests and smoke runs.

    Proposals are derived from a hash of (pixels, prompt): same request,
    same boxes, on every platform. Scores stay in [0.55, 0.93], so a
    box_threshold of 1.0 always yields an empty result.
    """

    model_id = "stub"

    def predict(self, image: Image.Image, prompt: str) -> list[tuple[list[float], float, str]]:
        arr = np.asarray(image.convert("RGB"))
        h, w = arr.shape[:2]
        digest = hashlib.sha256(arr.tobytes() + prompt.encode("utf-8")).digest()
        label = prompt.strip().strip(".").strip() or "object"
        candidates = []
        for j in range(1 + digest[0] % 3):
            o = 1 + 4 * j
            x0 = digest[o] / 255 * w * 0.55
            y0 = digest[o + 1] / 255 * h * 0.55
            x1 = min(float(w), x0 + max(2.0, digest[o + 2] / 255 * w * 0.4))
            y1 = min(float(h), y0 + max(2.0, digest[o + 3] / 255 * h * 0.4))
            score = round(0.93 - 0.17 * j - (digest[o] % 7) * 0.004, 4)
            candidates.append(
                ([round(x0, 2), round(y0, 2), round(x1, 2), round(y1, 2)], score, label)
            )
        return candidates


class GroundingDinoModel:
    """Thin adapter over a HuggingFace grounded-detection checkpoint.

    Reference wiring only; needs transformers + torch and a downloaded
    checkpoint, so it is not exercised by the test suite.
    """

    def __init__(self, checkpoint: str, device: str = "cpu"):
        try:
            import torch
            from transformers import AutoModelForZeroShotObjectDetection, AutoProcessor
        except ImportError as exc:
            raise ModelLoadError(f"transformers/torch unavailable: {exc}") from exc
        try:
            self.processor = AutoProcessor.from_pretrained(checkpoint)
            self.model = AutoModelForZeroShotObjectDetection.from_pretrained(checkpoint).to(device)
        except Exception as exc:  # hub/deserialization errors vary widely
            raise ModelLoadError(f"cannot load checkpoint {checkpoint!r}: {exc}") from exc
        self._torch = torch
        self.device = device
        self.model_id = f"grounding-dino:{checkpoint}"

    def predict(self, image: Image.Image, prompt: str) -> list[tuple[list[float], float, str]]:
        text = prompt if prompt.rstrip().endswith(".") else prompt + " ."
        inputs = self.processor(images=image, text=text, return_tensors="pt").to(self.device)
        with self._torch.no_grad():
            outputs = self.model(**inputs)
        processed = self.processor.post_process_grounded_object_detection(
            outputs,
            inputs.input_ids,
            threshold=0.0,
            text_threshold=0.0,
            target_sizes=[(image.height, image.width)],
        )[0]
        return [
            ([float(v) for v in box], float(score), str(label))
            for box, score, label in zip(
                processed["boxes"], processed["scores"], processed["labels"]
            )
        ]


def load_model(name: str, checkpoint: str | None = None, device: str = "cpu") -> DetectionModel:
    if name == "stub":
        return StubModel()
    if name == "grounding-dino":
        if not checkpoint:
            raise ModelLoadError("grounding-dino requires --checkpoint")
        looks_local = "/" in checkpoint and Path(checkpoint).suffix in (".pth", ".pt", "")
        if looks_local and Path(checkpoint).expanduser().is_dir() is False and not Path(checkpoint).exists():
            raise ModelLoadError(f"checkpoint does not exist: {checkpoint}")
        return GroundingDinoModel(checkpoint, device)
    raise ModelLoadError(f"unknown model {name!r}; known: stub, grounding-dino")
