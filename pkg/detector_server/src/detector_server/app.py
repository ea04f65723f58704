"""FastAPI application implementing the detector wire contract."""

from __future__ import annotations

import base64
import binascii
import io

from fastapi import FastAPI, HTTPException
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, Field

from .models import DetectionModel


class DetectRequest(BaseModel):
    image_b64: str
    prompt: str = Field(min_length=1)
    # None falls back to the server's configured defaults
    box_threshold: float | None = Field(default=None, ge=0.0, le=1.0)
    text_threshold: float | None = Field(default=None, ge=0.0, le=1.0)
    max_detections: int = Field(default=20, ge=1)


class DetectResponse(BaseModel):
    boxes: list[list[float]]
    scores: list[float]
    labels: list[str]
    # metadata on top of the contract arrays: which thresholds were honored
    thresholds_applied: dict


def create_app(
    model: DetectionModel,
    default_box_threshold: float = 0.25,
    default_text_threshold: float = 0.25,
) -> FastAPI:
    app = FastAPI(title="detector-server")

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "model": model.model_id}

    @app.post("/detect", response_model=DetectResponse)
    def detect(request: DetectRequest) -> DetectResponse:
        box_threshold = (
            request.box_threshold if request.box_threshold is not None else default_box_threshold
        )
        try:
            image_bytes = base64.b64decode(request.image_b64, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"image_b64 is not base64: {exc}")
        try:
            image = Image.open(io.BytesIO(image_bytes))
            image.load()
        except (UnidentifiedImageError, OSError) as exc:
            raise HTTPException(status_code=400, detail=f"cannot decode image: {exc}")

        try:
            raw = model.predict(image, request.prompt)
        except Exception as exc:
            raise HTTPException(status_code=500, detail=f"inference failed: {exc}")

        w, h = image.size
        kept = []
        for box, score, label in raw:
            if score < box_threshold:
                continue
            x0, y0, x1, y1 = (float(v) for v in box)
            # normalize into the frame; drop anything left without area
            x0, x1 = max(0.0, min(x0, w)), max(0.0, min(x1, w))
            y0, y1 = max(0.0, min(y0, h)), max(0.0, min(y1, h))
            if x1 <= x0 or y1 <= y0:
                continue
            kept.append(([x0, y0, x1, y1], float(score), str(label)))

        kept.sort(key=lambda item: (-item[1], item[0]))
        kept = kept[: request.max_detections]
        return DetectResponse(
            boxes=[box for box, _, _ in kept],
            scores=[score for _, score, _ in kept],
            labels=[label for _, _, label in kept],
            thresholds_applied={
                "box_threshold": True,
                # the stub (and some real detectors) have no text-score notion
                "text_threshold": False,
            },
        )

    return app
