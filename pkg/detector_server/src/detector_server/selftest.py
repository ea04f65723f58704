"""Contract self-test: replay golden requests and check the response shape.

Shape means structure, not values: required keys, element types, equal array
lengths, valid box corners, score range and threshold echo, truncation. The
stub model keeps the replay hermetic.
"""

from __future__ import annotations

import json
from importlib import resources
from numbers import Number
from pathlib import Path
from typing import Optional

from .app import create_app
from .models import StubModel


def default_golden_dir() -> Path:
    return Path(str(resources.files("detector_server") / "golden"))


def _check_shape(request: dict, payload: dict, name: str, problems: list[str]) -> None:
    for key in ("boxes", "scores", "labels"):
        if key not in payload:
            problems.append(f"{name}: response missing key {key!r}")
            return
        if not isinstance(payload[key], list):
            problems.append(f"{name}: {key} is not an array")
            return
    boxes, scores, labels = payload["boxes"], payload["scores"], payload["labels"]
    if not (len(boxes) == len(scores) == len(labels)):
        problems.append(
            f"{name}: array length mismatch boxes={len(boxes)} "
            f"scores={len(scores)} labels={len(labels)}"
        )
        return
    if len(boxes) > request.get("max_detections", 20):
        problems.append(f"{name}: {len(boxes)} boxes exceed max_detections")
    for i, box in enumerate(boxes):
        if len(box) != 4 or not all(isinstance(v, Number) for v in box):
            problems.append(f"{name}: box {i} is not four numbers: {box}")
            continue
        x0, y0, x1, y1 = box
        if not (x1 > x0 and y1 > y0):
            problems.append(f"{name}: box {i} has no positive area: {box}")
    threshold = request.get("box_threshold", 0.25)
    for i, score in enumerate(scores):
        if not isinstance(score, Number) or not (0.0 <= score <= 1.0):
            problems.append(f"{name}: score {i} outside [0, 1]: {score}")
        elif score < threshold:
            problems.append(f"{name}: score {i} = {score} below box_threshold {threshold}")
    for i, label in enumerate(labels):
        if not isinstance(label, str):
            problems.append(f"{name}: label {i} is not a string")


def contract_selftest(golden_dir: Optional[str | Path] = None, client=None):
    """Returns (ok, problems). `client` defaults to an in-process stub app."""
    if client is None:
        from fastapi.testclient import TestClient

        client = TestClient(create_app(StubModel()))
    golden = Path(golden_dir) if golden_dir is not None else default_golden_dir()
    fixture_paths = sorted(golden.glob("*.json"))

    problems: list[str] = []
    if not fixture_paths:
        problems.append(f"no golden request fixtures in {golden}")

    health = client.get("/health")
    if health.status_code != 200:
        problems.append(f"/health answered HTTP {health.status_code}")
    else:
        body = health.json()
        if body.get("status") != "ok" or not isinstance(body.get("model"), str):
            problems.append(f"/health payload malformed: {body}")

    for path in fixture_paths:
        request = json.loads(path.read_text(encoding="utf-8"))
        response = client.post("/detect", json=request)
        if response.status_code != 200:
            problems.append(f"{path.name}: HTTP {response.status_code}: {response.text[:160]}")
            continue
        _check_shape(request, response.json(), path.name, problems)

    return (not problems, problems)
