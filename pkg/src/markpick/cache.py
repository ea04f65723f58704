"""Content-addressed on-disk cache: one JSON record per key, atomic publish.

Safe for concurrent readers and concurrent writers of the same key: writers
produce identical deterministic content and publish via os.replace.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Optional

STAGES = ("tase", "detect", "moos")


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: Path, payload) -> None:
    blob = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    atomic_write_bytes(path, blob.encode("utf-8"))


class CacheStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, stage: str, key: str) -> Path:
        if stage not in STAGES:
            raise ValueError(f"unknown cache stage {stage!r}")
        return self.root / stage / f"{key}.json"

    def get(self, stage: str, key: str) -> Optional[dict]:
        path = self._path(stage, key)
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None

    def put(self, stage: str, key: str, payload: dict) -> None:
        atomic_write_json(self._path(stage, key), payload)

    def __contains__(self, stage_key: tuple[str, str]) -> bool:
        stage, key = stage_key
        return self._path(stage, key).exists()
