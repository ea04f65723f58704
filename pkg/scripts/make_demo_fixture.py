#!/usr/bin/env python3
"""Generate a self-contained offline demo: images, manifest, mock fixtures, config.

The scripted scenario makes the choice stage matter: in three of the eight
samples the decoy box outscores the true one, so `detector_only` picks wrong
while `full` recovers via the scripted choice reply.

    python3 scripts/make_demo_fixture.py demo/
    markpick run    --config demo/config.toml --split custom:val --out-dir demo/run_full
    markpick ablate --config demo/config.toml --split custom:val --out-dir demo/ablation
"""

import argparse
import io
import json
from pathlib import Path

import numpy as np
from PIL import Image

from markpick.dataset import Box
from markpick.detector import Candidate, assign_marks, image_content_hash
from markpick.marker import MarkStyle, render
from markpick.mllm import build_moos_prompt, build_tase_prompt

MODEL = "demo-mllm"
GT = [12.0, 12.0, 44.0, 44.0]
DECOY = [60.0, 30.0, 90.0, 60.0]


def make_image(seed, size=(128, 96)):
    w, h = size
    arr = np.zeros((h, w, 3), dtype=np.uint8)
    arr[..., 0] = (61 * seed + 23) % 256
    arr[..., 1] = (17 * seed + 71) % 256
    arr[..., 2] = (43 * seed + 5) % 256
    arr[:: 6 + seed % 3, :, :] = 235
    return Image.fromarray(arr)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir", type=Path)
    args = parser.parse_args()

    root = args.out_dir
    (root / "images").mkdir(parents=True, exist_ok=True)

    # (boxes in backend reply order, choice reply); None reply = empty detection
    scenarios = []
    scenarios += [([(GT, 0.9), (DECOY, 0.6)], "[1]")] * 4  # easy: argmax is right
    scenarios += [([(DECOY, 0.9), (GT, 0.6)], "[2]")] * 3  # tricky: choice recovers
    scenarios += [([], None)]  # nothing found

    detector_fixtures, mllm_exact, records = {}, {}, []
    for i, (boxes, choice) in enumerate(scenarios, start=1):
        expression = f"the textured square number {i}"
        path = root / "images" / f"d{i:02d}.png"
        make_image(i).save(path, format="PNG")
        data = path.read_bytes()
        records.append(
            {
                "id": f"d{i:02d}",
                "image": f"images/d{i:02d}.png",
                "expression": expression,
                "bbox": GT,
                "dataset": "custom",
                "split": "val",
            }
        )
        reply = {
            "boxes": [list(b) for b, _ in boxes],
            "scores": [s for _, s in boxes],
            "labels": ["object"] * len(boxes),
        }
        detector_fixtures[image_content_hash(data)] = {"object": reply, expression: reply}

        # decoding parameters must mirror the pipeline's (cfg.mllm defaults)
        request = build_tase_prompt(expression, model_id=MODEL, temperature=0.0, max_tokens=256)
        mllm_exact[request.fingerprint()] = "object ."
        if choice is not None:
            candidates = [Candidate(Box.from_seq(b), s, "object", 1) for b, s in boxes]
            dset = assign_marks(candidates)
            marked = render(Image.open(io.BytesIO(data)), dset, MarkStyle())
            request = build_moos_prompt(
                expression, marked, len(candidates), model_id=MODEL, temperature=0.0, max_tokens=256
            )
            mllm_exact[request.fingerprint()] = choice

    (root / "manifest.jsonl").write_text(
        "\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8"
    )
    (root / "detector_fixtures.json").write_text(json.dumps(detector_fixtures), encoding="utf-8")
    (root / "mllm_fixtures.json").write_text(json.dumps({"exact": mllm_exact}), encoding="utf-8")
    (root / "config.toml").write_text(
        f"""\
[mllm]
model = "{MODEL}"
transport = "mock"
fixtures = "mllm_fixtures.json"

[detector]
id = "demo-det"
transport = "mock"
fixtures = "detector_fixtures.json"

[pipeline]
variant = "full"
concurrency = 4
cache_dir = "cache"

[data]
image_root = "."

[data.manifests]
"custom:val" = "manifest.jsonl"
""",
        encoding="utf-8",
    )
    print(f"demo fixture with {len(records)} samples written to {root}")
    print(f"try: markpick ablate --config {root}/config.toml --split custom:val "
          f"--out-dir {root}/ablation")


if __name__ == "__main__":
    main()
