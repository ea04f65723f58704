"""Shared fixtures: a fully scripted 20-sample environment.

Expected accuracies are hand-computed from the scripted detector boxes and
choice replies below (frozen before the pipeline ran them):

    gt box [8, 8, 18, 18]; pred variants and their IoUs against it:
      identical        -> 1.0
      [8, 10, 18, 20]  -> 80/120  = 2/3
      [8, 13, 18, 23]  -> 50/150  = 1/3
      [13, 13, 23, 23] -> 25/175  = 1/7
      [30, 30, 40, 40] -> disjoint = 0

    full / no_tase ious: 10x1.0, 2/3, 1/3, 1/7, 1.0, 1/3, 0.0, 4x1.0
      Acc@0.25 = 18/20 = 90.00   Acc@0.5 = 16/20 = 80.00
    argmax (no_moos / detector_only) ious: 10x1.0, 0, 0, 1/7, 1.0, 1/3, 0, 4x1.0
      Acc@0.25 = 16/20 = 80.00   Acc@0.5 = 15/20 = 75.00
"""

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from markpick.config import DetectorSettings, MLLMSettings, PipelineConfig
from markpick.dataset import Box, load_manifest
from markpick.detector import Candidate, assign_marks, image_content_hash
from markpick.marker import MarkStyle, render
from markpick.mllm import build_moos_prompt, build_tase_prompt
from markpick.pipeline import build_backends

MODEL = "mock-mllm"
DETECTOR_ID = "mock-det"

GT = [8.0, 8.0, 18.0, 18.0]
TWO_THIRDS = [8.0, 10.0, 18.0, 20.0]
ONE_THIRD = [8.0, 13.0, 18.0, 23.0]
ONE_SEVENTH = [13.0, 13.0, 23.0, 23.0]
DECOY = [30.0, 30.0, 40.0, 40.0]

FULL_ACC = (90.0, 80.0)
ARGMAX_ACC = (80.0, 75.0)


@dataclass
class SamplePlan:
    sample_id: str
    expression: str
    tase_reply: str
    detect_subjects: tuple  # prompts the full variant will send
    boxes_by_subject: dict  # prompt -> [(box, score, label), ...]
    moos_reply: str | None
    expected_source_full: str
    expected_iou_full: float
    expected_iou_argmax: float
    gt: list = field(default_factory=lambda: list(GT))
    image_name: str | None = None


def _hit_plan(i: int) -> SamplePlan:
    expr = f"the striped block number {i:02d}"
    return SamplePlan(
        sample_id=f"s{i:02d}",
        expression=expr,
        tase_reply="block .",
        detect_subjects=("block",),
        boxes_by_subject={"block": [(GT, 0.9, "block"), (DECOY, 0.6, "block")]},
        moos_reply="[1]",
        expected_source_full="moos",
        expected_iou_full=1.0,
        expected_iou_argmax=1.0,
    )


def golden_plans() -> list[SamplePlan]:
    plans = [_hit_plan(1)]

    teddy_expr = "a teddy bear with a checkered design on one foot"
    plans.append(
        SamplePlan(
            sample_id="s02",
            expression=teddy_expr,
            tase_reply="teddy bear . checkered design .",
            detect_subjects=("teddy bear", "checkered design"),
            boxes_by_subject={
                "teddy bear": [(GT, 0.9, "teddy bear")],
                "checkered design": [(DECOY, 0.6, "checkered design")],
            },
            moos_reply="[1]",
            expected_source_full="moos",
            expected_iou_full=1.0,
            expected_iou_argmax=1.0,
        )
    )

    plant_expr = "the tall plant beside the window"
    plans.append(
        SamplePlan(
            sample_id="s03",
            expression=plant_expr,
            tase_reply="   ",  # empty extraction -> full-expression fallback
            detect_subjects=(plant_expr,),
            boxes_by_subject={plant_expr: [(GT, 0.9, "plant"), (DECOY, 0.6, "plant")]},
            moos_reply="[1]",
            expected_source_full="moos",
            expected_iou_full=1.0,
            expected_iou_argmax=1.0,
        )
    )

    plans += [_hit_plan(i) for i in range(4, 11)]

    def scripted(i, boxes, moos_reply, source, iou_full, iou_argmax):
        expr = f"the striped block number {i:02d}"
        return SamplePlan(
            sample_id=f"s{i:02d}",
            expression=expr,
            tase_reply="block .",
            detect_subjects=("block",),
            boxes_by_subject={"block": boxes},
            moos_reply=moos_reply,
            expected_source_full=source,
            expected_iou_full=iou_full,
            expected_iou_argmax=iou_argmax,
        )

    plans.append(
        scripted(11, [(DECOY, 0.9, "block"), (TWO_THIRDS, 0.6, "block")], "[2]", "moos", 2 / 3, 0.0)
    )
    plans.append(
        scripted(
            12, [(DECOY, 0.9, "block"), (ONE_THIRD, 0.6, "block")], "The choice is [2].", "moos", 1 / 3, 0.0
        )
    )
    plans.append(
        scripted(
            13,
            [(ONE_SEVENTH, 0.9, "block"), (DECOY, 0.6, "block")],
            "3",
            "argmax_score_fallback",
            1 / 7,
            1 / 7,
        )
    )
    plans.append(
        scripted(
            14, [(GT, 0.9, "block"), (DECOY, 0.6, "block")], "banana", "argmax_score_fallback", 1.0, 1.0
        )
    )
    plans.append(
        scripted(
            15,
            [(ONE_THIRD, 0.9, "block"), (DECOY, 0.6, "block")],
            "I cannot determine the target.",
            "argmax_score_fallback",
            1 / 3,
            1 / 3,
        )
    )
    plans.append(scripted(16, [], None, "no_candidates", 0.0, 0.0))
    plans += [_hit_plan(i) for i in range(17, 21)]
    assert len(plans) == 20
    return plans


def make_image(seed: int, size=(96, 72)) -> Image.Image:
    w, h = size
    arr = np.zeros((h, w, 3), dtype=np.uint8)
    arr[..., 0] = (37 * seed + 11) % 256
    arr[..., 1] = (91 * seed + 13) % 256
    arr[..., 2] = (53 * seed + 101) % 256
    arr[::8, :, :] = 240
    return Image.fromarray(arr)


@dataclass
class ScriptedEnv:
    root: Path
    image_root: Path
    manifest_path: Path
    config_path: Path
    detector_fixture_path: Path
    mllm_fixture_path: Path
    detector_fixtures: dict
    mllm_exact: dict
    plans: list

    def manifest(self):
        return load_manifest(self.manifest_path)

    def config(self, cache_dir, variant="full", **overrides) -> PipelineConfig:
        return PipelineConfig(
            mllm=MLLMSettings(model=MODEL, transport="mock", fixtures=str(self.mllm_fixture_path)),
            detector=DetectorSettings(
                backend_id=DETECTOR_ID, transport="mock", fixtures=str(self.detector_fixture_path)
            ),
            variant=variant,
            cache_dir=str(cache_dir),
            image_root=str(self.image_root),
            **overrides,
        )

    def backends(self, cfg):
        return build_backends(cfg)

    def plan_for(self, sample_id: str) -> SamplePlan:
        return next(p for p in self.plans if p.sample_id == sample_id)


def build_env(root: Path, plans: list[SamplePlan], split: str = "val") -> ScriptedEnv:
    images_dir = root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    detector_fixtures: dict = {}
    mllm_exact: dict = {}
    records = []

    for i, plan in enumerate(plans):
        name = plan.image_name or f"{plan.sample_id}.png"
        path = images_dir / name
        if not path.exists():
            make_image(i).save(path, format="PNG")
        data = path.read_bytes()
        ihash = image_content_hash(data)
        records.append(
            {
                "id": plan.sample_id,
                "image": f"images/{name}",
                "expression": plan.expression,
                "bbox": plan.gt,
                "dataset": "custom",
                "split": split,
            }
        )

        by_prompt = detector_fixtures.setdefault(ihash, {})
        merged: list[Candidate] = []
        for idx, phrase in enumerate(plan.detect_subjects, start=1):
            entries = plan.boxes_by_subject[phrase]
            by_prompt[phrase] = {
                "boxes": [list(b) for b, _, _ in entries],
                "scores": [s for _, s, _ in entries],
                "labels": [l for _, _, l in entries],
            }
            merged.extend(Candidate(Box.from_seq(b), s, l, idx) for b, s, l in entries)
        dset = assign_marks(merged)
        by_prompt[plan.expression.strip()] = {
            "boxes": [c.box.as_list() for c in dset.candidates],
            "scores": [c.score for c in dset.candidates],
            "labels": [c.label for c in dset.candidates],
        }

        request = build_tase_prompt(plan.expression, model_id=MODEL, temperature=0.0, max_tokens=256)
        mllm_exact[request.fingerprint()] = plan.tase_reply
        if plan.moos_reply is not None and dset.candidates:
            marked = render(Image.open(io.BytesIO(data)), dset, MarkStyle())
            request = build_moos_prompt(
                plan.expression,
                marked,
                len(dset.candidates),
                model_id=MODEL,
                temperature=0.0,
                max_tokens=256,
            )
            mllm_exact[request.fingerprint()] = plan.moos_reply

    manifest_path = root / "manifest.jsonl"
    manifest_path.write_text(
        "\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8"
    )
    detector_fixture_path = root / "detector_fixtures.json"
    detector_fixture_path.write_text(json.dumps(detector_fixtures), encoding="utf-8")
    mllm_fixture_path = root / "mllm_fixtures.json"
    mllm_fixture_path.write_text(json.dumps({"exact": mllm_exact}), encoding="utf-8")

    config_path = root / "config.toml"
    config_path.write_text(
        f"""\
[mllm]
model = "{MODEL}"
transport = "mock"
fixtures = "mllm_fixtures.json"

[detector]
id = "{DETECTOR_ID}"
transport = "mock"
fixtures = "detector_fixtures.json"

[pipeline]
variant = "full"
concurrency = 4
cache_dir = "cache"

[sampling]
ratio = 1.0
seed = 1234

[data]
image_root = "."

[data.manifests]
"custom:{split}" = "manifest.jsonl"
""",
        encoding="utf-8",
    )
    return ScriptedEnv(
        root=root,
        image_root=root,
        manifest_path=manifest_path,
        config_path=config_path,
        detector_fixture_path=detector_fixture_path,
        mllm_fixture_path=mllm_fixture_path,
        detector_fixtures=detector_fixtures,
        mllm_exact=mllm_exact,
        plans=plans,
    )


@pytest.fixture(scope="session")
def golden_env(tmp_path_factory) -> ScriptedEnv:
    return build_env(tmp_path_factory.mktemp("golden"), golden_plans())
