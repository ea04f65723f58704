"""Command-line surface.

Subcommands: run, ablate, report, visualize, sample, convert.
Exit codes: 0 ok, 2 usage/config error, 3 failure-ceiling breach,
4 backend outage.
"""

from __future__ import annotations

import argparse
import io
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from PIL import Image

from .config import VARIANT_NAMES, PipelineConfig, apply_overrides, load_config
from .dataset import (
    Box,
    QuerySample,
    dump_manifest,
    load_manifest,
    manifest_from_samples,
    resolve_image_path,
    split_stats,
    uniform_sample,
)
from .detector import Candidate, DetectionSet, HTTPDetectorBackend
from .errors import (
    BackendError,
    ConfigError,
    FailureCeilingError,
    ManifestError,
    MarkpickError,
    MetricsError,
)
from .marker import MarkStyle, overlay_boxes, render
from .metrics import MetricsRow, MetricsTable
from .pipeline import Backends, build_backends, run_split
from .report import (
    ablation_csv,
    ablation_markdown,
    load_traces,
    metrics_csv,
    metrics_markdown,
    recompute_run,
    write_run_report,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CEILING = 3
EXIT_BACKEND = 4

GT_COLOR = (46, 204, 113)
PRED_COLOR = (231, 76, 60)


def _err(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def _load_run_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    return apply_overrides(
        cfg,
        variant=getattr(args, "variant", None),
        sampling_seed=getattr(args, "seed", None),
        sampling_ratio=getattr(args, "ratio", None),
        concurrency=getattr(args, "concurrency", None),
        cache_dir=getattr(args, "cache_dir", None),
    )


def _manifest_for_split(cfg: PipelineConfig, split: str):
    path = cfg.manifests.get(split)
    if path is None:
        raise ConfigError(
            f"no manifest configured for split {split!r}; "
            f"known: {sorted(cfg.manifests) or 'none'}"
        )
    manifest = load_manifest(path)
    if cfg.sampling_ratio < 1.0:
        manifest = uniform_sample(manifest, cfg.sampling_ratio, cfg.sampling_seed)
    return manifest


def _probe_detector(backends: Backends) -> None:
    if isinstance(backends.detector_backend, HTTPDetectorBackend):
        backends.detector_backend.health()


def cmd_run(args) -> int:
    try:
        cfg = _load_run_config(args)
        manifest = _manifest_for_split(cfg, args.split)
    except (ConfigError, ManifestError, OSError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    try:
        backends = build_backends(cfg)
        _probe_detector(backends)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except BackendError as exc:
        _err(f"detector backend unavailable: {exc}")
        return EXIT_BACKEND

    out_dir = Path(args.out_dir)
    started = time.monotonic()
    code = EXIT_OK
    try:
        results = run_split(manifest, cfg, backends, run_dir=out_dir)
    except FailureCeilingError as exc:
        _err(str(exc))
        results = exc.results
        code = EXIT_CEILING
    wall = time.monotonic() - started
    try:
        report = write_run_report(out_dir, results, manifest, cfg, wall)
    except MetricsError as exc:
        _err(f"nothing to score: {exc}")
        return EXIT_CEILING if code == EXIT_OK else code
    print(metrics_markdown(report.rows), end="")
    if report.failures:
        print(f"{len(report.failures)} sample(s) failed; see report.json", file=sys.stderr)
    print(f"run written to {out_dir}")
    return code


def cmd_ablate(args) -> int:
    try:
        cfg = _load_run_config(args)
        manifest = _manifest_for_split(cfg, args.split)
    except (ConfigError, ManifestError, OSError) as exc:
        _err(str(exc))
        return EXIT_CONFIG

    out_dir = Path(args.out_dir)
    rows_by_variant: dict[str, MetricsRow] = {}
    for variant in VARIANT_NAMES:
        variant_cfg = replace(cfg, variant=variant)
        try:
            backends = build_backends(variant_cfg)
            _probe_detector(backends)
        except ConfigError as exc:
            _err(str(exc))
            return EXIT_CONFIG
        except BackendError as exc:
            _err(f"detector backend unavailable: {exc}")
            return EXIT_BACKEND
        run_dir = out_dir / variant
        started = time.monotonic()
        try:
            results = run_split(manifest, variant_cfg, backends, run_dir=run_dir)
        except FailureCeilingError as exc:
            _err(f"{variant}: {exc}")
            return EXIT_CEILING
        report = write_run_report(
            run_dir, results, manifest, variant_cfg, time.monotonic() - started
        )
        rows_by_variant[variant] = report.rows[0]

    grid_md = ablation_markdown(rows_by_variant)
    (out_dir / "ablation.md").write_text(grid_md, encoding="utf-8")
    (out_dir / "ablation.csv").write_text(ablation_csv(rows_by_variant), encoding="utf-8")
    print(grid_md, end="")
    print(f"ablation grid written to {out_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dirs = [Path(d) for d in args.runs]
    baseline_dir = Path(args.baseline) if args.baseline else run_dirs[0]
    ordered = [baseline_dir] + [d for d in run_dirs if d != baseline_dir]
    try:
        computed = {str(d): recompute_run(d) for d in ordered}
    except (OSError, MarkpickError, json.JSONDecodeError) as exc:
        _err(f"cannot rebuild run dir: {exc}")
        return EXIT_CONFIG

    baseline_row = computed[str(baseline_dir)][1]
    table = MetricsTable()
    table.add(baseline_row)
    for d in ordered[1:]:
        row = computed[str(d)][1]
        if (row.dataset, row.split) != (baseline_row.dataset, baseline_row.split):
            _err(
                f"incompatible splits: {row.dataset}:{row.split} vs "
                f"{baseline_row.dataset}:{baseline_row.split}"
            )
            return EXIT_CONFIG
        table.add(row.with_delta(baseline_row))
    rows = table.rows

    md = metrics_markdown(rows)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.md").write_text(md, encoding="utf-8")
    (out_dir / "report.csv").write_text(metrics_csv(rows), encoding="utf-8")
    print(md, end="")
    return EXIT_OK


def _style_from_snapshot(style_dict) -> MarkStyle:
    if not style_dict:
        return MarkStyle()
    return MarkStyle(
        palette=tuple(tuple(c) for c in style_dict["palette"]),
        outline_width=style_dict["outline_width"],
        badge_divisor=style_dict["badge_divisor"],
        badge_min_px=style_dict["badge_min_px"],
        badge_fill=tuple(style_dict["badge_fill"]),
        glyph_color=tuple(style_dict["glyph_color"]),
    )


def _rebuild_detections(trace) -> DetectionSet:
    candidates = tuple(
        Candidate(
            box=Box.from_seq(c["box"]),
            score=c["score"],
            label=c["label"],
            subject_index=c["subject_index"],
        )
        for c in trace.candidates
    )
    return DetectionSet(candidates=candidates, dropped_degenerate=trace.dropped_degenerate)


def cmd_visualize(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        run_manifest = json.loads((run_dir / "run_manifest.json").read_text(encoding="utf-8"))
        manifest = load_manifest(run_dir / "manifest.jsonl")
        traces = load_traces(run_dir)
    except (OSError, MarkpickError, json.JSONDecodeError) as exc:
        _err(f"cannot load run dir {run_dir}: {exc}")
        return EXIT_CONFIG

    cfg_dict = run_manifest["config"]
    style_cfg = _style_from_snapshot(cfg_dict.get("style"))

    ids = args.ids.split(",") if args.ids else list(traces)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_root = cfg_dict.get("image_root", ".")

    for sample_id in ids:
        if sample_id not in traces:
            _err(
                f"unknown sample id {sample_id!r}; available: "
                f"{', '.join(sorted(traces))}"
            )
            return EXIT_CONFIG
        trace = traces[sample_id]
        sample = manifest.sample_by_id(sample_id)
        image = Image.open(
            io.BytesIO(Path(resolve_image_path(sample, image_root)).read_bytes())
        )

        caption = [f"expression: {trace.expression}"]
        if trace.subjects:
            caption.append(f"subjects: {list(trace.subjects)}")
        if trace.candidates:
            marked = render(image, _rebuild_detections(trace), style_cfg)
            (out_dir / f"{sample_id}_marked.png").write_bytes(marked.image_png)
        overlays = [(sample.gt_box, GT_COLOR)]
        if trace.predicted_box is not None:
            overlays.append((Box.from_seq(trace.predicted_box), PRED_COLOR))
            caption.append(f"chosen mark: {trace.chosen_mark}")
            caption.append(f"selection source: {trace.outcome_source}")
        else:
            caption.append("no candidates: scored as a miss (ground truth shown alone)")
        (out_dir / f"{sample_id}_overlay.png").write_bytes(
            overlay_boxes(image, overlays, outline_width=style_cfg.outline_width)
        )
        (out_dir / f"{sample_id}.txt").write_text("\n".join(caption) + "\n", encoding="utf-8")
    print(f"visualizations written to {out_dir}")
    return EXIT_OK


def cmd_sample(args) -> int:
    try:
        manifest = load_manifest(args.manifest)
        sampled = uniform_sample(manifest, args.ratio, args.seed)
    except (MarkpickError, OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    dump_manifest(sampled, args.out)
    stats = split_stats(sampled)
    print(
        f"wrote {stats['count']} of {len(manifest)} records to {args.out} "
        f"(ratio={args.ratio}, seed={args.seed}, "
        f"mean expression words={stats['mean_expression_words']:.2f})"
    )
    return EXIT_OK


_ID_FIELDS = ("id", "question_id", "sample_id")
_IMAGE_FIELDS = ("image", "file_name", "image_path", "img")
_EXPR_FIELDS = ("expression", "sentence", "text", "query", "caption")


def _pick_field(record: dict, names, kind: str, index: int):
    for name in names:
        if name in record:
            return record[name]
    raise ManifestError(f"record {index}: no {kind} field (tried {names})")


def cmd_convert(args) -> int:
    path = Path(args.input)
    try:
        text = path.read_text(encoding="utf-8")
        if text.lstrip().startswith("["):
            records = json.loads(text)
        else:
            records = [json.loads(line) for line in text.splitlines() if line.strip()]
        samples = []
        for i, record in enumerate(records):
            bbox = record["bbox"]
            if args.bbox_format == "xywh":
                x, y, w, h = bbox
                bbox = [x, y, x + w, y + h]
            samples.append(
                QuerySample(
                    id=str(_pick_field(record, _ID_FIELDS, "id", i)),
                    image_path=str(_pick_field(record, _IMAGE_FIELDS, "image", i)),
                    expression=str(_pick_field(record, _EXPR_FIELDS, "expression", i)),
                    gt_box=Box.from_seq(bbox),
                    dataset=args.dataset,
                    split=args.split,
                )
            )
        manifest = manifest_from_samples(samples)
    except (MarkpickError, OSError, ValueError, KeyError) as exc:
        _err(f"cannot convert {path}: {exc}")
        return EXIT_CONFIG
    dump_manifest(manifest, args.out)
    print(f"wrote {len(samples)} canonical records to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="markpick",
        description="Mark-and-pick detection harness: run pipelines, score, ablate, visualize.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--config", required=True, help="TOML config file")
        p.add_argument("--split", required=True, help="dataset:split key from [data.manifests]")
        p.add_argument("--seed", type=int, default=None, help="override sampling seed")
        p.add_argument("--ratio", type=float, default=None, help="override sampling ratio")
        p.add_argument("--concurrency", type=int, default=None)
        p.add_argument("--cache-dir", dest="cache_dir", default=None)
        p.add_argument("--out-dir", dest="out_dir", required=True)

    p_run = sub.add_parser("run", help="run one pipeline variant over a split")
    add_run_flags(p_run)
    p_run.add_argument("--variant", choices=VARIANT_NAMES, default=None)
    p_run.set_defaults(func=cmd_run)

    p_ablate = sub.add_parser("ablate", help="run all four variants and emit the stage grid")
    add_run_flags(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_report = sub.add_parser("report", help="merge run dirs and compute deltas vs a baseline")
    p_report.add_argument("runs", nargs="+", help="run directories")
    p_report.add_argument("--baseline", default=None, help="baseline run directory")
    p_report.add_argument("--out-dir", dest="out_dir", required=True)
    p_report.set_defaults(func=cmd_report)

    p_viz = sub.add_parser("visualize", help="export marked images and gt/pred overlays")
    p_viz.add_argument("--run-dir", dest="run_dir", required=True)
    p_viz.add_argument("--ids", default=None, help="comma-separated sample ids (default: all)")
    p_viz.add_argument("--out-dir", dest="out_dir", required=True)
    p_viz.set_defaults(func=cmd_visualize)

    p_sample = sub.add_parser("sample", help="materialize a seeded uniform subsample")
    p_sample.add_argument("--manifest", required=True)
    p_sample.add_argument("--out", required=True)
    p_sample.add_argument("--ratio", type=float, default=0.1)
    p_sample.add_argument("--seed", type=int, default=1234)
    p_sample.set_defaults(func=cmd_sample)

    p_convert = sub.add_parser("convert", help="canonicalize third-party records to JSONL")
    p_convert.add_argument("--input", required=True, help="JSON array or JSONL file")
    p_convert.add_argument("--out", required=True)
    p_convert.add_argument("--dataset", default="custom")
    p_convert.add_argument("--split", default="val")
    p_convert.add_argument("--bbox-format", choices=("xyxy", "xywh"), default="xyxy")
    p_convert.set_defaults(func=cmd_convert)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors already; normalize other codes
        return EXIT_CONFIG if exc.code not in (0,) else 0
    return args.func(args)


def entrypoint() -> None:
    sys.exit(main())
