"""Run reports: metric tables (markdown + CSV), ablation grids, run-dir rebuilds.

Everything here is a pure function of persisted run artifacts, so re-running
report generation over the same directories yields byte-identical output.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .dataset import SplitManifest, load_manifest
from .errors import MetricsError
from .metrics import EvalRecord, MetricsRow, aggregate, records_to_jsonl, round_half_up
from .pipeline import SampleResult, StageTrace


def fmt_pct(value: float) -> str:
    return f"{round_half_up(value):.2f}"


def fmt_delta(value: Optional[float]) -> str:
    if value is None:
        return "-"
    return f"+{value:.2f}" if value >= 0 else f"{value:.2f}"


def metrics_markdown(rows: Sequence[MetricsRow]) -> str:
    lines = [
        "| Method | Dataset | Split | N | Acc@0.25 | Acc@0.5 | Δ@0.25 | Δ@0.5 | Baseline |",
        "|---|---|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r.method} | {r.dataset} | {r.split} | {r.n} "
            f"| {fmt_pct(r.acc_025)} | {fmt_pct(r.acc_05)} "
            f"| {fmt_delta(r.delta_025)} | {fmt_delta(r.delta_05)} "
            f"| {r.baseline or '-'} |"
        )
    return "\n".join(lines) + "\n"


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        ["method", "dataset", "split", "n", "acc_025", "acc_05", "delta_025", "delta_05", "baseline"]
    )
    for r in rows:
        writer.writerow(
            [
                r.method,
                r.dataset,
                r.split,
                r.n,
                fmt_pct(r.acc_025),
                fmt_pct(r.acc_05),
                "" if r.delta_025 is None else f"{r.delta_025:.2f}",
                "" if r.delta_05 is None else f"{r.delta_05:.2f}",
                r.baseline or "",
            ]
        )
    return buf.getvalue()


_STAGE_MARKS = {
    # variant -> (subject extraction, detector, choice selection)
    "full": ("x", "x", "x"),
    "no_tase": ("", "x", "x"),
    "no_moos": ("x", "x", ""),
    "detector_only": ("", "x", ""),
}
VARIANT_ORDER = ("detector_only", "no_tase", "no_moos", "full")


def ablation_markdown(rows_by_variant: dict[str, MetricsRow]) -> str:
    lines = [
        "| Subject extraction | Detector | Choice selection | Acc@0.25 | Acc@0.5 |",
        "|---|---|---|---|---|",
    ]
    for variant in VARIANT_ORDER:
        if variant not in rows_by_variant:
            continue
        row = rows_by_variant[variant]
        s, d, m = _STAGE_MARKS[variant]
        lines.append(
            f"| {s or ' '} | {d or ' '} | {m or ' '} "
            f"| {fmt_pct(row.acc_025)} | {fmt_pct(row.acc_05)} |"
        )
    return "\n".join(lines) + "\n"


def ablation_csv(rows_by_variant: dict[str, MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["variant", "subject_extraction", "detector", "choice_selection", "acc_025", "acc_05"])
    for variant in VARIANT_ORDER:
        if variant not in rows_by_variant:
            continue
        row = rows_by_variant[variant]
        s, d, m = _STAGE_MARKS[variant]
        writer.writerow([variant, s, d, m, fmt_pct(row.acc_025), fmt_pct(row.acc_05)])
    return buf.getvalue()


@dataclass
class RunReport:
    """Everything cmd_run persists beyond the raw traces."""

    config: dict
    rows: list
    failures: list
    trace_dir: str
    viz_dir: Optional[str] = None
    wall_clock_s: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "rows": [row.__dict__ for row in self.rows],
            "failures": self.failures,
            "trace_dir": self.trace_dir,
            "viz_dir": self.viz_dir,
            "wall_clock_s": self.wall_clock_s,
        }


def summarize_results(
    results: Sequence[SampleResult], manifest: SplitManifest, method: str
) -> tuple[list[EvalRecord], MetricsRow, list[dict]]:
    """Split results into scored records and a failure summary."""
    failures = [
        {"id": r.sample_id, "error": r.error} for r in results if r.error is not None
    ]
    scored = [r for r in results if r.error is None]
    kept_ids = {r.sample_id for r in scored}
    kept_samples = tuple(s for s in manifest.samples if s.id in kept_ids)
    if not kept_samples:
        raise MetricsError("no successfully processed samples to score")
    sub_manifest = SplitManifest(
        manifest.dataset, manifest.split, kept_samples, manifest.source_checksum
    )
    records, row = aggregate([r.outcome for r in scored], sub_manifest, method=method)
    return records, row, failures


def write_run_report(
    run_dir: str | Path,
    results: Sequence[SampleResult],
    manifest: SplitManifest,
    cfg,
    wall_clock_s: float,
) -> RunReport:
    from dataclasses import asdict

    run_dir = Path(run_dir)
    records, row, failures = summarize_results(results, manifest, cfg.method_label())
    (run_dir / "evals.jsonl").write_text(records_to_jsonl(records), encoding="utf-8")
    report = RunReport(
        config=asdict(cfg),
        rows=[row],
        failures=failures,
        trace_dir=str(run_dir / "traces"),
        wall_clock_s=wall_clock_s,
    )
    (run_dir / "report.json").write_text(
        json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (run_dir / "report.md").write_text(metrics_markdown([row]), encoding="utf-8")
    return report


def load_traces(run_dir: str | Path) -> dict[str, StageTrace]:
    traces = {}
    for path in sorted((Path(run_dir) / "traces").glob("*.json")):
        data = json.loads(path.read_text(encoding="utf-8"))
        trace = StageTrace.from_json_dict(data)
        traces[trace.sample_id] = trace
    return traces


def recompute_run(run_dir: str | Path) -> tuple[list[EvalRecord], MetricsRow]:
    """Rebuild eval records and the table row purely from persisted traces."""
    run_dir = Path(run_dir)
    run_manifest = json.loads((run_dir / "run_manifest.json").read_text(encoding="utf-8"))
    manifest = load_manifest(run_dir / "manifest.jsonl")
    traces = load_traces(run_dir)

    ordered: list[SampleResult] = []
    for sample in manifest.samples:
        trace = traces.get(sample.id)
        if trace is None:
            raise MetricsError(f"run dir {run_dir} has no trace for sample {sample.id!r}")
        if trace.error is not None:
            ordered.append(SampleResult(sample.id, None, trace, error=trace.error))
        else:
            ordered.append(SampleResult(sample.id, trace.to_outcome(), trace))
    records, row, _ = summarize_results(ordered, manifest, run_manifest["method"])
    return records, row
