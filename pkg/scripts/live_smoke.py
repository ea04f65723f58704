#!/usr/bin/env python3
"""Optional live smoke run (not CI): direction-only improvement check.

Runs `detector_only` and then `full` over a seeded subsample of a real split
against live endpoints, and checks that the full pipeline's Acc@0.5 exceeds
the bare-detector baseline on the same samples. No tolerance is claimed;
this only mirrors the expected sign of the improvement.

Requires a config whose [mllm] and [detector] sections point at real
endpoints (bearer token via the env var named in mllm.api_key_env).

    python3 scripts/live_smoke.py --config live.toml --split refcocog:val \\
        --out-dir smoke/ --n 50 --seed 1234
"""

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

from markpick.config import load_config
from markpick.dataset import load_manifest, manifest_from_samples, uniform_sample
from markpick.metrics import aggregate, delta
from markpick.pipeline import build_backends, run_split


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", required=True)
    parser.add_argument("--split", required=True)
    parser.add_argument("--out-dir", required=True, type=Path)
    parser.add_argument("--n", type=int, default=50)
    parser.add_argument("--seed", type=int, default=1234)
    args = parser.parse_args()

    cfg = load_config(args.config)
    manifest = load_manifest(cfg.manifests[args.split])
    ratio = min(1.0, args.n / len(manifest))
    subset = uniform_sample(manifest, ratio, args.seed)
    subset = manifest_from_samples(subset.samples[: args.n], subset.source_checksum)
    print(f"{len(subset)} samples from {args.split}")

    rows = {}
    for variant in ("detector_only", "full"):
        run_cfg = replace(cfg, variant=variant)
        backends = build_backends(run_cfg)
        started = time.monotonic()
        results = run_split(subset, run_cfg, backends, run_dir=args.out_dir / variant)
        scored = [r for r in results if r.error is None]
        kept = manifest_from_samples(
            tuple(s for s in subset.samples if s.id in {r.sample_id for r in scored}),
            subset.source_checksum,
        )
        _, row = aggregate([r.outcome for r in scored], kept, method=variant)
        rows[variant] = row
        print(
            f"{variant}: Acc@0.25={row.acc_025:.2f} Acc@0.5={row.acc_05:.2f} "
            f"({len(scored)}/{len(results)} scored, {time.monotonic() - started:.0f}s)"
        )

    gain = delta(rows["full"].acc_05, rows["detector_only"].acc_05)
    print(f"Acc@0.5 delta (full - detector_only): {gain:+.2f}")
    if gain <= 0:
        print("direction check FAILED: full variant did not beat the bare detector")
        return 1
    print("direction check passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
