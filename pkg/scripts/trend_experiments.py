#!/usr/bin/env python3
"""Ablation arms and scaling sweeps with mean +/- sd summaries.

Runs (or reuses) every arm of the conditioning ablation and the depth /
data-fraction sweeps, then prints the summary tables and writes them as
line-delimited records.

Usage:
    python3 scripts/trend_experiments.py --workspace ws --seeds 0,1,2 \
        --depths 2,4 --fractions 0.25,0.5,1.0 --out-dir reports
"""

import argparse
import os
import sys
import time

from nextview import config as cfgmod
from nextview.harness import (
    Workspace,
    ablation_summary,
    run_ablation,
    run_scaling,
    scaling_summary,
    write_rows,
)


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--workspace", default="workspace")
    ap.add_argument("--config")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--depths", default="2,4")
    ap.add_argument("--fractions", default="0.25,0.5,1.0")
    ap.add_argument("--out-dir", default="reports")
    args = ap.parse_args()

    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    seeds = [int(s) for s in args.seeds.split(",")]
    depths = [int(d) for d in args.depths.split(",") if d]
    fractions = [float(f) for f in args.fractions.split(",") if f]

    t0 = time.time()
    log = lambda s: print(f"[{time.time()-t0:7.0f}s] {s}", flush=True)
    ws = Workspace(args.workspace)
    os.makedirs(args.out_dir, exist_ok=True)

    log("== conditioning ablation ==")
    arms = run_ablation(cfg, seeds, ws, log=log)
    arm_rows = ablation_summary(arms)
    write_rows(os.path.join(args.out_dir, "ablation.jsonl"), arm_rows)
    for row in arm_rows:
        log(
            f"{row['arm']:>16}: {row['mean_psnr']:6.2f} +/- {row['std_psnr']:.2f} dB "
            f"({row['repeats']} seeds)"
        )

    log("== scaling sweeps ==")
    rows = run_scaling(cfg, depths, fractions, len(seeds), ws, seeds=seeds, log=log)
    write_rows(os.path.join(args.out_dir, "scaling.jsonl"), rows)
    for row in scaling_summary(rows):
        log(
            f"depth {row['depth']} fraction {row['fraction']:.2f}: "
            f"{row['mean_psnr']:6.2f} +/- {row['std_psnr']:.2f} dB"
        )
    log(f"reports in {args.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
