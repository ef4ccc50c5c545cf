#!/usr/bin/env python3
"""End-to-end desk run: dataset -> frozen autoencoder -> model -> evaluation.

Everything lands in a content-addressed workspace, so re-running with the
same configuration reuses finished artifacts.

Usage:
    python3 scripts/desk_run.py --workspace ws [--config cfg.txt] [--seed 0]
"""

import argparse
import sys
import time

from nextview import config as cfgmod
from nextview.harness import Workspace, load_images, vae_reconstruction_psnr


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--workspace", default="workspace")
    ap.add_argument("--config", help="flat key-value config file (default: desk defaults)")
    ap.add_argument("--seed", type=int, help="override train.seed")
    args = ap.parse_args()

    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    if args.seed is not None:
        cfg = cfgmod.replace(cfg, train={"seed": args.seed})
    cfg.validate()

    t0 = time.time()
    log = lambda s: print(f"[{time.time()-t0:7.0f}s] {s}", flush=True)
    ws = Workspace(args.workspace)

    log("datasets...")
    train_m = ws.dataset(cfg, "train")
    eval_m = ws.dataset(cfg, "eval")
    log(f"train {len(train_m.records)} views / eval {len(eval_m.records)} views")

    log("frozen autoencoder...")
    vae = ws.frozen_vae(cfg, train_m, log=log)
    recon = vae_reconstruction_psnr(vae, load_images(eval_m))
    log(f"held-out reconstruction: {recon:.2f} dB")

    log("model training + evaluation...")
    rep = ws.run(cfg, log=log)
    log(
        f"eval PSNR {rep.mean_psnr:.2f} dB, SSIM {rep.mean_ssim:.4f} "
        f"(copy-input baseline {rep.baseline_psnr:.2f} dB)"
    )
    log(f"run dir: {ws.run_dir(cfg)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
