"""Command-line front end.

Subcommands: dataset, train-vae, train, gen, eval, ablate, scale-sweep,
bench. Exit code is nonzero whenever an invariant or precondition fails.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from .conditioning import PoseSpec
from .harness import (
    BenchmarkResult,
    Workspace,
    ablation_summary,
    benchmark,
    evaluate,
    run_ablation,
    run_scaling,
    scaling_summary,
    write_rows,
)
from .sampler import SampleConfig, generate
from .scenegen import build_dataset, load_image, load_manifest, save_image


def _log(msg: str) -> None:
    print(msg, flush=True)


def _load_config(path: str | None) -> cfgmod.RunConfig:
    if path:
        return cfgmod.load(path)
    cfg = cfgmod.RunConfig()
    cfg.validate()
    return cfg


def cmd_dataset(args) -> int:
    manifest = build_dataset(
        n_objects=args.objects,
        views_per_object=args.views,
        seed=args.seed,
        out_dir=args.out,
        eval_mode=args.eval,
        classic_cameras=args.classic_cameras,
    )
    _log(f"wrote {len(manifest.records)} views to {manifest.root}")
    return 0


def cmd_train_vae(args) -> int:
    cfg = _load_config(args.config)
    ws = Workspace(args.workspace)
    manifest = load_manifest(args.data) if args.data else ws.dataset(cfg, "train")
    vae = ws.frozen_vae(cfg, manifest, log=_log)
    if args.out:
        ckpt.save_vae(args.out, vae)
        _log(f"saved autoencoder to {args.out}")
    else:
        _log(f"autoencoder cached at {ws.vae_path(cfg, manifest)}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = cfgmod.replace(cfg, train={"seed": args.seed})
    if args.global_only:
        cfg = cfgmod.replace(cfg, model={"global_only": True})
    if args.cls_head_adaln:
        cfg = cfgmod.replace(cfg, model={"cls_head_adaln": True})
    ws = Workspace(args.workspace)
    report = ws.run(cfg, log=_log)
    rdir = ws.run_dir(cfg)
    _log(f"run dir: {rdir}")
    _log(
        f"eval PSNR {report.mean_psnr:.2f} dB (copy-input baseline {report.baseline_psnr:.2f} dB), "
        f"SSIM {report.mean_ssim:.4f}"
    )
    if args.out:
        import shutil

        shutil.copyfile(os.path.join(rdir, "model.avtx"), args.out)
        _log(f"copied checkpoint to {args.out}")
    return 0


def cmd_gen(args) -> int:
    model, vae = ckpt.load_model(args.checkpoint)
    image = load_image(args.input)
    pose = PoseSpec(
        elevation=math.radians(args.d_elev),
        azimuth=math.radians(args.d_azim),
        radius=args.d_radius,
    )
    cfg = SampleConfig(
        temperature=args.temperature,
        top_k=args.top_k,
        guidance=args.guidance,
        seed=args.seed,
    )
    out = generate(image, pose, model, vae, cfg).numpy()
    save_image(args.out, out)
    _log(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, vae = ckpt.load_model(args.checkpoint)
    manifest = load_manifest(args.data)
    cfg = SampleConfig(
        temperature=args.temperature, top_k=args.top_k, guidance=args.guidance, seed=args.seed
    )
    report = evaluate(model, vae, manifest, cfg, meta={"checkpoint": args.checkpoint})
    report.check_aggregates()
    if args.out:
        report.write(args.out)
    _log(
        f"eval PSNR {report.mean_psnr:.2f} dB / SSIM {report.mean_ssim:.4f} "
        f"(baseline {report.baseline_psnr:.2f} dB)"
    )
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    ws = Workspace(args.workspace)
    seeds = [int(s) for s in args.seeds.split(",")]
    reports = run_ablation(cfg, seeds, ws, log=_log)
    summary = ablation_summary(reports)
    if args.out:
        write_rows(args.out, summary)
    full = next(r for r in summary if r["arm"] == "full")
    ok = True
    for row in summary:
        _log(
            f"{row['arm']:>16}: PSNR {row['mean_psnr']:.2f} +/- {row['std_psnr']:.2f} dB "
            f"({row['repeats']} seeds)"
        )
        if row["arm"] != "full" and row["mean_psnr"] >= full["mean_psnr"]:
            ok = False
    if not ok:
        _log("ablation direction violated: an ablated arm matched or beat the full model")
        return 1
    return 0


def cmd_scale_sweep(args) -> int:
    cfg = _load_config(args.config)
    ws = Workspace(args.workspace)
    depths = [int(d) for d in args.depths.split(",") if d]
    fracs = [float(f) for f in args.fractions.split(",") if f]
    rows = run_scaling(cfg, depths, fracs, args.repeats, ws, log=_log)
    if args.out:
        write_rows(args.out, rows)
    for row in scaling_summary(rows):
        _log(
            f"depth {row['depth']} fraction {row['fraction']:.2f}: "
            f"PSNR {row['mean_psnr']:.2f} +/- {row['std_psnr']:.2f} dB"
        )
    return 0


def cmd_bench(args) -> int:
    model, vae = ckpt.load_model(args.checkpoint)
    if args.input:
        image = load_image(args.input)
    else:
        rng = np.random.default_rng(0)
        image = rng.uniform(0, 1, (model.config.image_size, model.config.image_size, 3)).astype(
            np.float32
        )
    pose = PoseSpec(0.3, 1.0, 0.2)
    res = benchmark(model, vae, image, pose, n_runs=args.runs)
    _log(json.dumps(res.__dict__, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nextview")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", help="render a procedural paired-view dataset")
    d.add_argument("--objects", type=int, required=True)
    d.add_argument("--views", type=int, required=True)
    d.add_argument("--seed", type=int, required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--eval", action="store_true")
    d.add_argument("--classic-cameras", action="store_true")
    d.set_defaults(fn=cmd_dataset)

    tv = sub.add_parser("train-vae", help="train (or fetch) the frozen autoencoder")
    tv.add_argument("--config")
    tv.add_argument("--data", help="existing dataset dir (default: build from config)")
    tv.add_argument("--workspace", default="workspace")
    tv.add_argument("--out")
    tv.set_defaults(fn=cmd_train_vae)

    t = sub.add_parser("train", help="train and evaluate a next-scale model")
    t.add_argument("--config")
    t.add_argument("--workspace", default="workspace")
    t.add_argument("--seed", type=int)
    t.add_argument("--global-only", action="store_true")
    t.add_argument("--cls-head-adaln", action="store_true")
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    g = sub.add_parser("gen", help="generate a novel view from one image")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--input", required=True)
    g.add_argument("--d-elev", type=float, required=True, help="relative elevation, degrees")
    g.add_argument("--d-azim", type=float, required=True, help="relative azimuth, degrees")
    g.add_argument("--d-radius", type=float, required=True, help="relative radius, scene units")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--guidance", type=float, default=2.0)
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--top-k", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    e = sub.add_parser("eval", help="run the 1-input/6-eval protocol")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="eval dataset dir")
    e.add_argument("--seed", type=int, default=1234)
    e.add_argument("--guidance", type=float, default=2.0)
    e.add_argument("--temperature", type=float, default=1.0)
    e.add_argument("--top-k", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="full vs global-only vs cls-head-AdaLN")
    a.add_argument("--config")
    a.add_argument("--workspace", default="workspace")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--out")
    a.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("scale-sweep", help="depth and data-fraction sweeps")
    s.add_argument("--config")
    s.add_argument("--workspace", default="workspace")
    s.add_argument("--depths", default="2,4")
    s.add_argument("--fractions", default="0.25,0.5,1.0")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_scale_sweep)

    b = sub.add_parser("bench", help="inference timing, cached vs uncached")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--input")
    b.add_argument("--runs", type=int, default=10)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
