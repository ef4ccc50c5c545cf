"""Acceptance suite: one test per criterion, pass/fail printed per line.

Criteria 7-11 train real models; they share a content-addressed workspace
(default: .acceptance-ws at the repo root, override via NEXTVIEW_ACCEPTANCE_WS)
so re-runs reuse finished runs instead of retraining. A fresh checkout runs
everything in a few hours on two cores.
"""

import math
import os
import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from nextview import config as cfgmod
from nextview.conditioning import PoseSpec, pose_features
from nextview.config import RunConfig
from nextview.harness import (
    Workspace,
    ablation_summary,
    evaluate,
    load_images,
    prepare_training_data,
    run_ablation,
    run_scaling,
    scaling_summary,
    train_model,
    vae_reconstruction_psnr,
)
from nextview.numerics import AdamW, Rng, grad_check
from nextview.sampler import SampleConfig, cfg_combine, generate, generate_uncached
from nextview.tokenizer import MultiScaleVQVAE, ScaleSchedule, TokenPyramid, quantize
from nextview.transformer import ModelConfig, NextScaleModel, build_layout, build_mask, train_step

ACCEPT_WS = os.environ.get(
    "NEXTVIEW_ACCEPTANCE_WS",
    os.path.join(os.path.dirname(__file__), "..", ".acceptance-ws"),
)


def report(n: int, detail: str) -> None:
    print(f"\n[acceptance] criterion {n}: PASS — {detail}")


# ---------------------------------------------------------------------------
# 1. Quantizer oracle
# ---------------------------------------------------------------------------


def test_criterion_1_quantizer_oracle():
    """1,000 random maps/codebooks: exact match with an exhaustive scan."""
    t0 = time.perf_counter()
    rng = Rng(20_001)
    mismatches = 0
    tie_cases = 0
    for trial in range(1000):
        r = rng.child(trial)
        v = int(r.integers(2, 65))
        c = int(r.integers(2, 17))
        h = int(r.integers(1, 9))
        w = int(r.integers(1, 9))
        # sixteenth-grid values make every distance exact in float32, so
        # exact ties occur and the scan is bit-for-bit decisive
        cb = (r.integers(0, 17, (v, c)) / 16.0).astype(np.float32)
        fm = (r.integers(0, 17, (h, w, c)) / 16.0).astype(np.float32)
        if trial % 5 == 0 and v >= 4:
            cb[v // 2] = cb[0]  # duplicate entry: forces exact ties
        got = quantize(torch.from_numpy(fm), torch.from_numpy(cb)).reshape(-1).numpy()

        cells = fm.reshape(-1, c)
        dists = np.stack([((cells - cb[i]) ** 2).sum(axis=1) for i in range(v)], axis=1)
        want = np.argmin(dists, axis=1)  # numpy argmin takes the first minimum
        ties = (dists == dists.min(axis=1, keepdims=True)).sum(axis=1) > 1
        tie_cases += int(ties.sum())
        mismatches += int((got != want).sum())
    elapsed = time.perf_counter() - t0
    assert mismatches == 0
    assert tie_cases > 0, "tie-break rule was never exercised"
    assert elapsed < 10.0, f"criterion 1 took {elapsed:.1f}s (limit 10s)"
    report(1, f"1000 maps exact, {tie_cases} tie cells broken low, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. Mask correctness + runtime causality
# ---------------------------------------------------------------------------


def test_criterion_2_mask_and_causality():
    t0 = time.perf_counter()
    schedules = [(1, 2), (1, 2, 3), (1, 2, 3, 4), (1, 2, 3, 4, 5), (1, 2, 3, 4, 5, 6)]
    for sides in schedules:
        lay = build_layout(ScaleSchedule(sides))
        mask = build_mask(lay)
        for q in range(lay.total_len):
            for k in range(lay.total_len):
                q_cond = q < lay.cond_len
                k_cond = k < lay.cond_len
                if q_cond:
                    want = k_cond
                elif k_cond:
                    want = True
                else:
                    want = lay.scale_ids[k] <= lay.scale_ids[q]
                assert bool(mask[q, k]) == want, f"{sides}: ({q},{k})"

    # runtime perturbation: scale-k logits bit-invariant to later-scale inputs
    for sides in [(1, 2, 3), (1, 2, 3, 4, 5, 6)]:
        cfg = ModelConfig(depth=1, vocab=16, code_dim=8, d_sem=16, image_size=8 * sides[-1],
                          schedule=ScaleSchedule(sides))
        model = NextScaleModel(cfg, Rng(7))
        g = Rng(8).torch_gen()
        for blk in model.blocks:
            blk.ada.weight.data.normal_(0, 0.05, generator=g)
        model.head.weight.data.normal_(0, 0.05, generator=g)
        lay = model.layout
        gen_ = torch.randn(1, lay.gen_len - 1, 8, generator=g)
        cond = torch.randn(1, lay.cond_len, 8, generator=g)
        start = torch.randn(1, cfg.width, generator=g)
        base = model(cond, start, gen_)
        for scale in range(1, len(sides)):
            gs, ge = lay.gen_spans[scale]
            pert = gen_.clone()
            pert[:, gs - lay.cond_len - 1 : ge - lay.cond_len - 1] += 2.0
            out = model(cond, start, pert)
            upto = gs - lay.cond_len
            assert torch.equal(out[:, :upto], base[:, :upto]), f"{sides} scale {scale}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0, f"criterion 2 took {elapsed:.1f}s (limit 30s)"
    report(2, f"mask oracle + bit-exact causality on {len(schedules)} schedules, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. Gradient check of the full training loss (float64)
# ---------------------------------------------------------------------------


def test_criterion_3_gradient_check():
    t0 = time.perf_counter()
    sched = ScaleSchedule((1, 2))
    vae = MultiScaleVQVAE(sched, image_size=16, embed_dim=8, vocab=32, width=32,
                          res_blocks=1, rng=Rng(30)).double()
    for p in vae.parameters():
        p.requires_grad_(False)
    cfg = ModelConfig(depth=1, vocab=32, code_dim=8, d_sem=16, image_size=16, schedule=sched)
    model = NextScaleModel(cfg, Rng(31)).double()
    assert cfg.width == 64

    g = Rng(32).torch_gen()
    images = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    feats = torch.randn(2, 4, generator=g, dtype=torch.float64)
    with torch.no_grad():
        pyr_t = vae.tokenize_bchw(vae.encode_bchw(images))
        cond_tokens = pyr_t.flatten()

    def loss_fn():
        emb = model.global_embedder
        h = emb.posed(emb.encoder(images), feats)
        # sample 1 runs fully conditioned, sample 2 runs the null lanes so
        # every conditioning parameter joins the loss
        h = torch.stack([h[0], emb.null_sem])
        start = emb.project(h)
        cond = model.local.embed(cond_tokens, vae.codebook)
        cond = torch.stack([cond[0], model.local.null_sequence(1, cond.shape[1])[0].double()])
        gen_inputs = model.teacher_gen_inputs(vae, pyr_t)
        logits = model(cond, start, gen_inputs)
        from nextview.transformer import sequence_loss

        return sequence_loss(logits, pyr_t)

    params = [p for p in model.parameters() if p.requires_grad]
    err = grad_check(loss_fn, params, eps=1e-5, coords_per_param=4, rng=Rng(33))
    elapsed = time.perf_counter() - t0
    assert err < 1e-4, f"max relative gradient error {err}"
    assert elapsed < 300.0, f"criterion 3 took {elapsed:.0f}s (limit 5 min)"
    report(3, f"max rel grad err {err:.2e} over {len(params)} tensors, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 4. Identity-init pose invariance
# ---------------------------------------------------------------------------


def test_criterion_4_identity_init_invariance():
    from nextview.conditioning import GlobalEmbedder

    emb = GlobalEmbedder(d_sem=128, width=256, image_size=32, rng=Rng(40))
    img = torch.rand(1, 3, 32, 32, generator=Rng(41).torch_gen())
    rng = Rng(42)
    ref = None
    for i in range(100):
        pose = PoseSpec(
            float(rng.uniform(-1.3, 1.3)),
            float(rng.uniform(0, 2 * math.pi)),
            float(rng.uniform(-1, 1)),
        )
        out = emb(img, pose_features(pose).unsqueeze(0))
        if ref is None:
            ref = out
        else:
            assert torch.equal(out, ref), f"pose {i} broke bit-exact invariance"
    report(4, "100 random poses, bit-identical start tokens before training")


# ---------------------------------------------------------------------------
# 5. KV-cache equivalence and speed
# ---------------------------------------------------------------------------


def test_criterion_5_kv_cache_equivalence():
    sched = ScaleSchedule((1, 2, 3, 4, 5, 6, 8))
    vae = MultiScaleVQVAE(sched, image_size=64, embed_dim=16, vocab=64, width=32,
                          res_blocks=1, rng=Rng(50))
    cfg = ModelConfig(depth=2, vocab=64, code_dim=16, d_sem=32, image_size=64, schedule=sched)
    model = NextScaleModel(cfg, Rng(51))
    g = Rng(52).torch_gen()
    for blk in model.blocks:
        blk.ada.weight.data.normal_(0, 0.05, generator=g)
    model.head.weight.data.normal_(0, 0.05, generator=g)
    for p in list(model.parameters()) + list(vae.parameters()):
        p.requires_grad_(False)
    img = Rng(53).uniform(size=(64, 64, 3)).astype(np.float32)
    pose = PoseSpec(0.5, 1.2, 0.3)

    worst = 0.0
    for seed in range(5):
        sc = SampleConfig(seed=seed)
        out_c, sess = generate(img, pose, model, vae, sc, collect=True)
        out_u, pyr, logits_u = generate_uncached(img, pose, model, vae, sc, collect=True)
        for a, b in zip(sess.grids, pyr.grids):
            assert torch.equal(a, b), f"seed {seed}: token sequences differ"
        for la, lb in zip(sess.scale_logits, logits_u):
            worst = max(worst, float((la - lb).abs().max()))
        assert torch.equal(out_c, out_u)
    assert worst <= 1e-5, f"per-scale logits diverged by {worst}"

    def clock(fn, n=3):
        best = math.inf
        for i in range(n):
            t0 = time.perf_counter()
            fn(SampleConfig(seed=100 + i))
            best = min(best, time.perf_counter() - t0)
        return best

    generate(img, pose, model, vae, SampleConfig(seed=99))  # warm
    t_cached = clock(lambda sc: generate(img, pose, model, vae, sc))
    t_uncached = clock(lambda sc: generate_uncached(img, pose, model, vae, sc))
    speedup = t_uncached / t_cached
    assert speedup >= 1.5, f"cached speedup {speedup:.2f}x < 1.5x"
    report(5, f"5 seeds identical tokens, logit gap {worst:.1e}, cached {speedup:.1f}x faster")


# ---------------------------------------------------------------------------
# 6. CFG exactness
# ---------------------------------------------------------------------------


def test_criterion_6_cfg_exactness():
    g = Rng(60).torch_gen()
    l_cond = torch.randn(25, 512, generator=g) * 1e3
    l_uncond = torch.randn(25, 512, generator=g) * 1e3
    assert torch.equal(cfg_combine(l_cond, l_uncond, 1.0), l_cond)
    assert torch.equal(cfg_combine(l_cond, l_uncond, 0.0), l_uncond)
    report(6, "guidance scale 1 and 0 reproduce the lanes exactly")


# ---------------------------------------------------------------------------
# desk-scale shared fixture (criteria 7-11)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def desk():
    cfg = RunConfig()
    cfg.train.seed = 0
    cfg.validate()
    ws = Workspace(ACCEPT_WS)
    train_m = ws.dataset(cfg, "train")
    eval_m = ws.dataset(cfg, "eval")
    vae = ws.frozen_vae(cfg, train_m, log=lambda s: print(f"  [desk vae] {s}"))
    return SimpleNamespace(cfg=cfg, ws=ws, train_m=train_m, eval_m=eval_m, vae=vae)


def overfit_losses(vae, data, steps=500, seed=1234) -> list:
    cfg = ModelConfig(depth=2, vocab=vae.vocab, code_dim=vae.embed_dim,
                      schedule=vae.schedule, image_size=vae.image_size)
    model = NextScaleModel(cfg, Rng(seed))
    optim = AdamW(model.param_groups(0.0, 10.0), lr=1e-3)
    batch = {
        "images": data.images[[0]],
        "cond_tokens": data.cond_tokens[[0]],
        "target_pyramid": TokenPyramid([g[[1]] for g in data.pyramids]),
        "pose_feats": torch.tensor([[0.2, 0.5, 0.7, 0.1]]),
    }
    losses = []
    for step in range(steps):
        losses.append(train_step(batch, model, vae, optim, Rng(seed).child("s", step), 0.0, 0.0))
        if losses[-1] < 0.05 * math.log(cfg.vocab) and len(losses) >= 60:
            break
    return losses


@pytest.mark.slow
def test_criterion_7_overfit_sanity(desk):
    data = prepare_training_data(desk.train_m, desk.vae)
    losses = overfit_losses(desk.vae, data)
    ln_v = math.log(desk.vae.vocab)
    assert abs(losses[0] - ln_v) <= 0.1 * ln_v, f"initial loss {losses[0]} vs ln V {ln_v}"
    assert min(losses) < 0.1 * ln_v, f"min loss {min(losses):.3f} after {len(losses)} steps"
    assert len(losses) <= 500
    report(7, f"init loss {losses[0]:.3f}=lnV, below 0.1 lnV at step {len(losses)}")


@pytest.mark.slow
def test_criterion_8_desk_scale_training(desk):
    recon = vae_reconstruction_psnr(desk.vae, load_images(desk.eval_m))
    rep = desk.ws.run(desk.cfg, log=lambda s: print(f"  [desk run] {s}"))
    margin = rep.mean_psnr - rep.baseline_psnr
    elapsed = rep.meta.get("elapsed_seconds", 0.0)
    assert recon >= 25.0, f"frozen autoencoder reconstruction {recon:.2f} dB < 25 dB"
    assert margin >= 2.0, (
        f"eval {rep.mean_psnr:.2f} dB vs copy-input {rep.baseline_psnr:.2f} dB "
        f"(margin {margin:.2f} dB < 2 dB)"
    )
    assert elapsed < 4 * 3600, f"training run took {elapsed:.0f}s (limit 4h)"
    report(8, f"eval {rep.mean_psnr:.2f} dB vs baseline {rep.baseline_psnr:.2f} dB "
              f"(+{margin:.2f}), vae recon {recon:.2f} dB, {elapsed/60:.0f} min")


@pytest.mark.slow
def test_criterion_9_ablation_direction(desk):
    seeds = [0, 1, 2]
    reports = run_ablation(desk.cfg, seeds, desk.ws, log=lambda s: print(f"  [ablate] {s}"))
    summary = {row["arm"]: row for row in ablation_summary(reports)}
    full = summary["full"]["mean_psnr"]
    go = summary["global_only"]["mean_psnr"]
    ch = summary["cls_head_adaln"]["mean_psnr"]
    assert full - go >= 0.5, f"full {full:.2f} vs global-only {go:.2f}: margin < 0.5 dB"
    assert full - ch >= 0.5, f"full {full:.2f} vs cls-head-AdaLN {ch:.2f}: margin < 0.5 dB"
    report(9, f"full {full:.2f} dB > global-only {go:.2f} dB and cls-head-AdaLN {ch:.2f} dB "
              f"(3 seeds each)")


@pytest.mark.slow
def test_criterion_10_scaling_direction(desk):
    rows = run_scaling(desk.cfg, depths=[2, 4], fractions=[0.25, 0.5, 1.0], repeats=3,
                       workspace=desk.ws, seeds=[0, 1, 2],
                       log=lambda s: print(f"  [sweep] {s}"))
    summary = scaling_summary(rows)
    by_point = {(r["depth"], r["fraction"]): r for r in summary}
    assert all("std_psnr" in r for r in summary)  # +/- 1 sd reported per point
    f25 = by_point[(4, 0.25)]["mean_psnr"]
    f50 = by_point[(4, 0.5)]["mean_psnr"]
    f100 = by_point[(4, 1.0)]["mean_psnr"]
    d2 = by_point[(2, 1.0)]["mean_psnr"]
    assert f25 <= f50 <= f100, f"data scaling not monotone: {f25:.2f}, {f50:.2f}, {f100:.2f}"
    assert d2 <= f100, f"depth scaling not monotone: depth2 {d2:.2f} > depth4 {f100:.2f}"
    report(10, f"fractions {f25:.2f} <= {f50:.2f} <= {f100:.2f} dB; "
               f"depth2 {d2:.2f} <= depth4 {f100:.2f} dB (3 seeds, mean +/- sd)")


@pytest.mark.slow
def test_criterion_11_reproducibility(desk, tmp_path):
    # overfit pipeline (criterion 7), run twice: identical loss curves
    data = prepare_training_data(desk.train_m, desk.vae)
    a = overfit_losses(desk.vae, data, steps=80)
    b = overfit_losses(desk.vae, data, steps=80)
    assert a == b, "overfit loss curves differ between identical-seed runs"

    # criteria 8-10 pipelines at a reduced budget, twice, in fresh workspaces
    mini = RunConfig()
    mini.data.objects = 12
    mini.data.views = 4
    mini.data.eval_objects = 3
    mini.data.eval_views = 3
    mini.vae.epochs = 2
    mini.vae.batch = 16
    mini.train.steps = 10
    mini.train.batch = 8
    mini.validate()

    def pipeline(root):
        ws = Workspace(str(root))
        single = ws.run(mini)
        arms = run_ablation(mini, [0], ws)
        sweep = run_scaling(mini, depths=[2], fractions=[0.5], repeats=1, workspace=ws, seeds=[0])
        return {
            "single": (single.rows, single.mean_psnr, single.mean_ssim),
            "arms": {k: [(r.rows, r.mean_psnr) for r in v] for k, v in arms.items()},
            "sweep": [(r["depth"], r["fraction"], r["psnr"], r["ssim"]) for r in sweep],
        }

    r1 = pipeline(tmp_path / "ws-a")
    r2 = pipeline(tmp_path / "ws-b")
    assert r1 == r2, "end-to-end pipeline numbers differ between identical-seed re-runs"
    report(11, "identical numbers across re-runs (overfit curves and end-to-end pipelines)")
