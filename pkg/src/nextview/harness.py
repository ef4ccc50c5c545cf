"""Training orchestration, evaluation protocol, ablations, sweeps, timing.

Every run is a pure function of (RunConfig, seed): datasets, the frozen
autoencoder, and trained model runs are cached in a workspace keyed by
content hashes, so repeated pipelines (ablation arms sharing the full model,
sweeps sharing the 100%-data point) reuse identical artifacts instead of
retraining.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import checkpoint as ckpt
from . import config as cfgmod
from .conditioning import relative_pose
from .config import RunConfig
from .metrics import psnr, ssim
from .numerics import AdamW, Rng
from .sampler import SampleConfig, generate, generate_uncached
from .scenegen import DatasetManifest, RenderSettings, build_dataset, dataset_hash, load_manifest
from .tokenizer import MultiScaleVQVAE, ScaleSchedule, TokenPyramid, VaeTrainConfig, train_autoencoder
from .transformer import ModelConfig, NextScaleModel, train_step


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    images: torch.Tensor  # (N, 3, H, W)
    cond_tokens: torch.Tensor  # (N, L_c)
    pyramids: list[torch.Tensor]  # per scale (N, k, k)
    elev: np.ndarray
    azim: np.ndarray
    radius: np.ndarray
    object_views: list[list[int]]  # object -> row indices


def load_images(manifest: DatasetManifest) -> np.ndarray:
    return np.stack([manifest.image(r) for r in manifest.records])


@torch.no_grad()
def prepare_training_data(
    manifest: DatasetManifest, vae: MultiScaleVQVAE, chunk: int = 256
) -> PreparedData:
    """Pre-tokenize every view once; the autoencoder is frozen from here on."""
    imgs = torch.from_numpy(load_images(manifest)).permute(0, 3, 1, 2).contiguous()
    grids = [[] for _ in vae.schedule]
    for lo in range(0, imgs.shape[0], chunk):
        f = vae.encode_bchw(imgs[lo : lo + chunk])
        pyr = vae.tokenize_bchw(f)
        for k, g in enumerate(pyr.grids):
            grids[k].append(g)
    pyramids = [torch.cat(g, dim=0) for g in grids]
    cond = torch.cat([g.reshape(g.shape[0], -1) for g in pyramids], dim=1)

    object_ids = sorted({r.object_id for r in manifest.records})
    id_to_slot = {o: i for i, o in enumerate(object_ids)}
    object_views: list[list[int]] = [[] for _ in object_ids]
    for row, rec in enumerate(manifest.records):
        object_views[id_to_slot[rec.object_id]].append(row)
    return PreparedData(
        images=imgs,
        cond_tokens=cond,
        pyramids=pyramids,
        elev=np.array([math.radians(r.elevation_deg) for r in manifest.records]),
        azim=np.array([math.radians(r.azimuth_deg) for r in manifest.records]),
        radius=np.array([r.radius for r in manifest.records]),
        object_views=object_views,
    )


def _pose_feature_batch(data: PreparedData, src: np.ndarray, dst: np.ndarray) -> torch.Tensor:
    d_elev = data.elev[dst] - data.elev[src]
    d_azim = np.mod(data.azim[dst] - data.azim[src], 2.0 * math.pi)
    d_rad = data.radius[dst] - data.radius[src]
    feats = np.stack([d_elev, np.sin(d_azim), np.cos(d_azim), d_rad], axis=1)
    return torch.from_numpy(feats.astype(np.float32))


# ---------------------------------------------------------------------------
# Transformer training
# ---------------------------------------------------------------------------


def train_model(
    cfg: RunConfig,
    data: PreparedData,
    vae: MultiScaleVQVAE,
    log=None,
) -> tuple[NextScaleModel, list[float]]:
    """Train a next-scale model on prepared data; fully seeded by the config."""
    rng = Rng(cfg.train.seed)
    model_cfg = ModelConfig(
        depth=cfg.model.depth,
        vocab=cfg.vae.vocab,
        code_dim=cfg.vae.embed_dim,
        d_sem=cfg.model.d_sem,
        image_size=cfg.data.image_size,
        schedule=ScaleSchedule.parse(cfg.vae.schedule),
        heads=cfg.model.heads,
        cls_head_adaln=cfg.model.cls_head_adaln,
    )
    model = NextScaleModel(model_cfg, rng.child("init"))
    optim = AdamW(
        model.param_groups(cfg.train.weight_decay, cfg.train.inner_lr_mult),
        lr=cfg.train.lr,
        betas=(cfg.train.beta1, cfg.train.beta2),
        eps=cfg.train.eps,
    )

    n_objects = len(data.object_views)
    if cfg.train.data_fraction < 1.0:
        keep = max(1, round(n_objects * cfg.train.data_fraction))
        chosen = rng.child("subsample").permutation(n_objects)[:keep]
        views = [data.object_views[i] for i in sorted(chosen.tolist())]
    else:
        views = data.object_views
    views_arr = np.array(views)  # (n_obj, n_views) row indices

    losses: list[float] = []
    for step in range(cfg.train.steps):
        rs = rng.child("step", step)
        b = cfg.train.batch
        obj = rs.integers(0, views_arr.shape[0], size=b)
        n_views = views_arr.shape[1]
        vi = rs.integers(0, n_views, size=b)
        vt = (vi + rs.integers(1, n_views, size=b)) % n_views
        src = views_arr[obj, vi]
        dst = views_arr[obj, vt]
        batch = {
            "images": data.images[src],
            "cond_tokens": data.cond_tokens[src],
            "target_pyramid": TokenPyramid([g[dst] for g in data.pyramids]),
            "pose_feats": _pose_feature_batch(data, src, dst),
        }
        loss = train_step(
            batch,
            model,
            vae,
            optim,
            rs,
            p_drop_global=cfg.train.p_drop_global,
            p_drop_local=cfg.train.p_drop_local,
            global_only=cfg.model.global_only,
            elementwise_global=cfg.train.elementwise_global,
        )
        losses.append(loss)
        if log and cfg.train.log_every and (step % cfg.train.log_every == 0 or step == cfg.train.steps - 1):
            recent = losses[-cfg.train.log_every :]
            log(f"step {step}: loss {sum(recent)/len(recent):.4f}")
    return model, losses


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    rows: list[dict]
    mean_psnr: float
    mean_ssim: float
    baseline_psnr: float
    baseline_ssim: float
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: list[dict], meta: dict | None = None) -> "MetricsReport":
        return cls(
            rows=rows,
            mean_psnr=float(np.mean([r["psnr"] for r in rows])),
            mean_ssim=float(np.mean([r["ssim"] for r in rows])),
            baseline_psnr=float(np.mean([r["baseline_psnr"] for r in rows])),
            baseline_ssim=float(np.mean([r["baseline_ssim"] for r in rows])),
            meta=meta or {},
        )

    def check_aggregates(self) -> None:
        ref = MetricsReport.from_rows(self.rows)
        for name in ("mean_psnr", "mean_ssim", "baseline_psnr", "baseline_ssim"):
            if abs(getattr(self, name) - getattr(ref, name)) > 1e-9:
                raise ValueError(f"aggregate {name} does not match its rows")

    def write(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            f.write(json.dumps({"record": "meta", **self.meta}, sort_keys=True) + "\n")
            f.write(
                json.dumps(
                    {
                        "record": "aggregate",
                        "mean_psnr": self.mean_psnr,
                        "mean_ssim": self.mean_ssim,
                        "baseline_psnr": self.baseline_psnr,
                        "baseline_ssim": self.baseline_ssim,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
            for row in self.rows:
                f.write(json.dumps({"record": "view", **row}, sort_keys=True) + "\n")
        os.replace(tmp, path)

    @classmethod
    def read(cls, path: str) -> "MetricsReport":
        meta, agg, rows = {}, {}, []
        with open(path) as f:
            for line in f:
                row = json.loads(line)
                kind = row.pop("record")
                if kind == "meta":
                    meta = row
                elif kind == "aggregate":
                    agg = row
                else:
                    rows.append(row)
        report = cls(rows=rows, meta=meta, **agg)
        report.check_aggregates()
        return report


@torch.no_grad()
def evaluate(
    model: NextScaleModel,
    vae: MultiScaleVQVAE,
    eval_manifest: DatasetManifest,
    sampler_cfg: SampleConfig,
    meta: dict | None = None,
    copy_input_only: bool = False,
) -> MetricsReport:
    """One input view per object, generate the others, score against truth."""
    rows = []
    for object_id, recs in sorted(eval_manifest.by_object().items()):
        inputs = [r for r in recs if r.split == "input"]
        targets = [r for r in recs if r.split == "eval"]
        if len(inputs) != 1 or not targets:
            raise ValueError(f"object {object_id} lacks the 1-input/n-eval split")
        src = inputs[0]
        src_img = eval_manifest.image(src)
        cam_in = eval_manifest.camera(src)
        for rec in targets:
            gt = eval_manifest.image(rec)
            base_psnr = psnr(src_img, gt)
            base_ssim = ssim(src_img, gt)
            if copy_input_only:
                pred = src_img
            else:
                pose = relative_pose(cam_in, eval_manifest.camera(rec))
                seed_rng = Rng(sampler_cfg.seed).child("eval", object_id, rec.view_id)
                cfg = SampleConfig(
                    temperature=sampler_cfg.temperature,
                    top_k=sampler_cfg.top_k,
                    guidance=sampler_cfg.guidance,
                    seed=seed_rng.seed,
                )
                pred = generate(src_img, pose, model, vae, cfg).numpy()
            rows.append(
                {
                    "object_id": object_id,
                    "view_id": rec.view_id,
                    "psnr": psnr(pred, gt),
                    "ssim": ssim(pred, gt),
                    "baseline_psnr": base_psnr,
                    "baseline_ssim": base_ssim,
                }
            )
    return MetricsReport.from_rows(rows, meta=meta)


@torch.no_grad()
def vae_reconstruction_psnr(vae: MultiScaleVQVAE, images: np.ndarray) -> float:
    """Mean PSNR of finest-scale reconstructions."""
    scores = []
    for img in images:
        pyr_in = torch.from_numpy(img)
        rec = vae.decode(vae.tokenize_multiscale(pyr_in).grids[-1]).numpy()
        scores.append(psnr(rec, img))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Workspace: cached datasets, autoencoder, and runs
# ---------------------------------------------------------------------------


class Workspace:
    """Content-addressed store under one root directory."""

    def __init__(self, root: str):
        self.root = os.path.abspath(root)
        for sub in ("datasets", "vae", "runs", "reports"):
            os.makedirs(os.path.join(self.root, sub), exist_ok=True)

    # -- datasets --------------------------------------------------------------

    def _data_key(self, cfg: RunConfig, split: str) -> str:
        d = cfg.data
        parts = [split, d.image_size]
        if split == "train":
            parts += [d.objects, d.views, d.seed]
        else:
            parts += [d.eval_objects, d.eval_views, d.eval_seed, d.classic_cameras]
        return hashlib.sha256(repr(parts).encode()).hexdigest()[:16]

    def dataset(self, cfg: RunConfig, split: str) -> DatasetManifest:
        key = self._data_key(cfg, split)
        path = os.path.join(self.root, "datasets", f"{split}-{key}")
        if os.path.exists(os.path.join(path, "manifest.jsonl")):
            return load_manifest(path)
        d = cfg.data
        settings = RenderSettings(resolution=d.image_size)
        if split == "train":
            return build_dataset(d.objects, d.views, d.seed, path, settings=settings)
        return build_dataset(
            d.eval_objects,
            d.eval_views,
            d.eval_seed,
            path,
            eval_mode=True,
            classic_cameras=d.classic_cameras,
            settings=settings,
        )

    # -- frozen autoencoder ------------------------------------------------------

    def vae_path(self, cfg: RunConfig, train_manifest: DatasetManifest) -> str:
        v = cfg.vae
        key_src = repr(
            [
                dataset_hash(train_manifest.root),
                v.schedule,
                v.embed_dim,
                v.vocab,
                v.width,
                v.res_blocks,
                v.epochs,
                v.batch,
                v.lr,
                v.beta,
                v.seed,
            ]
        )
        key = hashlib.sha256(key_src.encode()).hexdigest()[:16]
        return os.path.join(self.root, "vae", f"vae-{key}.avae")

    def frozen_vae(self, cfg: RunConfig, manifest: DatasetManifest, log=None) -> MultiScaleVQVAE:
        path = self.vae_path(cfg, manifest)
        if os.path.exists(path):
            return ckpt.load_vae(path)
        v = cfg.vae
        vae = MultiScaleVQVAE(
            schedule=ScaleSchedule.parse(v.schedule),
            image_size=cfg.data.image_size,
            embed_dim=v.embed_dim,
            vocab=v.vocab,
            width=v.width,
            res_blocks=v.res_blocks,
            rng=Rng(v.seed).child("vae-init"),
        )
        images = load_images(manifest)
        train_autoencoder(
            images,
            vae,
            VaeTrainConfig(epochs=v.epochs, batch=v.batch, lr=v.lr, beta=v.beta),
            Rng(v.seed).child("vae-train"),
            log=log,
        )
        tmp = path + ".tmp"
        ckpt.save_vae(tmp, vae)
        os.replace(tmp, path)
        return ckpt.load_vae(path)

    # -- full runs ------------------------------------------------------------------

    def run_dir(self, cfg: RunConfig) -> str:
        return os.path.join(self.root, "runs", f"run-{cfgmod.checksum(cfg)[:16]}")

    def run(self, cfg: RunConfig, log=None, force: bool = False) -> MetricsReport:
        """Train and evaluate one configuration, or return the cached report."""
        cfg.validate()
        rdir = self.run_dir(cfg)
        report_path = os.path.join(rdir, "report.jsonl")
        if os.path.exists(report_path) and not force:
            return MetricsReport.read(report_path)
        os.makedirs(rdir, exist_ok=True)

        t_start = time.perf_counter()
        train_manifest = self.dataset(cfg, "train")
        eval_manifest = self.dataset(cfg, "eval")
        vae = self.frozen_vae(cfg, train_manifest, log=log)
        data = prepare_training_data(train_manifest, vae)
        model, losses = train_model(cfg, data, vae, log=log)

        ckpt.save_model(os.path.join(rdir, "model.avtx"), model, vae)
        cfgmod.save(cfg, os.path.join(rdir, "config.txt"))
        meta = {
            "config_sha256": cfgmod.checksum(cfg),
            "train_dataset_sha256": dataset_hash(train_manifest.root),
            "eval_dataset_sha256": dataset_hash(eval_manifest.root),
            "seed": cfg.train.seed,
            "depth": cfg.model.depth,
            "data_fraction": cfg.train.data_fraction,
            "global_only": cfg.model.global_only,
            "cls_head_adaln": cfg.model.cls_head_adaln,
            "params": model.parameter_count(),
            "final_loss": losses[-1] if losses else None,
        }
        sampler_cfg = SampleConfig(
            temperature=cfg.sampler.temperature,
            top_k=cfg.sampler.top_k,
            guidance=cfg.sampler.guidance,
            seed=cfg.sampler.seed,
        )
        report = evaluate(model, vae, eval_manifest, sampler_cfg, meta=meta)
        report.meta["elapsed_seconds"] = time.perf_counter() - t_start
        report.write(report_path)
        with open(os.path.join(rdir, "losses.json"), "w") as f:
            json.dump(losses, f)
        return report


# ---------------------------------------------------------------------------
# Ablations and scaling sweeps
# ---------------------------------------------------------------------------

ABLATION_ARMS = ("full", "global_only", "cls_head_adaln")


def _arm_config(base: RunConfig, arm: str, seed: int) -> RunConfig:
    model_updates = {
        "full": {},
        "global_only": {"global_only": True},
        "cls_head_adaln": {"cls_head_adaln": True},
    }[arm]
    return cfgmod.replace(base, model=model_updates, train={"seed": seed})


def run_ablation(
    base_cfg: RunConfig, seeds: list[int], workspace: Workspace, log=None
) -> dict[str, list[MetricsReport]]:
    """Three arms, identical data/seeds/budget. Returns reports per arm."""
    out: dict[str, list[MetricsReport]] = {arm: [] for arm in ABLATION_ARMS}
    for seed in seeds:
        for arm in ABLATION_ARMS:
            cfg = _arm_config(base_cfg, arm, seed)
            if log:
                log(f"[ablate] arm={arm} seed={seed}")
            out[arm].append(workspace.run(cfg, log=log))
    hashes = {
        r.meta["train_dataset_sha256"] for reports in out.values() for r in reports
    }
    if len(hashes) != 1:
        raise ValueError(f"ablation arms saw different datasets: {hashes}")
    return out


def ablation_summary(reports: dict[str, list[MetricsReport]]) -> list[dict]:
    rows = []
    for arm, reps in reports.items():
        vals = [r.mean_psnr for r in reps]
        rows.append(
            {
                "arm": arm,
                "repeats": len(reps),
                "mean_psnr": float(np.mean(vals)),
                "std_psnr": float(np.std(vals)),
                "mean_ssim": float(np.mean([r.mean_ssim for r in reps])),
            }
        )
    return rows


def scaling_points(base_depth: int, depths: list[int], fractions: list[float]) -> list[tuple[int, float]]:
    points = [(d, 1.0) for d in depths] + [(base_depth, f) for f in fractions]
    seen, out = set(), []
    for p in points:
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


def run_scaling(
    base_cfg: RunConfig,
    depths: list[int],
    fractions: list[float],
    repeats: int,
    workspace: Workspace,
    seeds: list[int] | None = None,
    log=None,
) -> list[dict]:
    """Depth sweep at full data plus data-fraction sweep at the base depth.

    Each point runs ``repeats`` times with distinct seeds; rows carry one run
    each so mean +/- sd per point can be recomputed downstream.
    """
    seeds = seeds or [base_cfg.train.seed + i for i in range(repeats)]
    if len(seeds) != repeats:
        raise ValueError("need exactly one seed per repeat")
    rows = []
    for depth, frac in scaling_points(base_cfg.model.depth, depths, fractions):
        for seed in seeds:
            cfg = cfgmod.replace(
                base_cfg, model={"depth": depth}, train={"seed": seed, "data_fraction": frac}
            )
            if log:
                log(f"[sweep] depth={depth} fraction={frac} seed={seed}")
            rep = workspace.run(cfg, log=log)
            rows.append(
                {
                    "depth": depth,
                    "fraction": frac,
                    "seed": seed,
                    "psnr": rep.mean_psnr,
                    "ssim": rep.mean_ssim,
                    "params": rep.meta["params"],
                }
            )
    return rows


def scaling_summary(rows: list[dict]) -> list[dict]:
    out = []
    for key in sorted({(r["depth"], r["fraction"]) for r in rows}):
        vals = [r["psnr"] for r in rows if (r["depth"], r["fraction"]) == key]
        out.append(
            {
                "depth": key[0],
                "fraction": key[1],
                "repeats": len(vals),
                "mean_psnr": float(np.mean(vals)),
                "std_psnr": float(np.std(vals)),
            }
        )
    return out


def write_rows(path: str, rows: list[dict]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Inference benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkResult:
    params: int
    seconds_per_image: float
    tokens_per_second: float
    uncached_seconds: float
    cached_speedup: float
    n_runs: int


@torch.no_grad()
def benchmark(
    model: NextScaleModel,
    vae: MultiScaleVQVAE,
    image,
    pose,
    n_runs: int = 10,
    warmup: int = 3,
) -> BenchmarkResult:
    if n_runs < 10:
        raise ValueError("benchmark needs n_runs >= 10")
    cfg = SampleConfig(seed=0)
    for _ in range(warmup):
        generate(image, pose, model, vae, cfg)
    t0 = time.perf_counter()
    for i in range(n_runs):
        generate(image, pose, model, vae, SampleConfig(seed=i))
    cached = (time.perf_counter() - t0) / n_runs
    n_un = max(3, n_runs // 3)
    t0 = time.perf_counter()
    for i in range(n_un):
        generate_uncached(image, pose, model, vae, SampleConfig(seed=i))
    uncached = (time.perf_counter() - t0) / n_un
    gen_len = model.config.schedule.total_tokens
    return BenchmarkResult(
        params=model.parameter_count(),
        seconds_per_image=cached,
        tokens_per_second=gen_len / cached,
        uncached_seconds=uncached,
        cached_speedup=uncached / cached,
        n_runs=n_runs,
    )
