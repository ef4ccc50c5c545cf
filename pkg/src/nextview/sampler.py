"""KV-cached scale-by-scale inference with classifier-free guidance.

Generation runs two lanes -- conditional (posed global embedding plus the
input image's local tokens) and unconditional (learnable nulls for both) --
each with its own cache. At every scale, only the new positions are pushed
through the blocks, guided logits are sampled per position, and the sampled
grid is embedded and upscaled into the next scale's inputs. Emitted tokens
are never revisited.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .conditioning import PoseSpec, pose_features
from .numerics import Rng, first_argmax, resize_bchw
from .tokenizer import MultiScaleVQVAE, TokenPyramid
from .transformer import BlockKV, NextScaleModel


@dataclass
class SampleConfig:
    temperature: float = 1.0  # 0 selects argmax decoding
    top_k: int = 0  # 0 disables truncation
    guidance: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0 (0 = off)")
        if self.guidance < 0:
            raise ValueError("guidance must be >= 0")


class KvCache:
    """Per-block key/value tensors for all processed positions."""

    def __init__(self, model: NextScaleModel):
        self.blocks: list[BlockKV] = model.new_caches()

    @property
    def length(self) -> int:
        return self.blocks[0].length


@dataclass
class GenerationSession:
    """State for one image generation: caches, emitted tokens, rng stream."""

    model: NextScaleModel
    vae: MultiScaleVQVAE
    cfg: SampleConfig
    rng: Rng
    cache_cond: KvCache
    cache_uncond: KvCache
    grids: list[torch.Tensor] = field(default_factory=list)
    scale_logits: list[torch.Tensor] = field(default_factory=list)


def cfg_combine(l_cond: torch.Tensor, l_uncond: torch.Tensor, s: float) -> torch.Tensor:
    """l_uncond + s * (l_cond - l_uncond), exact at s in {0, 1}."""
    if l_cond.shape != l_uncond.shape:
        raise ValueError("conditional/unconditional logit shapes differ")
    return (1.0 - s) * l_uncond + s * l_cond


def sample_scale(logits: torch.Tensor, cfg: SampleConfig, rng: Rng) -> torch.Tensor:
    """Independent categorical draw per position from softmax(logits / T).

    ``logits`` is (n, V). Top-k truncation keeps the k largest entries per
    row when enabled. Temperature 0 means per-position argmax (lowest index
    on exact ties).
    """
    if not torch.isfinite(logits).all():
        raise ValueError("logits must be finite")
    if cfg.temperature == 0.0:
        return first_argmax(logits, dim=-1)
    work = logits.double() / cfg.temperature
    vocab = work.shape[-1]
    if 0 < cfg.top_k < vocab:
        kth = torch.topk(work, cfg.top_k, dim=-1).values[:, -1:]
        work = work.masked_fill(work < kth, float("-inf"))
    probs = work.softmax(dim=-1)
    cdf = probs.cumsum(dim=-1)
    u = torch.from_numpy(np.asarray(rng.uniform(size=work.shape[0]), dtype=np.float64))
    idx = torch.searchsorted(cdf, u.unsqueeze(-1), right=False).squeeze(-1)
    return idx.clamp_(max=vocab - 1)


def _prepare_lanes(
    image: torch.Tensor,
    pose: PoseSpec,
    model: NextScaleModel,
    vae: MultiScaleVQVAE,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Conditioning embeddings and start vectors for both lanes (batch 1)."""
    from .conditioning import local_tokens

    emb = model.global_embedder
    img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    bchw = img.permute(2, 0, 1).unsqueeze(0)
    feats = pose_features(pose).unsqueeze(0)
    start_c = emb.project(emb.posed(emb.encoder(bchw), feats))
    start_u = emb.null_start(1)

    tokens = local_tokens(img, vae).unsqueeze(0)
    cond_c = model.local.embed(tokens, vae.codebook)
    cond_u = model.local.null_sequence(1, model.layout.cond_len)
    return cond_c, cond_u, start_c, start_u


def _lane_logits(
    model: NextScaleModel,
    x: torch.Tensor,
    start: torch.Tensor,
    cache: KvCache,
) -> torch.Tensor:
    h = model.forward_step(x, start, cache.blocks)
    return model.head_logits(h, start)


@torch.no_grad()
def generate(
    image,
    pose: PoseSpec,
    model: NextScaleModel,
    vae: MultiScaleVQVAE,
    cfg: SampleConfig,
    collect: bool = False,
):
    """Generate the novel view for ``image`` under ``pose``; KV-cached.

    Returns the (H, W, 3) image, or ``(image, session)`` when ``collect`` is
    set (the session carries the token pyramid and per-scale guided logits).
    """
    cond_c, cond_u, start_c, start_u = _prepare_lanes(image, pose, model, vae)
    session = GenerationSession(
        model=model,
        vae=vae,
        cfg=cfg,
        rng=Rng(cfg.seed).child("generate"),
        cache_cond=KvCache(model),
        cache_uncond=KvCache(model),
    )
    # prefill: conditioning attends only to itself, so it goes in as one chunk
    model.forward_step(model.embed_cond(cond_c), start_c, session.cache_cond.blocks)
    model.forward_step(model.embed_cond(cond_u), start_u, session.cache_uncond.blocks)

    x_c = model.embed_start(start_c)
    x_u = model.embed_start(start_u)
    sides = model.config.schedule.sides
    for k, side in enumerate(sides):
        logits_c = _lane_logits(model, x_c, start_c, session.cache_cond)
        logits_u = _lane_logits(model, x_u, start_u, session.cache_uncond)
        guided = cfg_combine(logits_c, logits_u, cfg.guidance).squeeze(0)
        idx = sample_scale(guided, cfg, session.rng)
        session.grids.append(idx.view(side, side))
        if collect:
            session.scale_logits.append(guided)
        if k + 1 < len(sides):
            nxt = sides[k + 1]
            e = resize_bchw(vae.embed_bchw(idx.view(1, side, side)), nxt, nxt)
            e = e.permute(0, 2, 3, 1).reshape(1, nxt * nxt, -1)
            x_c = model.embed_gen_scale(e, k + 1)
            x_u = x_c
    out = vae.decode(session.grids[-1])
    if collect:
        return out, session
    return out


@torch.no_grad()
def generate_uncached(
    image,
    pose: PoseSpec,
    model: NextScaleModel,
    vae: MultiScaleVQVAE,
    cfg: SampleConfig,
    collect: bool = False,
):
    """Cache-free oracle: recompute the full prefix from scratch every scale.

    No state survives between scale steps; each step replays conditioning,
    start token, and all earlier scale inputs before emitting the next grid.
    Identical seeds give bit-identical outputs to :func:`generate`.
    """
    cond_c, cond_u, start_c, start_u = _prepare_lanes(image, pose, model, vae)
    rng = Rng(cfg.seed).child("generate")
    grids: list[torch.Tensor] = []
    logits_log: list[torch.Tensor] = []
    sides = model.config.schedule.sides

    def scale_inputs(j: int, start: torch.Tensor) -> torch.Tensor:
        if j == 0:
            return model.embed_start(start)
        return _upscaled_inputs(model, vae, grids[j - 1], sides[j])

    for k, side in enumerate(sides):
        # replay the whole prefix with throwaway caches
        scratch_c, scratch_u = KvCache(model), KvCache(model)
        model.forward_step(model.embed_cond(cond_c), start_c, scratch_c.blocks)
        model.forward_step(model.embed_cond(cond_u), start_u, scratch_u.blocks)
        for j in range(k):
            model.forward_step(scale_inputs(j, start_c), start_c, scratch_c.blocks)
            model.forward_step(scale_inputs(j, start_u), start_u, scratch_u.blocks)
        logits_c = _lane_logits(model, scale_inputs(k, start_c), start_c, scratch_c)
        logits_u = _lane_logits(model, scale_inputs(k, start_u), start_u, scratch_u)
        guided = cfg_combine(logits_c, logits_u, cfg.guidance).squeeze(0)
        idx = sample_scale(guided, cfg, rng)
        grids.append(idx.view(side, side))
        if collect:
            logits_log.append(guided)

    out = vae.decode(grids[-1])
    if collect:
        return out, TokenPyramid(grids), logits_log
    return out


def _upscaled_inputs(model, vae, grid: torch.Tensor, next_side: int) -> torch.Tensor:
    e = resize_bchw(vae.embed_bchw(grid.unsqueeze(0)), next_side, next_side)
    e = e.permute(0, 2, 3, 1).reshape(1, next_side * next_side, -1)
    scale = model.config.schedule.sides.index(next_side)
    return model.embed_gen_scale(e, scale)
