"""Next-scale prediction transformer.

The sequence is [local conditioning tokens | start token | teacher-forced
upscaled previous scales]. Every block is pre-norm self-attention plus MLP,
both modulated by AdaLN driven by the start-token vector (zero-initialized
gates, so blocks start as the identity). A block-causal mask keeps scale k
blind to scales after k while conditioning positions never see generation
positions. The classifier head is a plain linear layer after the final norm;
adaptive pre-head normalization exists only as an ablation flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import GlobalEmbedder, LocalConditioner, cfg_drop_global
from .numerics import AdamW, DivergenceError, Rng, cross_entropy, resize_bchw
from .tokenizer import DESK_SCHEDULE, MultiScaleVQVAE, ScaleSchedule, TokenPyramid

WIDTH_PER_DEPTH = 64


@dataclass
class ModelConfig:
    depth: int = 4
    vocab: int = 512
    code_dim: int = 64
    d_sem: int = 128
    image_size: int = 32
    schedule: ScaleSchedule = field(default_factory=lambda: ScaleSchedule(DESK_SCHEDULE))
    heads: int = 0  # 0 -> one head per unit depth (head dim stays 64)
    cls_head_adaln: bool = False

    def __post_init__(self):
        if isinstance(self.schedule, (tuple, list)):
            self.schedule = ScaleSchedule(tuple(self.schedule))
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.heads == 0:
            self.heads = self.depth
        if self.width % self.heads != 0:
            raise ValueError("heads must divide the model width")

    @property
    def width(self) -> int:
        return WIDTH_PER_DEPTH * self.depth

    @property
    def cond_len(self) -> int:
        return self.schedule.total_tokens

    @property
    def gen_len(self) -> int:
        return self.schedule.total_tokens


@dataclass(frozen=True)
class SequenceLayout:
    """Positions of the conditioning block, start token, and scale blocks."""

    schedule: ScaleSchedule
    cond_len: int
    gen_len: int
    total_len: int
    start_pos: int
    cond_spans: tuple[tuple[int, int], ...]
    gen_spans: tuple[tuple[int, int], ...]
    scale_ids: tuple[int, ...]  # per position
    pos_ids: tuple[int, ...]  # per position, index into the shared 2D table


def build_layout(schedule: ScaleSchedule) -> SequenceLayout:
    cond_len = schedule.total_tokens
    gen_len = schedule.total_tokens
    cond_spans, gen_spans = [], []
    scale_ids, pos_ids = [], []
    cur = 0
    for k, side in enumerate(schedule):
        n = side * side
        cond_spans.append((cur, cur + n))
        scale_ids += [k] * n
        cur += n
    table = 0
    for k, side in enumerate(schedule):
        n = side * side
        gen_spans.append((cond_len + table, cond_len + table + n))
        scale_ids += [k] * n
        table += n
    pos_ids = list(range(cond_len)) + list(range(gen_len))
    return SequenceLayout(
        schedule=schedule,
        cond_len=cond_len,
        gen_len=gen_len,
        total_len=cond_len + gen_len,
        start_pos=cond_len,
        cond_spans=tuple(cond_spans),
        gen_spans=tuple(gen_spans),
        scale_ids=tuple(scale_ids),
        pos_ids=tuple(pos_ids),
    )


def build_mask(layout: SequenceLayout) -> torch.Tensor:
    """Boolean allowed[query, key] mask.

    (a) conditioning attends only to conditioning; (b) generation attends to
    all conditioning; (c) generation at scale k attends to generation scales
    <= k, fully bidirectional inside a scale block.
    """
    t = layout.total_len
    allowed = torch.zeros(t, t, dtype=torch.bool)
    allowed[: layout.cond_len, : layout.cond_len] = True
    for _, (qs, qe) in enumerate(layout.gen_spans):
        allowed[qs:qe, : layout.cond_len] = True
        allowed[qs:qe, layout.cond_len : qe] = True
    return allowed


def mask_to_bias(mask: torch.Tensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    bias = torch.zeros(mask.shape, dtype=dtype)
    bias.masked_fill_(~mask, float("-inf"))
    return bias.view(1, 1, *mask.shape)


class BlockKV:
    """Growing key/value store for one block. Appended once per scale step."""

    def __init__(self):
        self.k: torch.Tensor | None = None
        self.v: torch.Tensor | None = None

    def extend(self, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self.k = k if self.k is None else torch.cat([self.k, k], dim=2)
        self.v = v if self.v is None else torch.cat([self.v, v], dim=2)
        return self.k, self.v

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[2]


class AdaLNBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.norm1 = nn.LayerNorm(width, eps=1e-6, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(width, eps=1e-6, elementwise_affine=False)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.fc1 = nn.Linear(width, 4 * width)
        self.fc2 = nn.Linear(4 * width, width)
        self.ada = nn.Linear(width, 6 * width)  # zero-init: identity block at step 0

    def modulation(self, cond: torch.Tensor) -> tuple[torch.Tensor, ...]:
        mods = self.ada(F.silu(cond)).view(cond.shape[0], 6, 1, self.width)
        return tuple(mods[:, i] for i in range(6))

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.heads, self.head_dim).transpose(1, 2)

    def _attend(self, q, k, v, bias):
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if bias is not None:
            att = att + bias
        att = att.softmax(dim=-1)
        out = att @ v
        b, _, l, _ = out.shape
        return out.transpose(1, 2).reshape(b, l, self.width)

    def forward(self, x, mods, attn_bias=None, cache: BlockKV | None = None):
        sa_sh, sa_sc, sa_g, ff_sh, ff_sc, ff_g = mods
        h = self.norm1(x) * (1 + sa_sc) + sa_sh
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q, k, v = self._split_heads(q), self._split_heads(k), self._split_heads(v)
        if cache is not None:
            k, v = cache.extend(k, v)
        x = x + sa_g * self.proj(self._attend(q, k, v, attn_bias))
        h = self.norm2(x) * (1 + ff_sc) + ff_sh
        x = x + ff_g * self.fc2(F.gelu(self.fc1(h)))
        return x


class NextScaleModel(nn.Module):
    """Transformer plus its conditioning parameters, one restorable unit."""

    def __init__(self, config: ModelConfig, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        self.config = config
        self.layout = build_layout(config.schedule)
        width = config.width

        self.word_embed = nn.Linear(config.code_dim, width)
        self.global_embedder = GlobalEmbedder(
            config.d_sem, width, config.image_size, rng.child("embedder")
        )
        self.local = LocalConditioner(config.code_dim, rng.child("local"))
        self.pos_2d = nn.Parameter(torch.zeros(config.schedule.total_tokens, width))
        self.lvl_embed = nn.Parameter(torch.zeros(len(config.schedule), width))
        self.blocks = nn.ModuleList(
            [AdaLNBlock(width, config.heads) for _ in range(config.depth)]
        )
        self.final_norm = nn.LayerNorm(width, eps=1e-6, elementwise_affine=False)
        self.head = nn.Linear(width, config.vocab)
        self.head_ada = nn.Linear(width, 2 * width) if config.cls_head_adaln else None

        mask = build_mask(self.layout)
        self.register_buffer("attn_bias", mask_to_bias(mask), persistent=False)
        self.register_buffer(
            "cond_scale_ids",
            torch.tensor(self.layout.scale_ids[: self.layout.cond_len], dtype=torch.long),
            persistent=False,
        )
        self._init(rng)

    def _init(self, rng: Rng) -> None:
        g = rng.torch_gen("model-init")
        std = 0.02
        for lin in [self.word_embed]:
            lin.weight.data.normal_(0.0, std, generator=g)
            lin.bias.data.zero_()
        self.pos_2d.data.normal_(0.0, std, generator=g)
        self.lvl_embed.data.normal_(0.0, std, generator=g)
        scale = 1.0 / math.sqrt(2.0 * len(self.blocks))
        for blk in self.blocks:
            for lin in (blk.qkv, blk.fc1):
                lin.weight.data.normal_(0.0, std, generator=g)
                lin.bias.data.zero_()
            for lin in (blk.proj, blk.fc2):
                lin.weight.data.normal_(0.0, std * scale, generator=g)
                lin.bias.data.zero_()
            blk.ada.weight.data.zero_()
            blk.ada.bias.data.zero_()
        # zero head: uniform logits, so the initial loss is exactly ln(vocab)
        self.head.weight.data.zero_()
        self.head.bias.data.zero_()
        if self.head_ada is not None:
            self.head_ada.weight.data.normal_(0.0, 0.01, generator=g)
            self.head_ada.bias.data.zero_()

    # -- embedding assembly -------------------------------------------------

    def _pos_lvl(self) -> torch.Tensor:
        return self.pos_2d + self.lvl_embed[self.cond_scale_ids]

    def embed_cond(self, cond_emb: torch.Tensor) -> torch.Tensor:
        """(B, L_c, code_dim) codebook-space conditioning -> model-width block."""
        return self.word_embed(cond_emb) + self._pos_lvl()

    def embed_start(self, start: torch.Tensor) -> torch.Tensor:
        return (start + self._pos_lvl()[0]).unsqueeze(1)

    def embed_gen(self, gen_inputs: torch.Tensor) -> torch.Tensor:
        """(B, gen_len-1, code_dim) teacher-forcing inputs e_1..e_{K-1}."""
        return self.word_embed(gen_inputs) + self._pos_lvl()[1:]

    def embed_gen_scale(self, e: torch.Tensor, scale: int) -> torch.Tensor:
        """(B, side^2, code_dim) inputs for one scale block (scale >= 1)."""
        qs, qe = self.layout.gen_spans[scale]
        off = qs - self.layout.cond_len
        return self.word_embed(e) + self._pos_lvl()[off : off + (qe - qs)]

    def teacher_gen_inputs(self, vae: MultiScaleVQVAE, pyramid: TokenPyramid) -> torch.Tensor:
        """Upscale each scale's embedded tokens to the next scale's side."""
        chunks = []
        sides = self.config.schedule.sides
        for k in range(len(sides) - 1):
            e = vae.embed_bchw(pyramid.grids[k])
            e = resize_bchw(e, sides[k + 1], sides[k + 1])
            chunks.append(e.permute(0, 2, 3, 1).reshape(e.shape[0], -1, self.config.code_dim))
        return torch.cat(chunks, dim=1)

    # -- forward paths --------------------------------------------------------

    def forward(
        self,
        cond_emb: torch.Tensor,
        start: torch.Tensor,
        gen_inputs: torch.Tensor,
    ) -> torch.Tensor:
        """Teacher-forced pass; returns logits (B, gen_len, vocab)."""
        lay = self.layout
        if cond_emb.shape[1] != lay.cond_len:
            raise ValueError(f"conditioning length {cond_emb.shape[1]} != {lay.cond_len}")
        if gen_inputs.shape[1] != lay.gen_len - 1:
            raise ValueError(f"gen input length {gen_inputs.shape[1]} != {lay.gen_len - 1}")
        x = torch.cat(
            [self.embed_cond(cond_emb), self.embed_start(start), self.embed_gen(gen_inputs)],
            dim=1,
        )
        bias = self.attn_bias.to(x.dtype)
        for blk in self.blocks:
            x = blk(x, blk.modulation(start), attn_bias=bias)
        return self.head_logits(x[:, lay.cond_len :], start)

    def forward_step(
        self, x: torch.Tensor, start: torch.Tensor, caches: list[BlockKV]
    ) -> torch.Tensor:
        """Incremental pass over new positions only; caches grow in place.

        New positions attend to every cached position plus each other, which
        matches the mask because the cache holds exactly the conditioning
        block and all earlier scale blocks.
        """
        for blk, cache in zip(self.blocks, caches):
            x = blk(x, blk.modulation(start), attn_bias=None, cache=cache)
        return x

    def head_logits(self, h: torch.Tensor, start: torch.Tensor) -> torch.Tensor:
        h = self.final_norm(h)
        if self.head_ada is not None:
            sh, sc = self.head_ada(F.silu(start)).view(start.shape[0], 2, 1, -1).unbind(1)
            h = h * (1 + sc) + sh
        return self.head(h)

    def new_caches(self) -> list[BlockKV]:
        return [BlockKV() for _ in self.blocks]

    # -- bookkeeping ------------------------------------------------------------

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def param_groups(self, weight_decay: float = 0.0, inner_lr_mult: float = 10.0) -> list[dict]:
        """Optimizer groups; the identity-initialized pose layer runs hot."""
        pose = self.global_embedder.pose_groups()
        inner_ids = {id(p) for p in pose["inner"]}
        decay, no_decay = [], []
        for name, p in self.named_parameters():
            if id(p) in inner_ids:
                continue
            if p.ndim >= 2 and not name.startswith(("pos_2d", "lvl_embed")):
                decay.append(p)
            else:
                no_decay.append(p)
        return [
            {"params": decay, "lr_mult": 1.0, "weight_decay": weight_decay},
            {"params": no_decay, "lr_mult": 1.0, "weight_decay": 0.0},
            {"params": pose["inner"], "lr_mult": inner_lr_mult, "weight_decay": 0.0},
        ]


def sequence_loss(logits: torch.Tensor, pyramid: TokenPyramid) -> torch.Tensor:
    """Mean cross-entropy over every generation position."""
    targets = pyramid.flatten()
    flat = logits.reshape(-1, logits.shape[-1])
    if targets.numel() != flat.shape[0]:
        raise ValueError("target length does not match logit positions")
    return cross_entropy(flat, targets.reshape(-1))


def train_step(
    batch: dict,
    model: NextScaleModel,
    vae: MultiScaleVQVAE,
    optim: AdamW,
    rng: Rng,
    p_drop_global: float = 0.1,
    p_drop_local: float = 0.1,
    global_only: bool = False,
    elementwise_global: bool = False,
) -> float:
    """One teacher-forced optimizer step; returns the scalar loss.

    ``batch`` carries ``images`` (B,3,H,W input views), ``cond_tokens``
    (B, L_c flattened input pyramids), ``target_pyramid`` (TokenPyramid of
    target views, batched grids), and ``pose_feats`` (B,4).
    """
    images = batch["images"]
    b = images.shape[0]
    emb = model.global_embedder
    sem = emb.encoder(images)
    h = emb.posed(sem, batch["pose_feats"])
    h = cfg_drop_global(
        h, emb.null_sem, rng.child("cfg-global"), p_drop_global, elementwise=elementwise_global
    )
    start = emb.project(h)

    if global_only:
        cond = model.local.null_sequence(b, model.layout.cond_len)
    else:
        cond = model.local.embed(batch["cond_tokens"], vae.codebook.detach())
        cond = model.local.cfg_drop(cond, rng.child("cfg-local"), p_drop_local)

    gen_inputs = model.teacher_gen_inputs(vae, batch["target_pyramid"])
    logits = model(cond, start, gen_inputs)
    loss = sequence_loss(logits, batch["target_pyramid"])
    if not torch.isfinite(loss):
        raise DivergenceError(f"training loss diverged: {loss.item()}")
    optim.zero_grad()
    loss.backward()
    optim.step()
    return float(loss.detach())
