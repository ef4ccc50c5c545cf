"""Multi-scale vector-quantized autoencoder.

An image becomes a feature map, the feature map is resized to every side in
the scale schedule, and each resized map is quantized against one codebook
shared across scales. Decoding maps the finest token grid back to pixels.
The autoencoder is trained once on the toy set, then frozen for all
transformer training and inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import DivergenceError, Rng, first_argmin, resize_bchw

PAPER_SCHEDULE = (1, 2, 3, 4, 5, 6, 8, 10, 13, 16)
DESK_SCHEDULE = (1, 2, 3, 4)


@dataclass(frozen=True)
class ScaleSchedule:
    """Strictly increasing per-side token counts, starting at 1."""

    sides: tuple[int, ...]

    def __post_init__(self):
        sides = tuple(int(s) for s in self.sides)
        object.__setattr__(self, "sides", sides)
        if not sides or sides[0] != 1:
            raise ValueError("schedule must start at side 1")
        if any(b <= a for a, b in zip(sides, sides[1:])):
            raise ValueError("schedule sides must be strictly increasing")

    @classmethod
    def parse(cls, text: str) -> "ScaleSchedule":
        return cls(tuple(int(x) for x in text.replace(" ", "").split(",") if x))

    @property
    def latent_side(self) -> int:
        return self.sides[-1]

    @property
    def total_tokens(self) -> int:
        return sum(s * s for s in self.sides)

    def __len__(self) -> int:
        return len(self.sides)

    def __iter__(self):
        return iter(self.sides)


@dataclass
class TokenPyramid:
    """Per-scale integer index grids; grid k has side ``schedule.sides[k]``.

    Grids may carry leading batch dimensions; the two trailing dimensions are
    the spatial sides.
    """

    grids: list[torch.Tensor] = field(default_factory=list)

    def validate(self, schedule: ScaleSchedule, vocab: int) -> None:
        if len(self.grids) != len(schedule):
            raise ValueError("pyramid scale count does not match schedule")
        for g, side in zip(self.grids, schedule):
            if g.shape[-2:] != (side, side):
                raise ValueError(f"grid side {tuple(g.shape[-2:])} != schedule side {side}")
            if g.numel() and (g.min() < 0 or g.max() >= vocab):
                raise ValueError("token index out of codebook range")

    def flatten(self) -> torch.Tensor:
        """Coarse-to-fine, row-major within each scale."""
        lead = self.grids[0].shape[:-2]
        return torch.cat([g.reshape(*lead, -1) for g in self.grids], dim=-1)


def quantize(feature_map: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Nearest codebook entry per cell (squared Euclidean, lowest-index ties).

    ``feature_map`` is (..., C); returns integer indices shaped (...).
    Distances are the direct sums of squared differences, chunked to bound
    the temporary, so results agree exactly with a brute-force scan.
    """
    if feature_map.shape[-1] != codebook.shape[-1]:
        raise ValueError(
            f"channel dim {feature_map.shape[-1]} != codebook dim {codebook.shape[-1]}"
        )
    lead = feature_map.shape[:-1]
    flat = feature_map.reshape(-1, feature_map.shape[-1])
    chunk = max(1, (1 << 22) // max(1, codebook.numel()))
    out = torch.empty(flat.shape[0], dtype=torch.long)
    for lo in range(0, flat.shape[0], chunk):
        d = (flat[lo : lo + chunk].unsqueeze(-2) - codebook).pow(2).sum(-1)
        out[lo : lo + chunk] = first_argmin(d, dim=-1)
    return out.reshape(lead)


def _quantize_fast(cells: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    # expansion form |f|^2 - 2 f.Z^T + |Z|^2: used only inside autoencoder
    # training, where rounding-level nearest-neighbor flips are SGD noise
    d = (
        cells.pow(2).sum(-1, keepdim=True)
        - 2.0 * cells @ codebook.t()
        + codebook.pow(2).sum(-1)
    )
    return torch.argmin(d, dim=-1)


def embed(grid: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Codebook lookup: (...,) indices -> (..., C) vectors."""
    if grid.numel() and (grid.min() < 0 or grid.max() >= codebook.shape[0]):
        raise ValueError("token index out of codebook range")
    return codebook[grid]


class ResBlock(nn.Module):
    def __init__(self, channels: int, padding_mode: str = "zeros"):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode=padding_mode)
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode=padding_mode)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class MultiScaleVQVAE(nn.Module):
    """Patch encoder, shared codebook, and pixel decoder.

    The encoder is a patch embedding followed by a small residual stack at
    latent resolution; the decoder mirrors it with a residual stack and a
    nearest-neighbor-upsampling conv pyramid back to pixel resolution.
    """

    def __init__(
        self,
        schedule: ScaleSchedule,
        image_size: int = 32,
        embed_dim: int = 64,
        vocab: int = 512,
        width: int = 96,
        res_blocks: int = 2,
        rng: Rng | None = None,
    ):
        super().__init__()
        if image_size % schedule.latent_side != 0:
            raise ValueError("image size must be a multiple of the latent side")
        patch = image_size // schedule.latent_side
        if patch < 1 or (patch & (patch - 1)) != 0:
            raise ValueError("patch size must be a power of two")
        self.schedule = schedule
        self.image_size = image_size
        self.embed_dim = embed_dim
        self.vocab = vocab
        self.width = width
        self.res_blocks = res_blocks
        self.patch = patch

        self.patch_embed = nn.Conv2d(3, width, kernel_size=patch, stride=patch)
        self.enc_res = nn.Sequential(*[ResBlock(width) for _ in range(res_blocks)])
        self.enc_out = nn.Conv2d(width, embed_dim, 1)

        self.codebook = nn.Parameter(torch.empty(vocab, embed_dim))

        self.dec_in = nn.Conv2d(embed_dim, width, 1)
        self.dec_res = nn.Sequential(*[ResBlock(width) for _ in range(res_blocks)])
        ups = []
        c = width
        for _ in range(int(math.log2(patch))):
            c_out = max(32, int(c * 0.75) // 8 * 8)
            ups += [
                nn.Conv2d(c, 4 * c_out, 3, padding=1),
                nn.PixelShuffle(2),
                nn.SiLU(),
                ResBlock(c_out),
            ]
            c = c_out
        self.dec_up = nn.Sequential(*ups)
        self.dec_out = nn.Conv2d(c, 3, 3, padding=1)
        # direct cell -> patch linear path; the conv pyramid refines it
        self.dec_skip = nn.Conv2d(embed_dim, 3 * patch * patch, 1)
        self.dec_shuffle = nn.PixelShuffle(patch)

        self._init(rng or Rng(0))

    def _init(self, rng: Rng) -> None:
        g = rng.torch_gen("vqvae-init")
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.weight[0].numel()
                mod.weight.data.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=g)
                if mod.bias is not None:
                    mod.bias.data.zero_()
        with torch.no_grad():
            self.codebook.normal_(0.0, 1.0, generator=g)

    # -- single-image surface ------------------------------------------------

    def _to_bchw(self, image) -> torch.Tensor:
        img = torch.as_tensor(np.asarray(image), dtype=self.codebook.dtype)
        if img.ndim != 3 or img.shape[-1] != 3:
            raise ValueError(f"expected (H, W, 3) image, got shape {tuple(img.shape)}")
        if img.shape[0] != self.image_size or img.shape[1] != self.image_size:
            raise ValueError(
                f"expected {self.image_size}x{self.image_size} input, got {tuple(img.shape[:2])}"
            )
        return img.permute(2, 0, 1).unsqueeze(0)

    @torch.no_grad()
    def encode(self, image) -> torch.Tensor:
        """(H, W, 3) image in [0, 1] -> (h, w, C) feature map."""
        f = self.encode_bchw(self._to_bchw(image))
        return f.squeeze(0).permute(1, 2, 0)

    @torch.no_grad()
    def tokenize_multiscale(self, image) -> TokenPyramid:
        """Resize the feature map to every scale and quantize each one."""
        f = self.encode_bchw(self._to_bchw(image))
        pyr = self.tokenize_bchw(f)
        return TokenPyramid([g.squeeze(0) for g in pyr.grids])

    @torch.no_grad()
    def decode(self, finest_grid: torch.Tensor) -> torch.Tensor:
        """Finest token grid -> (H, W, 3) image clamped to [0, 1]."""
        side = self.schedule.latent_side
        if finest_grid.shape != (side, side):
            raise ValueError(f"expected {side}x{side} grid, got {tuple(finest_grid.shape)}")
        z = embed(finest_grid, self.codebook).permute(2, 0, 1).unsqueeze(0)
        img = self.decode_bchw(z)
        return img.squeeze(0).permute(1, 2, 0).clamp(0.0, 1.0)

    # -- batched internals ----------------------------------------------------

    def encode_bchw(self, images: torch.Tensor) -> torch.Tensor:
        return self.enc_out(self.enc_res(self.patch_embed(images)))

    def decode_bchw(self, z: torch.Tensor) -> torch.Tensor:
        # linear output: a sigmoid here saturates under MSE and kills the
        # decoder gradient; [0,1] clamping happens at the image surface
        h = self.dec_res(self.dec_in(z))
        return self.dec_out(self.dec_up(h)) + self.dec_shuffle(self.dec_skip(z))

    def tokenize_bchw(self, f: torch.Tensor) -> TokenPyramid:
        grids = []
        for side in self.schedule:
            fk = resize_bchw(f, side, side).permute(0, 2, 3, 1)
            grids.append(quantize(fk, self.codebook))
        return TokenPyramid(grids)

    def embed_bchw(self, grid: torch.Tensor) -> torch.Tensor:
        """(B, k, k) indices -> (B, C, k, k) codebook features."""
        return embed(grid, self.codebook).permute(0, 3, 1, 2)

    # -- training --------------------------------------------------------------

    def training_losses(self, images: torch.Tensor, beta: float = 0.25) -> dict:
        """Reconstruction plus per-scale codebook and commitment losses.

        Codebook/commitment terms are weighted by each scale's token share so
        together they average per token across the pyramid.
        """
        f = self.encode_bchw(images)
        vq_loss = images.new_zeros(())
        commit = images.new_zeros(())
        total = self.schedule.total_tokens
        finest = None
        for side in self.schedule:
            fk = resize_bchw(f, side, side).permute(0, 2, 3, 1)
            cells = fk.reshape(-1, self.embed_dim)
            idx = _quantize_fast(cells.detach(), self.codebook.detach()).reshape(fk.shape[:-1])
            zk = self.codebook[idx]
            w = side * side / total
            vq_loss = vq_loss + w * F.mse_loss(zk, fk.detach())
            commit = commit + w * F.mse_loss(fk, zk.detach())
            if side == self.schedule.latent_side:
                finest = (fk, zk, idx)
        fk, zk, idx = finest
        z_st = fk + (zk - fk).detach()  # straight-through estimator
        recon = self.decode_bchw(z_st.permute(0, 3, 1, 2))
        rec_loss = F.mse_loss(recon, images)
        loss = rec_loss + vq_loss + beta * commit
        return {
            "loss": loss,
            "recon": rec_loss,
            "vq": vq_loss,
            "commit": commit,
            "finest_idx": idx,
            "features": f,
        }


@dataclass
class VaeTrainConfig:
    epochs: int = 20
    batch: int = 64
    lr: float = 2e-3
    beta: float = 0.25
    weight_decay: float = 0.0
    stash_size: int = 4096
    # early codebook collapse (hundreds of dead entries within an epoch) locks
    # the decoder into a few-code optimum; re-seeding on a step cadence keeps
    # the vocabulary alive
    reseed_every: int = 32


def train_autoencoder(
    images: np.ndarray,
    vae: MultiScaleVQVAE,
    config: VaeTrainConfig,
    rng: Rng,
    log=None,
) -> list[float]:
    """Train ``vae`` in place on (N, H, W, 3) images; returns per-step losses.

    Dead codebook entries are re-seeded from recent encoder outputs at every
    epoch boundary. Raises :class:`DivergenceError` if the loss goes
    non-finite.
    """
    from .numerics import AdamW

    if len(images) == 0:
        raise ValueError("dataset is empty")
    data = torch.as_tensor(images, dtype=torch.float32).permute(0, 3, 1, 2).contiguous()
    n = data.shape[0]
    opt = AdamW([{"params": list(vae.parameters())}], lr=config.lr, weight_decay=config.weight_decay)
    total_steps = max(1, config.epochs * ((n + config.batch - 1) // config.batch))

    # data-dependent codebook init: seed every entry from real encoder cells
    with torch.no_grad():
        probe = data[rng.child("codebook-init").choice(n, min(n, 256))]
        cells = vae.encode_bchw(probe).permute(0, 2, 3, 1).reshape(-1, vae.embed_dim)
        pick = rng.child("codebook-pick").choice(cells.shape[0], vae.vocab, replace=cells.shape[0] < vae.vocab)
        vae.codebook.data.copy_(cells[pick])

    history: list[float] = []
    step = 0
    usage = torch.zeros(vae.vocab, dtype=torch.long)
    stash: list[torch.Tensor] = []
    for epoch in range(config.epochs):
        order = rng.child("epoch-order", epoch).permutation(n)
        for lo in range(0, n, config.batch):
            batch = data[order[lo : lo + config.batch]]
            out = vae.training_losses(batch, beta=config.beta)
            loss = out["loss"]
            if not torch.isfinite(loss):
                raise DivergenceError(f"autoencoder loss diverged at step {step}")
            opt.zero_grad()
            loss.backward()
            # cosine decay to a tenth of the base rate
            opt.lr = config.lr * (0.55 + 0.45 * math.cos(math.pi * step / total_steps))
            opt.step()
            history.append(float(loss.detach()))
            usage += torch.bincount(out["finest_idx"].reshape(-1), minlength=vae.vocab)
            cells = out["features"].detach().permute(0, 2, 3, 1).reshape(-1, vae.embed_dim)
            pick = rng.child("stash", step).choice(cells.shape[0], min(64, cells.shape[0]))
            stash.append(cells[pick])
            if len(stash) * 64 > config.stash_size:
                stash.pop(0)
            step += 1
            if step % config.reseed_every == 0:
                _reseed_dead_codes(vae, usage, stash, rng.child("reseed", step))
                usage.zero_()
        if log:
            recent = history[-max(1, n // config.batch):]
            log(
                f"vae epoch {epoch}: loss {sum(recent)/len(recent):.5f} "
                f"recon {float(out['recon'].detach()):.5f} vq {float(out['vq'].detach()):.5f} "
                f"live {int((usage > 0).sum())}/{vae.vocab}"
            )
    return history


@torch.no_grad()
def _reseed_dead_codes(vae: MultiScaleVQVAE, usage: torch.Tensor, stash, rng: Rng) -> None:
    dead = (usage == 0).nonzero(as_tuple=True)[0]
    if len(dead) == 0 or not stash:
        return
    pool = torch.cat(stash, dim=0)
    pick = rng.choice(pool.shape[0], len(dead), replace=pool.shape[0] < len(dead))
    vae.codebook.data[dead] = pool[pick]


def reconstruct(vae: MultiScaleVQVAE, image) -> torch.Tensor:
    """Round-trip an image through the finest-scale tokens."""
    pyr = vae.tokenize_multiscale(image)
    return vae.decode(pyr.grids[-1])
