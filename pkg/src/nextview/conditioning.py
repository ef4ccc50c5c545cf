"""Conditioning channels: the posed global embedding and local token streams.

Two mechanisms feed the generator. The global path condenses the input image
and the requested relative pose into a single start-token vector via an
identity-initialized linear layer, so that at initialization the output
ignores the pose entirely. The local path prepends the input image's own
multi-scale token pyramid to the sequence. Both carry a classifier-free
guidance dropout that swaps in a learnable null counterpart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .numerics import Rng

TWO_PI = 2.0 * math.pi


def wrap_azimuth(phi: float) -> float:
    """Wrap an angle into [0, 2*pi)."""
    w = float(phi) % TWO_PI
    # the modulo of a tiny negative angle can round up to exactly 2*pi
    return 0.0 if w >= TWO_PI else w


@dataclass(frozen=True)
class PoseSpec:
    """Relative camera transformation in spherical form."""

    elevation: float  # radians
    azimuth: float  # radians, stored wrapped to [0, 2*pi)
    radius: float  # scene-unit delta

    def __post_init__(self):
        for v in (self.elevation, self.azimuth, self.radius):
            if not math.isfinite(v):
                raise ValueError("pose components must be finite")
        object.__setattr__(self, "azimuth", wrap_azimuth(self.azimuth))


@dataclass(frozen=True)
class CameraSpec:
    """Absolute object-centric camera, always looking at the origin."""

    elevation: float  # radians
    azimuth: float  # radians
    radius: float  # scene units
    fov: float = math.radians(50.0)  # vertical field of view, radians

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("camera radius must be positive")


def relative_pose(cam_in: CameraSpec, cam_out: CameraSpec) -> PoseSpec:
    """Pose delta taking the input camera to the output camera."""
    return PoseSpec(
        elevation=cam_out.elevation - cam_in.elevation,
        azimuth=wrap_azimuth(cam_out.azimuth - cam_in.azimuth),
        radius=cam_out.radius - cam_in.radius,
    )


def pose_features(pose: PoseSpec, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """The 4-vector [elevation, sin(azimuth), cos(azimuth), radius]."""
    return torch.tensor(
        [pose.elevation, math.sin(pose.azimuth), math.cos(pose.azimuth), pose.radius],
        dtype=dtype,
    )


class SemanticEncoder(nn.Module):
    """Small trainable convolutional image encoder (pretrained-free)."""

    def __init__(self, d_sem: int, image_size: int, channels=(32, 64, 128)):
        super().__init__()
        convs = []
        c_in, side = 3, image_size
        for c_out in channels:
            convs += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.SiLU()]
            c_in, side = c_out, (side + 1) // 2
        self.convs = nn.Sequential(*convs)
        self.out = nn.Linear(c_in * side * side, d_sem)
        self.d_sem = d_sem
        self.image_size = image_size

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # images: (B, 3, H, W) in [0, 1]
        if images.shape[-1] != self.image_size or images.shape[-2] != self.image_size:
            raise ValueError(
                f"semantic encoder expects {self.image_size}x{self.image_size} images, "
                f"got {tuple(images.shape[-2:])}"
            )
        h = self.convs(images)
        return self.out(h.flatten(1))


class GlobalEmbedder(nn.Module):
    """Posed global embedding: start-token source and AdaLN conditioner.

    ``inner`` maps [semantics (+) pose features] back into the semantic space
    and starts as a generalized identity (identity over the semantic columns,
    zero over the four pose columns, zero bias), so before any optimizer step
    the output is exactly pose-invariant. ``outer`` interfaces the semantic
    space to the model width. The learnable ``null_sem`` vector replaces the
    post-inner embedding for classifier-free guidance.
    """

    def __init__(self, d_sem: int, width: int, image_size: int, rng: Rng):
        super().__init__()
        self.encoder = SemanticEncoder(d_sem, image_size)
        self.inner = nn.Linear(d_sem + 4, d_sem)
        self.outer = nn.Linear(d_sem, width)
        self.null_sem = nn.Parameter(torch.zeros(d_sem))
        self.d_sem = d_sem
        self.width = width
        self._init(rng)

    def _init(self, rng: Rng) -> None:
        g = rng.torch_gen("global-embedder")
        for mod in self.encoder.modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                fan_in = mod.weight.shape[1] * (
                    mod.weight[0, 0].numel() if mod.weight.ndim > 2 else 1
                )
                mod.weight.data.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=g)
                mod.bias.data.zero_()
        with torch.no_grad():
            w = torch.zeros(self.d_sem, self.d_sem + 4)
            w[:, : self.d_sem] = torch.eye(self.d_sem)
            self.inner.weight.copy_(w)
            self.inner.bias.zero_()
            self.outer.weight.data.normal_(0.0, 0.02, generator=g)
            self.outer.bias.zero_()
            self.null_sem.data.normal_(0.0, 0.02, generator=g)

    def pose_groups(self) -> dict:
        """Parameter split: the identity-initialized layer gets its own group."""
        inner = list(self.inner.parameters())
        inner_ids = {id(p) for p in inner}
        rest = [p for p in self.parameters() if id(p) not in inner_ids]
        return {"inner": inner, "rest": rest}

    def posed(self, sem: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
        """Apply the identity-initialized layer to [sem (+) pose features]."""
        return self.inner(torch.cat([sem, feats], dim=-1))

    def project(self, h: torch.Tensor) -> torch.Tensor:
        return self.outer(h)

    def forward(self, images: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
        """Posed global embedding of (B,3,H,W) images and (B,4) pose features."""
        return self.project(self.posed(self.encoder(images), feats))

    def null_start(self, batch: int = 1) -> torch.Tensor:
        return self.project(self.null_sem.unsqueeze(0).expand(batch, -1))


def cfg_drop_global(
    h: torch.Tensor,
    null_sem: torch.Tensor,
    rng: Rng,
    p_drop: float,
    elementwise: bool = False,
) -> torch.Tensor:
    """Replace post-inner embeddings with the null vector with prob ``p_drop``.

    Default is all-or-nothing per sample; ``elementwise`` replaces individual
    coordinates independently instead.
    """
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError("p_drop must be in [0, 1]")
    if p_drop == 0.0:
        return h
    b = h.shape[0]
    if elementwise:
        mask = torch.from_numpy(rng.bernoulli(p_drop, size=(b, h.shape[1])))
        return torch.where(mask, null_sem.unsqueeze(0).expand_as(h), h)
    mask = torch.from_numpy(rng.bernoulli(p_drop, size=b)).view(b, 1)
    return torch.where(mask, null_sem.unsqueeze(0).expand_as(h), h)


class LocalConditioner(nn.Module):
    """Null token for local-conditioning classifier-free guidance.

    The null embedding lives in codebook space and is a parameter of its own,
    distinct from every codebook entry.
    """

    def __init__(self, code_dim: int, rng: Rng):
        super().__init__()
        self.null_token = nn.Parameter(
            torch.randn(code_dim, generator=rng.torch_gen("null-local")) * 0.02
        )

    def embed(self, tokens: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
        """(B, L) indices -> (B, L, C) codebook vectors."""
        return codebook[tokens]

    def null_sequence(self, batch: int, length: int) -> torch.Tensor:
        return self.null_token.view(1, 1, -1).expand(batch, length, -1)

    def cfg_drop(self, emb: torch.Tensor, rng: Rng, p_drop: float) -> torch.Tensor:
        """Per-sample all-or-nothing replacement of local embeddings."""
        if not 0.0 <= p_drop <= 1.0:
            raise ValueError("p_drop must be in [0, 1]")
        if p_drop == 0.0:
            return emb
        b = emb.shape[0]
        mask = torch.from_numpy(rng.bernoulli(p_drop, size=b)).view(b, 1, 1)
        return torch.where(mask, self.null_sequence(b, emb.shape[1]).to(emb.dtype), emb)


def local_tokens(image: torch.Tensor, autoencoder, schedule=None) -> torch.Tensor:
    """Flatten the input image's token pyramid coarse-to-fine, row-major.

    Length is the sum of squared schedule sides; the vocabulary is the same
    codebook used on the generation path.
    """
    pyramid = autoencoder.tokenize_multiscale(image)
    return torch.cat([g.reshape(-1) for g in pyramid.grids])
