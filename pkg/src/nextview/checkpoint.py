"""Binary checkpoints.

Layout: 4 magic bytes, little-endian u32 version, u32 metadata length, a
UTF-8 ``key = value`` metadata block that also declares every tensor's name
and shape in blob order, then the raw little-endian float32 blobs.
"""

from __future__ import annotations

import struct

import numpy as np
import torch

MAGIC_VAE = b"AVAE"
MAGIC_MODEL = b"AVTX"
VERSION = 1


def save_checkpoint(path: str, magic: bytes, meta: dict, named: list[tuple[str, torch.Tensor]]) -> None:
    lines = [f"{k} = {v}" for k, v in meta.items()]
    for i, (name, t) in enumerate(named):
        shape = "x".join(str(s) for s in t.shape) if t.ndim else "scalar"
        lines.append(f"tensor.{i} = {name} {shape}")
    blob_meta = ("\n".join(lines) + "\n").encode()
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", VERSION, len(blob_meta)))
        f.write(blob_meta)
        for _, t in named:
            f.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())


def load_checkpoint(path: str, magic: bytes) -> tuple[dict, dict]:
    """Returns (meta dict, name -> float32 tensor)."""
    with open(path, "rb") as f:
        got = f.read(4)
        if got != magic:
            raise ValueError(f"bad magic {got!r} in {path}, expected {magic!r}")
        version, meta_len = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta_text = f.read(meta_len).decode()
        meta: dict[str, str] = {}
        order: list[tuple[str, tuple[int, ...]]] = []
        for line in meta_text.splitlines():
            if not line.strip():
                continue
            key, value = (p.strip() for p in line.split("=", 1))
            if key.startswith("tensor."):
                name, shape = value.rsplit(" ", 1)
                dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
                order.append((name.strip(), dims))
            else:
                meta[key] = value
        tensors = {}
        for name, dims in order:
            count = int(np.prod(dims)) if dims else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError(f"truncated blob for tensor {name}")
            arr = np.frombuffer(buf, dtype="<f4").reshape(dims)
            tensors[name] = torch.from_numpy(arr.copy())
    return meta, tensors


# -- model/vae specific wrappers ----------------------------------------------


def _named_params(module: torch.nn.Module) -> list[tuple[str, torch.Tensor]]:
    return [(name, p.data) for name, p in module.named_parameters()]


def save_vae(path: str, vae) -> None:
    meta = {
        "kind": "multiscale-vqvae",
        "schedule": ",".join(str(s) for s in vae.schedule),
        "embed_dim": vae.embed_dim,
        "vocab": vae.vocab,
        "patch": vae.patch,
        "image_size": vae.image_size,
        "width": vae.width,
        "res_blocks": vae.res_blocks,
    }
    save_checkpoint(path, MAGIC_VAE, meta, _named_params(vae))


def load_vae(path: str):
    from .numerics import Rng
    from .tokenizer import MultiScaleVQVAE, ScaleSchedule

    meta, tensors = load_checkpoint(path, MAGIC_VAE)
    vae = MultiScaleVQVAE(
        schedule=ScaleSchedule.parse(meta["schedule"]),
        image_size=int(meta["image_size"]),
        embed_dim=int(meta["embed_dim"]),
        vocab=int(meta["vocab"]),
        width=int(meta["width"]),
        res_blocks=int(meta["res_blocks"]),
        rng=Rng(0),
    )
    vae.load_state_dict(tensors)
    for p in vae.parameters():
        p.requires_grad_(False)
    return vae


def save_model(path: str, model, vae) -> None:
    """One file restores generation: transformer, conditioning, and the VQVAE."""
    cfg = model.config
    meta = {
        "kind": "next-scale-model",
        "depth": cfg.depth,
        "heads": cfg.heads,
        "vocab": cfg.vocab,
        "code_dim": cfg.code_dim,
        "d_sem": cfg.d_sem,
        "image_size": cfg.image_size,
        "schedule": ",".join(str(s) for s in cfg.schedule),
        "cls_head_adaln": cfg.cls_head_adaln,
        "vae.schedule": ",".join(str(s) for s in vae.schedule),
        "vae.embed_dim": vae.embed_dim,
        "vae.vocab": vae.vocab,
        "vae.patch": vae.patch,
        "vae.image_size": vae.image_size,
        "vae.width": vae.width,
        "vae.res_blocks": vae.res_blocks,
    }
    named = [("model/" + n, t) for n, t in _named_params(model)]
    named += [("vae/" + n, t) for n, t in _named_params(vae)]
    save_checkpoint(path, MAGIC_MODEL, meta, named)


def load_model(path: str):
    """Returns (model, vae), both frozen for inference."""
    from .numerics import Rng
    from .tokenizer import MultiScaleVQVAE, ScaleSchedule
    from .transformer import ModelConfig, NextScaleModel

    meta, tensors = load_checkpoint(path, MAGIC_MODEL)
    cfg = ModelConfig(
        depth=int(meta["depth"]),
        vocab=int(meta["vocab"]),
        code_dim=int(meta["code_dim"]),
        d_sem=int(meta["d_sem"]),
        image_size=int(meta["image_size"]),
        schedule=ScaleSchedule.parse(meta["schedule"]),
        heads=int(meta["heads"]),
        cls_head_adaln=meta["cls_head_adaln"] == "True",
    )
    model = NextScaleModel(cfg, Rng(0))
    model.load_state_dict(
        {n[len("model/") :]: t for n, t in tensors.items() if n.startswith("model/")}
    )
    vae = MultiScaleVQVAE(
        schedule=ScaleSchedule.parse(meta["vae.schedule"]),
        image_size=int(meta["vae.image_size"]),
        embed_dim=int(meta["vae.embed_dim"]),
        vocab=int(meta["vae.vocab"]),
        width=int(meta["vae.width"]),
        res_blocks=int(meta["vae.res_blocks"]),
        rng=Rng(0),
    )
    vae.load_state_dict({n[len("vae/") :]: t for n, t in tensors.items() if n.startswith("vae/")})
    for p in list(model.parameters()) + list(vae.parameters()):
        p.requires_grad_(False)
    return model, vae
