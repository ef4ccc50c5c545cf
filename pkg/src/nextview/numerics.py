"""Deterministic numeric substrate shared by every other module.

Tensors are plain ``torch.Tensor`` objects: float32 for training and
inference, float64 when running gradient checks. Everything here is pure
and deterministic -- same inputs, same bits on the same machine. Randomness
is always explicit through :class:`Rng`; no code in this package touches
global RNG state.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "AdamW",
    "DivergenceError",
    "Rng",
    "adamw_step",
    "bilinear_resize",
    "cross_entropy",
    "first_argmax",
    "first_argmin",
    "grad_check",
    "resize_bchw",
]


class DivergenceError(RuntimeError):
    """A loss or activation stopped being finite."""


# ---------------------------------------------------------------------------
# Splittable RNG
# ---------------------------------------------------------------------------

_PERSON = b"nxv-rng"


class Rng:
    """Counter-based splittable random stream.

    A child stream is a pure function of ``(parent key, label)``, never of
    how many values the parent or any sibling has drawn. That makes dataset
    generation, batch sampling, and conditioning dropout order-independent
    and reproducible.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = hashlib.blake2b(
            self.seed.to_bytes(8, "little"), digest_size=16, person=_PERSON
        ).digest()
        self._gen = np.random.Generator(
            np.random.Philox(key=int.from_bytes(self._key, "little"))
        )

    @classmethod
    def _from_key(cls, key: bytes) -> "Rng":
        rng = cls.__new__(cls)
        rng.seed = int.from_bytes(key[:8], "little")
        rng._key = key
        rng._gen = np.random.Generator(
            np.random.Philox(key=int.from_bytes(key, "little"))
        )
        return rng

    def child(self, *label) -> "Rng":
        """Derive an independent stream keyed by ``label``."""
        h = hashlib.blake2b(self._key, digest_size=16, person=_PERSON)
        h.update(repr(label).encode())
        return Rng._from_key(h.digest())

    # -- draws ------------------------------------------------------------

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, std: float = 1.0, size=None):
        return self._gen.normal(0.0, std, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def bernoulli(self, p: float, size=None):
        return self._gen.uniform(0.0, 1.0, size) < p

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=replace)

    def torch_gen(self, *label) -> torch.Generator:
        """A fresh torch generator seeded from ``child(*label)``."""
        key = self.child("torch", *label)._key
        g = torch.Generator()
        g.manual_seed(int.from_bytes(key[:8], "little") & 0x7FFFFFFFFFFFFFFF)
        return g


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: torch.Tensor, targets) -> torch.Tensor:
    """Mean of -log softmax(logits)[target] over rows.

    ``logits`` is (N, V); ``targets`` is a length-N index sequence with every
    entry in [0, V).
    """
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-D (N, V), got shape {tuple(logits.shape)}")
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise ValueError("targets must be a 1-D index list matching logits rows")
    vocab = logits.shape[1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"target index out of range [0, {vocab})")
    return F.cross_entropy(logits, targets)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam over explicit parameter groups.

    Each group is a dict with keys ``params`` (list of tensors), optional
    ``lr_mult`` (default 1.0) and optional ``weight_decay`` override. The
    10x learning-rate group for the identity-initialized pose layer is
    expressed through ``lr_mult``.
    """

    def __init__(
        self,
        groups: Iterable,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.groups: list[dict] = []
        for g in groups:
            if isinstance(g, dict):
                params = list(g["params"])
                lr_mult = float(g.get("lr_mult", 1.0))
                wd = float(g.get("weight_decay", weight_decay))
            else:
                params = list(g)
                lr_mult, wd = 1.0, weight_decay
            self.groups.append({"params": params, "lr_mult": lr_mult, "weight_decay": wd})
        self.params: list[torch.Tensor] = [p for g in self.groups for p in g["params"]]
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.step_count = 0

    @torch.no_grad()
    def step(self, grads: Sequence[torch.Tensor] | None = None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ValueError("got {} grads for {} params".format(len(grads), len(self.params)))
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        i = 0
        for group in self.groups:
            lr = self.lr * group["lr_mult"]
            wd = group["weight_decay"]
            for p in group["params"]:
                g = grads[i]
                if g.shape != p.shape:
                    raise ValueError(f"grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
                m, v = self.m[i], self.v[i]
                m.mul_(b1).add_(g, alpha=1.0 - b1)
                v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
                if wd:
                    p.mul_(1.0 - lr * wd)
                denom = (v / bc2).sqrt_().add_(self.eps)
                p.addcdiv_(m, denom, value=-lr / bc1)
                i += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adamw_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamW) -> None:
    """One AdamW update of ``params`` (must be the tensors held by ``state``)."""
    params = list(params)
    if len(params) != len(state.params) or any(a is not b for a, b in zip(params, state.params)):
        raise ValueError("params do not match the optimizer state")
    state.step(grads)


# ---------------------------------------------------------------------------
# Resizing
# ---------------------------------------------------------------------------


def resize_bchw(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear (align_corners=False) resize of a (B, C, H, W) tensor."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    if x.shape[-2:] == (out_h, out_w):
        return x
    return F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)


def bilinear_resize(grid: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resize of an (H, W, C) map, channels independent."""
    if grid.ndim != 3:
        raise ValueError(f"expected (H, W, C) map, got shape {tuple(grid.shape)}")
    x = grid.permute(2, 0, 1).unsqueeze(0)
    y = resize_bchw(x, out_h, out_w)
    return y.squeeze(0).permute(1, 2, 0)


# ---------------------------------------------------------------------------
# Argmin/argmax with a guaranteed lowest-index tie-break
# ---------------------------------------------------------------------------


def first_argmin(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Index of the minimum along ``dim``; exact ties go to the lowest index."""
    m = x.min(dim=dim, keepdim=True).values
    n = x.shape[dim]
    shape = [1] * x.ndim
    shape[dim] = n
    idx = torch.arange(n, device=x.device).view(shape)
    candidates = torch.where(x == m, idx, torch.full_like(idx, n))
    return candidates.min(dim=dim).values


def first_argmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return first_argmin(-x, dim=dim)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
    coords_per_param: int = 6,
    rng: Rng | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be a deterministic scalar function of ``params``
    (re-evaluated after in-place perturbations). Params must be float64.
    The relative error at a coordinate is |a - n| / max(1e-8, |a| + |n|),
    maximized over up to ``coords_per_param`` coordinates per tensor.
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("grad_check requires float64 parameters")
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise DivergenceError(f"loss is not finite: {loss.item()}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    worst = 0.0
    for pi, (p, g) in enumerate(zip(params, grads)):
        flat = p.data.view(-1)
        n = flat.numel()
        if n == 0:
            continue
        if n <= coords_per_param:
            coords = list(range(n))
        elif rng is not None:
            coords = sorted(rng.child("coords", pi).choice(n, coords_per_param).tolist())
        else:
            coords = sorted(set(np.linspace(0, n - 1, coords_per_param, dtype=int).tolist()))
        gflat = torch.zeros(n, dtype=p.dtype) if g is None else g.reshape(-1)
        for c in coords:
            orig = flat[c].item()
            flat[c] = orig + eps
            f_plus = float(loss_fn())
            flat[c] = orig - eps
            f_minus = float(loss_fn())
            flat[c] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise DivergenceError("non-finite loss during finite differencing")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = float(gflat[c])
            rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, rel)
    return worst
