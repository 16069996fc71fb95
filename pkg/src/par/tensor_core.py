"""Numeric engine: torch-backed kernels, seeded random streams and AdamW.

Everything that touches randomness draws from an :class:`RngStream`, which
derives an independent Philox substream from ``(seed, purpose, *keys)``.
Streams are stateless with respect to call history, so training step ``k``
always sees the same draws whether or not the run was resumed.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractViolation, NumericError

PURPOSES = ("init", "mask-order", "diffusion-noise", "data", "dropout")
_PURPOSE_CODE = {name: i + 1 for i, name in enumerate(PURPOSES)}

TRAIN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


def set_deterministic(flag: bool = True) -> None:
    """Force fixed-order kernels and a fixed worker count."""
    torch.use_deterministic_algorithms(flag)
    threads = int(os.environ.get("PAR_THREADS", "1" if flag else "0") or 0)
    if threads > 0:
        torch.set_num_threads(threads)


def name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    seed: int
    purpose: str

    def __post_init__(self):
        if self.purpose not in _PURPOSE_CODE:
            raise ContractViolation(f"unknown rng purpose {self.purpose!r}; expected one of {PURPOSES}")
        if not 0 <= int(self.seed) < 2**64:
            raise ContractViolation(f"seed must fit in 64 bits, got {self.seed}")

    def generator(self, *keys: int) -> np.random.Generator:
        entropy = [int(self.seed) & 0xFFFFFFFF, int(self.seed) >> 32, _PURPOSE_CODE[self.purpose]]
        entropy += [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def normal(self, shape, *keys: int, dtype=TRAIN_DTYPE) -> torch.Tensor:
        return torch.from_numpy(self.generator(*keys).standard_normal(shape)).to(dtype)

    def uniform(self, shape, *keys: int, low=0.0, high=1.0, dtype=TRAIN_DTYPE) -> torch.Tensor:
        return torch.from_numpy(self.generator(*keys).uniform(low, high, shape)).to(dtype)


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


# --------------------------------------------------------------------------
# kernels

BOUNDARIES = ("zero", "circular")


def _check_boundary(boundary: str) -> None:
    if boundary not in BOUNDARIES:
        raise ContractViolation(f"boundary must be one of {BOUNDARIES}, got {boundary!r}")


def conv2d(x, weight, bias=None, stride=1, padding=0, boundary="zero"):
    """2-D convolution on NCHW input.

    ``boundary="circular"`` wraps the width axis (panorama longitude) and
    zero-pads the height axis.
    """
    _check_boundary(boundary)
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise ContractViolation(f"conv2d shape mismatch: input {tuple(x.shape)}, weight {tuple(weight.shape)}")
    if boundary == "zero" or padding == 0:
        return F.conv2d(x, weight, bias, stride=stride, padding=padding)
    x = F.pad(x, (padding, padding, 0, 0), mode="circular")
    x = F.pad(x, (0, 0, padding, padding))
    return F.conv2d(x, weight, bias, stride=stride)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, boundary="zero"):
    """Transposed convolution; circular mode folds the width overhang back around."""
    _check_boundary(boundary)
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[0]:
        raise ContractViolation(
            f"conv_transpose2d shape mismatch: input {tuple(x.shape)}, weight {tuple(weight.shape)}"
        )
    if boundary == "zero" or padding == 0:
        return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)
    full = F.conv_transpose2d(x, weight, None, stride=stride, padding=(padding, 0))
    width = (x.shape[-1] - 1) * stride + weight.shape[-1] - 2 * padding
    out = full[..., padding : padding + width]
    # full column j lands on output column (j - padding) mod width
    left = full[..., :padding]
    right = full[..., padding + width :]
    if left.shape[-1] > width or right.shape[-1] > width:
        raise ContractViolation("circular transposed conv: padding wider than output")
    out = out + F.pad(left, (width - padding, 0)) + F.pad(right, (0, width - right.shape[-1]))
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


def layer_norm(x, weight=None, bias=None, eps: float = 1e-6):
    """Layer norm over the last axis; a constant vector maps to zeros."""
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def softmax(x, dim: int = -1):
    return torch.softmax(x, dim=dim)


silu = F.silu
gelu = F.gelu


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


class AdamW:
    """AdamW with decoupled weight decay and a linear decay-to-zero schedule.

    Parameters are addressed by name so optimizer moments can be written to
    (and read back from) the checkpoint tensor table.
    """

    def __init__(
        self,
        params: dict[str, torch.nn.Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        horizon: int = 0,
        no_decay: Iterable[str] = (),
    ):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.horizon = horizon
        self.no_decay = set(no_decay)
        self.state = OptimizerState()
        for name, p in self.params.items():
            self.state.exp_avg[name] = torch.zeros_like(p, memory_format=torch.contiguous_format)
            self.state.exp_avg_sq[name] = torch.zeros_like(p, memory_format=torch.contiguous_format)

    def current_lr(self) -> float:
        if self.horizon <= 0:
            return self.lr
        return self.lr * max(0.0, 1.0 - self.state.step / self.horizon)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self) -> float:
        lr = self.current_lr()
        b1, b2 = self.betas
        t = self.state.step + 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            wd = 0.0 if name in self.no_decay else self.weight_decay
            if wd:
                p.mul_(1.0 - lr * wd)
            m = self.state.exp_avg[name]
            v = self.state.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + self.eps))
        self.state.step = t
        return lr


def grad_norm(params: Iterable[torch.Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.double().pow(2).sum())
    return total**0.5


def clip_grad_norm(params: list[torch.Tensor], max_norm: float) -> float:
    norm = grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad.mul_(scale)
    return norm


# --------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_grad(
    fn: Callable[[], torch.Tensor], tensor: torch.Tensor, h: float = 1e-5, indices=None
) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor``.

    ``tensor`` is perturbed in place and restored. Returns the gradient at
    ``indices`` (flat positions), or the full gradient if ``indices`` is None.
    """
    flat = tensor.data.view(-1)
    idx = range(flat.numel()) if indices is None else [int(i) for i in indices]
    out = []
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(fn())
            flat[i] = orig - h
            fm = float(fn())
            flat[i] = orig
            out.append((fp - fm) / (2 * h))
    res = torch.tensor(out, dtype=torch.float64)
    return res.view(tensor.shape) if indices is None else res


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    a = a.double().reshape(-1)
    b = b.double().reshape(-1)
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom
