"""Small convolutional autoencoder with dual-space circular padding.

Pre-padding wraps the image in pixel space before encoding; post-padding
wraps the latent before decoding. In both cases the columns produced from the
padding are cropped away afterwards.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .erp import circular_pad, cyclic_shift, pad_width
from .errors import ContractViolation, NumericError
from .tensor_core import AdamW, RngStream, conv2d, conv_transpose2d, silu

log = logging.getLogger(__name__)


class _Conv(nn.Module):
    def __init__(self, cin, cout, k, stride=1, padding=0, transposed=False):
        super().__init__()
        shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
        self.weight = nn.Parameter(torch.zeros(shape))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.stride = stride
        self.padding = padding
        self.transposed = transposed

    def forward(self, x, boundary):
        op = conv_transpose2d if self.transposed else conv2d
        return op(x, self.weight, self.bias, self.stride, self.padding, boundary)


class LatentCodec(nn.Module):
    def __init__(self, channels=(16, 32, 64), latent_channels: int = 8, boundary: str = "zero", latent_kernel: int = 1):
        super().__init__()
        if latent_kernel not in (1, 3):
            raise ContractViolation(f"latent_kernel must be 1 or 3, got {latent_kernel}")
        lk, lp = latent_kernel, latent_kernel // 2
        c1, c2, c3 = channels
        self.boundary = boundary
        self.latent_channels = latent_channels
        self.stride = 8
        self.enc = nn.ModuleList(
            [
                _Conv(3, c1, 3, 1, 1),
                _Conv(c1, c1, 4, 2, 1),
                _Conv(c1, c2, 4, 2, 1),
                _Conv(c2, c3, 4, 2, 1),
                _Conv(c3, latent_channels, lk, 1, lp),
            ]
        )
        self.dec = nn.ModuleList(
            [
                _Conv(latent_channels, c3, lk, 1, lp),
                _Conv(c3, c2, 4, 2, 1, transposed=True),
                _Conv(c2, c1, 4, 2, 1, transposed=True),
                _Conv(c1, c1, 4, 2, 1, transposed=True),
                _Conv(c1, 3, 3, 1, 1),
            ]
        )
        self.register_buffer("latent_mean", torch.zeros(latent_channels))
        self.register_buffer("latent_std", torch.ones(latent_channels))

    def reset_parameters(self, rng: RngStream) -> None:
        for i, layer in enumerate(list(self.enc) + list(self.dec)):
            w = layer.weight
            fan_in = w.shape[0 if layer.transposed else 1] * w.shape[2] * w.shape[3]
            if layer.transposed:
                fan_in //= layer.stride**2
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                w.copy_(rng.uniform(tuple(w.shape), i, low=-bound, high=bound, dtype=w.dtype) * 0.5)
                layer.bias.zero_()

    # raw transforms, no padding logic ------------------------------------

    def encode_raw(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.enc):
            x = layer(x, self.boundary)
            if i < len(self.enc) - 1:
                x = silu(x)
        return x

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.dec):
            z = layer(z, self.boundary)
            if i < len(self.dec) - 1:
                z = silu(z)
        return z

    # padded transforms ------------------------------------------------------

    def _check_image(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ContractViolation(f"expected (N, 3, H, W) images, got {tuple(x.shape)}")
        H, W = x.shape[-2:]
        if H % self.stride or W % self.stride:
            raise ContractViolation(f"image {H}x{W} not divisible by codec stride {self.stride}")
        if W != 2 * H:
            raise ContractViolation(f"ERP image must have W = 2H, got {H}x{W}")

    def encode(self, x: torch.Tensor, r_pre: float = 0.0) -> torch.Tensor:
        """Pixel images ``(N, 3, H, W)`` to latents ``(N, C, H/8, W/8)`` (unnormalised)."""
        self._check_image(x)
        k = pad_width(r_pre, x.shape[-1])
        if k % self.stride:
            raise ContractViolation(
                f"pre-padding of {k} px (r_pre={r_pre}, W={x.shape[-1]}) is not a multiple of stride {self.stride}"
            )
        z = self.encode_raw(circular_pad(x, r_pre))
        kz = k // self.stride
        return z[..., kz : z.shape[-1] - kz]

    def decode(self, z: torch.Tensor, r_post: float = 0.0) -> torch.Tensor:
        """Latents ``(N, C, h, w)`` to pixel images ``(N, 3, 8h, 8w)``."""
        if z.dim() != 4 or z.shape[1] != self.latent_channels:
            raise ContractViolation(f"expected (N, {self.latent_channels}, h, w) latents, got {tuple(z.shape)}")
        k = pad_width(r_post, z.shape[-1])
        x = self.decode_raw(circular_pad(z, r_post))
        kx = k * self.stride
        return x[..., kx : x.shape[-1] - kx]

    def normalize(self, z: torch.Tensor) -> torch.Tensor:
        return (z - self.latent_mean.view(1, -1, 1, 1)) / self.latent_std.view(1, -1, 1, 1)

    def denormalize(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.latent_std.view(1, -1, 1, 1) + self.latent_mean.view(1, -1, 1, 1)

    @torch.no_grad()
    def fit_latent_stats(self, images: torch.Tensor, r_pre: float) -> None:
        z = self.encode(images, r_pre).double()
        self.latent_mean.copy_(z.mean(dim=(0, 2, 3)).to(self.latent_mean.dtype))
        self.latent_std.copy_(z.std(dim=(0, 2, 3)).clamp_min(1e-6).to(self.latent_std.dtype))


def images_to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(N, H, W, 3)`` floats in [0, 1] to ``(N, 3, H, W)`` tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2))).to(dtype)


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    return x.detach().clamp(0, 1).permute(0, 2, 3, 1).cpu().numpy()


@dataclass
class CodecReport:
    steps: int
    initial_mse: float
    final_mse: float
    threshold: float

    @property
    def psnr(self) -> float:
        return 10 * math.log10(1.0 / max(self.final_mse, 1e-12))

    @property
    def converged(self) -> bool:
        return self.final_mse < self.threshold


def reconstruction_mse(codec: LatentCodec, images: torch.Tensor, r: float = 0.0) -> float:
    with torch.no_grad():
        return float(((codec.decode(codec.encode(images, r), r) - images) ** 2).mean())


def train_codec(
    codec: LatentCodec,
    images: torch.Tensor,
    steps: int,
    rng: RngStream,
    batch_size: int = 8,
    lr: float = 2e-3,
    threshold: float = 2e-3,
    log_every: int = 200,
) -> CodecReport:
    """Overfit the autoencoder on ``images`` (N, 3, H, W) with random cyclic shifts."""
    n = images.shape[0]
    if n == 0:
        raise ContractViolation("codec training set is empty")
    initial = reconstruction_mse(codec, images)
    opt = AdamW(dict(codec.named_parameters()), lr=lr, betas=(0.9, 0.99), horizon=steps)
    W = images.shape[-1]
    codec.train()
    for step in range(steps):
        gen = rng.generator(step)
        idx = gen.integers(0, n, size=min(batch_size, n))
        shift = int(gen.integers(0, W))
        x = cyclic_shift(images[idx], shift)
        loss = ((codec.decode_raw(codec.encode_raw(x)) - x) ** 2).mean()
        if not torch.isfinite(loss):
            raise NumericError(f"codec training diverged at step {step} (loss {float(loss)}, lr {opt.current_lr():.3g})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and step % log_every == 0:
            log.info("codec step %d mse %.6f", step, loss.item())
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    return CodecReport(steps, initial, reconstruction_mse(codec, images), threshold)
