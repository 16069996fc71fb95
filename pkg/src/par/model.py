"""Masked autoregressive backbone with a per-token diffusion MLP head.

Flow: latent grid -> patchify -> encoder over the visible tokens plus a
prepended condition token -> decoder over the full sequence with [MASK]
embeddings at hidden slots -> conditioning vectors ``z`` -> AdaLN-Zero MLP
that predicts the noise of each hidden token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ContractViolation
from .tensor_core import RngStream, gelu, layer_norm, name_key, silu, softmax


def patchify(lat: torch.Tensor, p: int) -> torch.Tensor:
    """``(B, C, h, w)`` -> ``(B, (h/p)(w/p), C p^2)``, tokens in row-major grid order."""
    b, c, h, w = lat.shape
    if h % p or w % p:
        raise ContractViolation(f"latent {h}x{w} not divisible by patch size {p}")
    x = lat.reshape(b, c, h // p, p, w // p, p)
    x = torch.einsum("nchpwq->nhwcpq", x)
    return x.reshape(b, (h // p) * (w // p), c * p * p)


def unpatchify(tokens: torch.Tensor, p: int, c: int, hp: int, wp: int) -> torch.Tensor:
    b, n, dim = tokens.shape
    if n != hp * wp or dim != c * p * p:
        raise ContractViolation(f"token tensor {tuple(tokens.shape)} does not match grid {hp}x{wp}, C={c}, p={p}")
    x = tokens.reshape(b, hp, wp, c, p, p)
    x = torch.einsum("nhwcpq->nchpwq", x)
    return x.reshape(b, c, hp * p, wp * p)


def shift_tokens(x: torch.Tensor, v: int, wp: int) -> torch.Tensor:
    """Cyclic column shift of a token sequence ``(B, hp*wp, ...)`` laid out row-major."""
    b, n = x.shape[:2]
    grid = x.reshape(b, n // wp, wp, *x.shape[2:])
    return torch.roll(grid, shifts=int(v) % wp, dims=2).reshape(x.shape)


def sincos_2d(h: int, w: int, d: int) -> np.ndarray:
    """Fixed 2-D sine-cosine position table ``(h*w, d)``."""
    if d % 4:
        raise ContractViolation(f"position encoding width must be divisible by 4, got {d}")

    def one_axis(pos, dim):
        omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.concatenate([one_axis(gy, d // 2), one_axis(gx, d // 2)], axis=1)


class PosEncoding(nn.Module):
    def __init__(self, h: int, w: int, d: int):
        super().__init__()
        self.h, self.w, self.d = h, w, d
        self.register_buffer("table", torch.from_numpy(sincos_2d(h, w, d)).float(), persistent=False)

    def forward(self) -> torch.Tensor:
        return self.table


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


# --------------------------------------------------------------------------
# transformer pieces


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ContractViolation(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)

    def weights(self, x, key_keep=None):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // self.heads)
        if key_keep is not None:
            scores = scores.masked_fill(~key_keep[:, None, None, :], float("-inf"))
        return softmax(scores, dim=-1), v

    def forward(self, x, key_keep=None):
        b, n, d = x.shape
        attn, v = self.weights(x, key_keep)
        return self.proj((attn @ v).transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d, eps=1e-6)
        self.attn = Attention(d, heads)
        self.norm2 = nn.LayerNorm(d, eps=1e-6)
        hidden = int(d * mlp_ratio)
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, x, key_keep=None):
        x = x + self.attn(self.norm1(x), key_keep)
        return x + self.fc2(gelu(self.fc1(self.norm2(x))))


class TextEmbedder(nn.Module):
    """Mean of learned token embeddings, projected; empty prompt -> learned null vector."""

    def __init__(self, vocab_size: int, d: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.table = nn.Parameter(torch.zeros(vocab_size, d))
        self.proj = nn.Linear(d, d)
        self.null = nn.Parameter(torch.zeros(d))

    def forward(self, prompts: list[list[int]]) -> torch.Tensor:
        out = []
        for ids in prompts:
            ids = list(ids)
            if not ids:
                out.append(self.null)
                continue
            bad = [i for i in ids if not 0 <= int(i) < self.vocab_size]
            if bad:
                raise ContractViolation(f"prompt token ids {bad} outside vocabulary of size {self.vocab_size}")
            out.append(self.proj(self.table[torch.tensor(ids)].mean(dim=0)))
        return torch.stack(out)


# --------------------------------------------------------------------------
# diffusion head


class HeadBlock(nn.Module):
    """AdaLN-Zero gating, linear-silu-linear projection, LN, gate, residual."""

    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)
        self.ada = nn.Linear(width, 3 * width)

    def forward(self, x, c):
        shift, scale, gate = self.ada(silu(c)).chunk(3, dim=-1)
        h = layer_norm(x) * (1 + scale) + shift
        h = self.fc2(silu(self.fc1(h)))
        return x + gate * layer_norm(h)


class DiffusionHead(nn.Module):
    def __init__(self, token_dim: int, z_dim: int, width: int = 128, depth: int = 3, freq_dim: int = 64):
        super().__init__()
        self.freq_dim = freq_dim
        self.t_fc1 = nn.Linear(freq_dim, width)
        self.t_fc2 = nn.Linear(width, width)
        self.z_proj = nn.Linear(z_dim, width)
        self.in_proj = nn.Linear(token_dim, width)
        self.blocks = nn.ModuleList([HeadBlock(width) for _ in range(depth)])
        self.final_ada = nn.Linear(width, 2 * width)
        self.out = nn.Linear(width, token_dim)

    def condition(self, t, z):
        temb = timestep_embedding(t, self.freq_dim).to(z.dtype)
        return self.t_fc2(silu(self.t_fc1(temb))) + self.z_proj(z)

    def forward(self, x_t, t, z):
        """Predict the noise in ``x_t`` (M, token_dim) at timesteps ``t`` (M,) given ``z`` (M, d)."""
        c = self.condition(t, z)
        h = self.in_proj(x_t)
        for blk in self.blocks:
            h = blk(h, c)
        shift, scale = self.final_ada(silu(c)).chunk(2, dim=-1)
        return self.out(layer_norm(h) * (1 + scale) + shift)


# --------------------------------------------------------------------------
# full model


@dataclass
class ModelConfig:
    latent_channels: int = 8
    latent_h: int = 8
    latent_w: int = 16
    patch: int = 1
    d: int = 128
    enc_depth: int = 4
    dec_depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    head_width: int = 128
    head_depth: int = 3
    vocab_size: int = 18

    @property
    def token_dim(self) -> int:
        return self.latent_channels * self.patch**2

    @property
    def grid(self) -> tuple[int, int]:
        return self.latent_h // self.patch, self.latent_w // self.patch


class PARModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        hp, wp = cfg.grid
        if cfg.latent_h % cfg.patch or cfg.latent_w % cfg.patch:
            raise ContractViolation(f"latent {cfg.latent_h}x{cfg.latent_w} not divisible by patch {cfg.patch}")
        d = cfg.d
        self.text = TextEmbedder(cfg.vocab_size, d)
        self.pos = PosEncoding(hp, wp, d)
        self.z_proj = nn.Linear(cfg.token_dim, d)
        self.enc_blocks = nn.ModuleList([Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.enc_depth)])
        self.enc_norm = nn.LayerNorm(d, eps=1e-6)
        self.dec_embed = nn.Linear(d, d)
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.dec_blocks = nn.ModuleList([Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.dec_depth)])
        self.dec_norm = nn.LayerNorm(d, eps=1e-6)
        self.head = DiffusionHead(cfg.token_dim, d, cfg.head_width, cfg.head_depth)

    @property
    def seq_len(self) -> int:
        hp, wp = self.cfg.grid
        return hp * wp

    def reset_parameters(self, rng: RngStream) -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                gen = rng.generator(name_key(name))
                if name in ("mask_token", "text.null", "text.table"):
                    p.copy_(torch.from_numpy(gen.normal(0.0, 0.02, tuple(p.shape))))
                elif p.dim() == 1:
                    p.fill_(1.0 if _is_norm_weight(name) else 0.0)
                else:
                    fan_out, fan_in = p.shape
                    bound = math.sqrt(6.0 / (fan_in + fan_out))
                    p.copy_(torch.from_numpy(gen.uniform(-bound, bound, tuple(p.shape))))
            # AdaLN-Zero: every head block starts as the identity, output starts at 0
            for name, p in self.named_parameters():
                if ".ada." in name or name.startswith(("head.final_ada.", "head.out.")):
                    p.zero_()

    def embed_text(self, prompts: list[list[int]]) -> torch.Tensor:
        return self.text(prompts)

    def null_condition(self, batch: int) -> torch.Tensor:
        return self.text.null.expand(batch, -1)

    def backbone(self, tokens: torch.Tensor, mask: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """Return ``z`` of shape ``(B, N, d)`` for every position.

        ``mask`` is ``(B, N)`` with 1 at positions to generate. Only visible
        tokens (and the condition token) act as attention keys in the encoder.
        """
        if tokens.dim() != 3 or tokens.shape[1] == 0:
            raise ContractViolation(f"backbone needs a non-empty (B, N, C) token tensor, got {tuple(tokens.shape)}")
        b, n, _ = tokens.shape
        if n != self.seq_len:
            raise ContractViolation(f"expected {self.seq_len} tokens, got {n}")
        hidden = mask.bool()
        pe = self.pos().to(tokens.dtype)
        x = self.z_proj(tokens) + pe
        seq = torch.cat([cond[:, None, :].to(x.dtype), x], dim=1)
        keep = torch.cat([torch.ones(b, 1, dtype=torch.bool), ~hidden], dim=1)
        for blk in self.enc_blocks:
            seq = blk(seq, keep)
        seq = self.dec_embed(self.enc_norm(seq))
        tok = torch.where(hidden[..., None], self.mask_token.to(seq.dtype), seq[:, 1:]) + pe
        seq = torch.cat([seq[:, :1], tok], dim=1)
        for blk in self.dec_blocks:
            seq = blk(seq)
        return self.dec_norm(seq)[:, 1:]

    def forward(self, tokens, mask, cond, x_t, t):
        """Noise prediction ``(B, N, C)`` for noised tokens ``x_t`` at per-token steps ``t``."""
        z = self.backbone(tokens, mask, cond)
        b, n, c = x_t.shape
        eps = self.head(x_t.reshape(b * n, c), t.reshape(b * n), z.reshape(b * n, -1))
        return eps.reshape(b, n, c)


def _is_norm_weight(name: str) -> bool:
    return name.endswith(".weight") and ("norm" in name.split(".")[-2])


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
