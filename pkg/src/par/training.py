"""Masked diffusion loss, cyclic-shift consistency loss and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .errors import ContractViolation, NumericError
from .model import PARModel, patchify, shift_tokens
from .tensor_core import AdamW, RngStream, check_finite, clip_grad_norm

log = logging.getLogger(__name__)


class NoiseSchedule:
    """Cosine cumulative-alpha schedule over ``T`` discrete steps (index 0 = least noise)."""

    def __init__(self, T: int = 1000, offset: float = 0.008, max_beta: float = 0.999):
        if T < 1:
            raise ContractViolation(f"schedule needs T >= 1, got {T}")
        self.T = T

        def f(s):
            return math.cos((s / T + offset) / (1 + offset) * math.pi / 2) ** 2

        betas = np.array([min(1 - f(i + 1) / f(i), max_beta) for i in range(T)])
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alphas_cumprod = np.cumprod(self.alphas)

    def q_sample(self, x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        ab = torch.from_numpy(self.alphas_cumprod).to(x0.dtype)[t]
        while ab.dim() < x0.dim():
            ab = ab[..., None]
        return ab.sqrt() * x0 + (1 - ab).sqrt() * noise

    def respaced(self, steps: int) -> tuple[np.ndarray, np.ndarray]:
        """Timesteps used by a ``steps``-long sampler and their ancestral betas.

        The timesteps are an evenly strided subset of ``0..T-1`` that always
        contains both ends; ``steps == T`` gives back the full schedule.
        """
        if not 1 <= steps <= self.T:
            raise ContractViolation(f"denoise steps must be in [1, {self.T}], got {steps}")
        ts = np.unique(np.round(np.linspace(0, self.T - 1, steps)).astype(np.int64))
        ab = self.alphas_cumprod[ts]
        prev = np.concatenate([[1.0], ab[:-1]])
        return ts, 1.0 - ab / prev


# --------------------------------------------------------------------------
# batches


def sample_mask(gen: np.random.Generator, batch: int, n: int, ratio_range=(0.7, 1.0)) -> torch.Tensor:
    """``(batch, n)`` float mask, 1 = hidden; ratio ~ U(range), positions uniform."""
    lo, hi = ratio_range
    if not 0 < lo <= hi <= 1:
        raise ContractViolation(f"mask ratio range must lie in (0, 1], got {ratio_range}")
    if round(hi * n) == 0:
        raise ContractViolation(f"mask ratio range {ratio_range} always rounds to 0 of {n} positions")
    mask = np.zeros((batch, n), dtype=np.float32)
    for b in range(batch):
        count = 0
        while count == 0:
            count = int(round(gen.uniform(lo, hi) * n))
        mask[b, gen.permutation(n)[:count]] = 1.0
    return torch.from_numpy(mask)


@dataclass
class TrainBatch:
    tokens: torch.Tensor  # (B, N, C) clean tokens
    mask: torch.Tensor  # (B, N), 1 = hidden
    noise: torch.Tensor  # (B, N, C)
    t: torch.Tensor  # (B, N) long
    x_t: torch.Tensor  # (B, N, C)
    wp: int  # tokens per grid row
    shifts: torch.Tensor | None = None  # (B,) token-column shifts for the consistency branch


def make_noised_batch(
    model: PARModel, latents: torch.Tensor, schedule: NoiseSchedule, seed: int, key: int, mask_ratio=(0.7, 1.0)
) -> TrainBatch:
    p = model.cfg.patch
    tokens = patchify(latents, p)
    b, n, c = tokens.shape
    mask = sample_mask(RngStream(seed, "mask-order").generator(key), b, n, mask_ratio)
    gen = RngStream(seed, "diffusion-noise").generator(key)
    noise = torch.from_numpy(gen.standard_normal((b, n, c))).to(tokens.dtype)
    t = torch.from_numpy(gen.integers(0, schedule.T, (b, n)))
    x_t = schedule.q_sample(tokens, t, noise)
    return TrainBatch(tokens, mask.to(tokens.dtype), noise, t, x_t, model.cfg.grid[1])


def _shift_each(x: torch.Tensor, shifts: torch.Tensor, wp: int) -> torch.Tensor:
    return torch.cat([shift_tokens(x[i : i + 1], int(shifts[i]), wp) for i in range(x.shape[0])])


def shifted(batch: TrainBatch, shifts: torch.Tensor) -> TrainBatch:
    """Apply the cyclic translation to (x, noise, mask, t) of every sample."""
    s = lambda x: _shift_each(x, shifts, batch.wp)  # noqa: E731
    return TrainBatch(s(batch.tokens), s(batch.mask), s(batch.noise), s(batch.t), s(batch.x_t), batch.wp, shifts)


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    denom = mask.sum() * pred.shape[-1]
    if float(denom) == 0:
        raise ContractViolation("mask selects no positions")
    return (mask[..., None] * (pred - target) ** 2).sum() / denom


def loss_va(model: PARModel, batch: TrainBatch, cond: torch.Tensor) -> torch.Tensor:
    """Masked denoising loss, averaged over hidden elements only."""
    pred = model(batch.tokens, batch.mask, cond, batch.x_t, batch.t)
    return masked_mse(pred, batch.noise, batch.mask)


def _check_shift(v: int, patch: int) -> int:
    if v % patch:
        raise ContractViolation(f"shift {v} latent columns is not a multiple of the patch width {patch}")
    return v // patch


def consistency_residual(model: PARModel, batch: TrainBatch, cond: torch.Tensor, v: int) -> torch.Tensor:
    """Consistency loss for a single shift of ``v`` latent columns (all samples)."""
    shifts = torch.full((batch.tokens.shape[0],), _check_shift(int(v), model.cfg.patch), dtype=torch.long)
    _, _, l_cons = paired_losses(model, batch, cond, shifts)
    return l_cons


def paired_losses(model: PARModel, batch: TrainBatch, cond: torch.Tensor, shifts: torch.Tensor):
    """Run original and shifted branches in one forward pass.

    Returns ``(pred, l_va, l_cons)``. Both branches use the model's single
    position table, share timesteps, and the shifted branch sees shifted noise.
    """
    other = shifted(batch, shifts)
    b = batch.tokens.shape[0]
    pred_all = model(
        torch.cat([batch.tokens, other.tokens]),
        torch.cat([batch.mask, other.mask]),
        torch.cat([cond, cond]),
        torch.cat([batch.x_t, other.x_t]),
        torch.cat([batch.t, other.t]),
    )
    pred, pred_shifted = pred_all[:b], pred_all[b:]
    l_va = masked_mse(pred, batch.noise, batch.mask)
    l_cons = masked_mse(_shift_each(pred, shifts, batch.wp), pred_shifted, other.mask)
    return pred, l_va, l_cons


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.95
    lam: float = 0.1
    p_uncond: float = 0.1
    mask_ratio_min: float = 0.7
    mask_ratio_max: float = 1.0
    grad_clip: float = 1.0
    diffusion_steps: int = 1000
    seed: int = 0
    log_every: int = 50


@dataclass
class TrainLog:
    lines: list[str] = field(default_factory=list)
    loss_va: list[float] = field(default_factory=list)
    loss_cons: list[float] = field(default_factory=list)

    def record(self, step, l_va, l_cons, lr, gnorm) -> str:
        line = f"{step}, {l_va:.6g}, {l_cons:.6g}, {lr:.6g}, {gnorm:.6g}"
        self.lines.append(line)
        self.loss_va.append(l_va)
        self.loss_cons.append(l_cons)
        return line


def make_optimizer(model: PARModel, cfg: TrainConfig) -> AdamW:
    params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    no_decay = [n for n, p in params.items() if p.dim() < 2 or n in ("mask_token", "text.null", "text.table")]
    return AdamW(
        params,
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
        horizon=cfg.steps,
        no_decay=no_decay,
    )


def training_step_inputs(model: PARModel, latents, prompts, cfg: TrainConfig, schedule: NoiseSchedule, step: int):
    """Deterministic inputs for ``step``: batch, condition prompts, shifts."""
    n = latents.shape[0]
    data_gen = RngStream(cfg.seed, "data").generator(step)
    idx = data_gen.integers(0, n, size=cfg.batch_size)
    wp = model.cfg.grid[1]
    shifts = torch.from_numpy(data_gen.integers(1, wp, size=cfg.batch_size)) if wp > 1 else torch.zeros(cfg.batch_size, dtype=torch.long)
    batch = make_noised_batch(
        model, latents[idx], schedule, cfg.seed, key=step,
        mask_ratio=(cfg.mask_ratio_min, cfg.mask_ratio_max),
    )
    drop = RngStream(cfg.seed, "dropout").generator(step).uniform(size=cfg.batch_size) < cfg.p_uncond
    batch_prompts = [[] if drop[j] else list(prompts[i]) for j, i in enumerate(idx)]
    return batch, batch_prompts, shifts


def train(
    model: PARModel,
    latents: torch.Tensor,
    prompts: list[list[int]],
    cfg: TrainConfig,
    optimizer: AdamW | None = None,
    start_step: int = 0,
    stop_step: int | None = None,
    log_fn: Callable[[str], None] | None = None,
    checkpoint_fn: Callable[[int, AdamW], None] | None = None,
    checkpoint_every: int = 0,
) -> tuple[AdamW, TrainLog]:
    """Minimise ``L_va + lam * L_cons`` with AdamW.

    ``latents`` are normalised ``(N, C, h, w)``; ``prompts`` holds the
    vocabulary token ids of each item. Every random draw is keyed by the
    step index, so resuming from ``start_step`` with the saved optimizer
    reproduces an uninterrupted run exactly.
    """
    schedule = NoiseSchedule(cfg.diffusion_steps)
    optimizer = optimizer or make_optimizer(model, cfg)
    params = list(optimizer.params.values())
    history = TrainLog()
    stop = cfg.steps if stop_step is None else stop_step
    model.train()
    last_good = start_step
    for step in range(start_step, stop):
        batch, batch_prompts, shifts = training_step_inputs(model, latents, prompts, cfg, schedule, step)
        cond = model.embed_text(batch_prompts)
        _, l_va, l_cons = paired_losses(model, batch, cond, shifts)
        loss = l_va + cfg.lam * l_cons
        if not torch.isfinite(loss):
            raise NumericError(f"loss became non-finite at step {step}; last good checkpoint at step {last_good}")
        optimizer.zero_grad()
        loss.backward()
        gnorm = clip_grad_norm(params, cfg.grad_clip)
        lr = optimizer.step()
        line = history.record(step, l_va.item(), l_cons.item(), lr, gnorm)
        if log_fn is not None:
            log_fn(line)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %s", line)
        if checkpoint_fn is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            checkpoint_fn(step + 1, optimizer)
            last_good = step + 1
    model.eval()
    return optimizer, history


def total_loss(model: PARModel, batch: TrainBatch, cond: torch.Tensor, shifts: torch.Tensor, lam: float):
    _, l_va, l_cons = paired_losses(model, batch, cond, shifts)
    return check_finite(l_va + lam * l_cons, "total loss")
