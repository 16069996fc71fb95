"""Masked autoregressive sampling with known tokens and per-token diffusion.

Text-to-panorama, outpainting and editing all go through :func:`generate`;
they differ only in which latent tokens are known up front.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .codec import LatentCodec, images_to_tensor, tensor_to_images
from .errors import ContractViolation
from .model import PARModel, patchify, unpatchify
from .tensor_core import RngStream
from .training import NoiseSchedule

log = logging.getLogger(__name__)

SCHEDULES = ("uniform", "cosine")


@dataclass(frozen=True)
class SamplerSettings:
    steps: int = 64
    denoise_steps: int = 25
    cfg_weight: float = 5.0
    schedule: str = "uniform"
    seed: int = 0
    diffusion_steps: int = 1000
    clip_x0: float | None = 5.0


@dataclass
class GenerationPlan:
    groups: list[np.ndarray]
    seed: int
    cfg_weight: float = 5.0
    denoise_steps: int = 25
    schedule: str = "uniform"
    clip_x0: float | None = 5.0

    @property
    def steps(self) -> int:
        return len(self.groups)

    @property
    def positions(self) -> np.ndarray:
        return np.concatenate(self.groups) if self.groups else np.zeros(0, dtype=np.int64)

    def to_text(self) -> str:
        lines = [
            f"seed={self.seed}",
            f"schedule={self.schedule}",
            f"steps={self.steps}",
            f"denoise_steps={self.denoise_steps}",
            f"cfg_weight={self.cfg_weight}",
            f"clip_x0={self.clip_x0}",
        ]
        lines += [f"group{i}=" + " ".join(str(int(p)) for p in g) for i, g in enumerate(self.groups)]
        return "\n".join(lines) + "\n"


def group_sizes(n: int, steps: int, schedule: str = "uniform") -> list[int]:
    """Sizes of the ``min(steps, n)`` groups that split ``n`` positions."""
    if schedule not in SCHEDULES:
        raise ContractViolation(f"unknown group schedule {schedule!r}; expected one of {SCHEDULES}")
    if steps < 1:
        raise ContractViolation(f"steps must be >= 1, got {steps}")
    s = min(steps, n)
    if schedule == "uniform":
        base, extra = divmod(n, s)
        return [base] * (s - extra) + [base + 1] * extra
    # one token per step, the remainder spread by the increments of 1 - cos(pi/2 * s/S)
    rest = n - s
    cum = [round(rest * (1 - math.cos(math.pi / 2 * i / s))) for i in range(s + 1)]
    cum[-1] = rest
    return sorted(1 + cum[i + 1] - cum[i] for i in range(s))


def make_plan(
    unknown, steps: int, schedule: str = "uniform", seed: int = 0, cfg_weight: float = 5.0, denoise_steps: int = 25,
    clip_x0: float | None = 5.0,
) -> GenerationPlan:
    """Random order over the unknown positions, cut into groups."""
    unknown = np.asarray(unknown, dtype=np.int64).ravel()
    if unknown.size == 0:
        raise ContractViolation("no unknown positions: nothing to generate")
    if len(np.unique(unknown)) != unknown.size:
        raise ContractViolation("unknown positions contain duplicates")
    order = RngStream(seed, "mask-order").generator(0xA5).permutation(unknown)
    sizes = group_sizes(unknown.size, steps, schedule)
    bounds = np.cumsum([0] + sizes)
    groups = [np.sort(order[bounds[i] : bounds[i + 1]]) for i in range(len(sizes))]
    return GenerationPlan(groups, seed, cfg_weight, denoise_steps, schedule, clip_x0)


# --------------------------------------------------------------------------
# per-token denoising


def guide(eps_c: torch.Tensor, eps_u: torch.Tensor | None, w: float) -> torch.Tensor:
    if w == 1 or eps_u is None:
        return eps_c
    return eps_u + w * (eps_c - eps_u)


def token_noise(seed: int, sample: int, positions, steps: int, c: int) -> torch.Tensor:
    """``(steps + 1, len(positions), c)`` normals, one substream per (sample, position)."""
    stream = RngStream(seed, "diffusion-noise")
    draws = [stream.generator(sample, int(p)).standard_normal((steps + 1, c)) for p in positions]
    return torch.from_numpy(np.stack(draws, axis=1))


@torch.no_grad()
def denoise(
    head,
    z_c: torch.Tensor,
    z_u: torch.Tensor | None,
    schedule: NoiseSchedule,
    steps: int,
    w: float,
    noise: torch.Tensor,
    clip_x0: float | None = None,
) -> torch.Tensor:
    """Ancestral sampling of ``M`` tokens given their conditions ``z`` (M, d).

    ``noise`` is ``(steps + 1, M, C)``: the first slice is the starting
    point, the rest are the per-step perturbations. Each step forms the x0
    estimate from the guided noise prediction (optionally clipped to
    ``[-clip_x0, clip_x0]``) and moves to the posterior mean of the previous
    kept timestep.
    """
    ts, betas = schedule.respaced(steps)
    ab_all = schedule.alphas_cumprod
    dtype = z_c.dtype
    x = noise[0].to(dtype)
    m = x.shape[0]
    guided = z_u is not None and w != 1
    z = torch.cat([z_c, z_u]) if guided else z_c
    for i in range(len(ts) - 1, -1, -1):
        t = torch.full((z.shape[0],), int(ts[i]), dtype=torch.long)
        eps = head(torch.cat([x, x]) if guided else x, t, z)
        eps = guide(eps[:m], eps[m:], w) if guided else eps
        beta = float(betas[i])
        ab = float(ab_all[ts[i]])
        ab_prev = float(ab_all[ts[i - 1]]) if i > 0 else 1.0
        x0 = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
        if clip_x0 is not None:
            x0 = x0.clamp(-clip_x0, clip_x0)
        if i == 0:
            x = x0
            break
        x = (math.sqrt(ab_prev) * beta / (1 - ab)) * x0 + (math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)) * x
        var = beta * (1 - ab_prev) / (1 - ab)
        x = x + math.sqrt(var) * noise[len(ts) - i].to(dtype)
    return x


# --------------------------------------------------------------------------
# generation


@dataclass
class GenerationResult:
    latents: torch.Tensor  # (B, C, h, w) normalised
    known: torch.Tensor  # (N,) bool token mask
    plan: GenerationPlan | None
    model_calls: int = 0
    extra: dict = field(default_factory=dict)


def _token_mask(model: PARModel, known_mask) -> torch.Tensor:
    n = model.seq_len
    if known_mask is None:
        return torch.zeros(n, dtype=torch.bool)
    m = torch.as_tensor(np.asarray(known_mask)).bool()
    if m.dim() == 2:
        if tuple(m.shape) != model.cfg.grid:
            raise ContractViolation(f"known mask {tuple(m.shape)} does not match token grid {model.cfg.grid}")
        m = m.reshape(-1)
    if m.numel() != n:
        raise ContractViolation(f"known mask has {m.numel()} entries, token grid has {n}")
    return m


@torch.no_grad()
def generate(
    model: PARModel,
    prompts: list[list[int]],
    settings: SamplerSettings,
    known: torch.Tensor | None = None,
    known_mask=None,
    plan: GenerationPlan | None = None,
) -> GenerationResult:
    """Fill every unknown token of ``B = len(prompts)`` latent grids.

    ``known`` is a normalised latent ``(B, C, h, w)`` and ``known_mask`` a
    boolean token mask (grid or flat). Known tokens are copied through and
    never written.
    """
    model.eval()
    cfg = model.cfg
    hp, wp = cfg.grid
    b = len(prompts)
    if b == 0:
        raise ContractViolation("generate needs at least one prompt")
    keep = _token_mask(model, known_mask)
    if keep.any() and known is None:
        raise ContractViolation("known mask given without known latent values")
    if known is not None:
        expected = (b, cfg.latent_channels, cfg.latent_h, cfg.latent_w)
        if tuple(known.shape) != expected:
            raise ContractViolation(f"known latents {tuple(known.shape)} do not match {expected}")
        tokens = patchify(known, cfg.patch).clone()
    else:
        tokens = torch.zeros(b, model.seq_len, cfg.token_dim)
    unknown = torch.nonzero(~keep).flatten().numpy()
    if unknown.size == 0:
        return GenerationResult(known.clone(), keep, None, 0)

    if plan is None:
        plan = make_plan(
            unknown, settings.steps, settings.schedule, settings.seed, settings.cfg_weight, settings.denoise_steps, settings.clip_x0
        )
    elif not np.array_equal(np.sort(plan.positions), np.sort(unknown)):
        raise ContractViolation("plan groups do not partition the unknown token positions")

    schedule = NoiseSchedule(settings.diffusion_steps)
    cond = model.embed_text(prompts)
    null = model.null_condition(b)
    guided = plan.cfg_weight != 1
    hidden = (~keep).to(tokens.dtype).expand(b, -1).clone()
    calls = 0
    c = cfg.token_dim
    for group in plan.groups:
        # z is recomputed for the current visible set at every step
        if guided:
            z = model.backbone(torch.cat([tokens, tokens]), torch.cat([hidden, hidden]), torch.cat([cond, null]))
            z_c, z_u = z[:b, group], z[b:, group]
            z_u = z_u.reshape(-1, z.shape[-1])
        else:
            z_c, z_u = model.backbone(tokens, hidden, cond)[:, group], None
        calls += 1
        z_c = z_c.reshape(-1, z_c.shape[-1])
        noise = torch.cat([token_noise(plan.seed, i, group, len(schedule.respaced(plan.denoise_steps)[0]), c) for i in range(b)], dim=1)
        vals = denoise(model.head, z_c, z_u, schedule, plan.denoise_steps, plan.cfg_weight, noise, plan.clip_x0)
        tokens[:, group] = vals.reshape(b, len(group), c).to(tokens.dtype)
        hidden[:, group] = 0
    return GenerationResult(unpatchify(tokens, cfg.patch, cfg.latent_channels, hp, wp), keep, plan, calls)


# --------------------------------------------------------------------------
# pixel-space tasks


@dataclass
class TaskResult:
    images: np.ndarray  # (B, H, W, 3) in [0, 1]
    latents: torch.Tensor  # (B, C, h, w) unnormalised, as decoded
    generation: GenerationResult


def keep_mask_to_tokens(keep: np.ndarray, block: int) -> np.ndarray:
    """Pixel keep mask ``(H, W)`` to a token mask; every block must be uniform."""
    keep = np.asarray(keep).astype(bool)
    H, W = keep.shape
    if H % block or W % block:
        raise ContractViolation(f"mask {H}x{W} not divisible by token block {block}")
    blocks = keep.reshape(H // block, block, W // block, block)
    any_, all_ = blocks.any(axis=(1, 3)), blocks.all(axis=(1, 3))
    if (any_ != all_).any():
        r, c = np.argwhere(any_ != all_)[0]
        raise ContractViolation(f"keep mask is not aligned to {block}px token blocks (block row {r}, col {c})")
    return all_


def text_to_panorama(model: PARModel, codec: LatentCodec, prompts, settings: SamplerSettings, r_post: float = 0.125) -> TaskResult:
    return complete(model, codec, prompts, settings, None, None, r_pre=0.0, r_post=r_post)


def complete(
    model: PARModel,
    codec: LatentCodec,
    prompts,
    settings: SamplerSettings,
    images: np.ndarray | None,
    keep: np.ndarray | None,
    r_pre: float = 0.125,
    r_post: float = 0.125,
) -> TaskResult:
    """Shared path for text-to-panorama, outpainting and editing.

    ``images`` is ``(B, H, W, 3)``, ``keep`` a pixel mask ``(H, W)`` marking
    the content to preserve. Known latents are taken straight from the
    encoder, so a full keep mask reproduces ``decode(encode(x))`` exactly.
    """
    b = len(prompts)
    known_raw = None
    token_keep = None
    if images is not None:
        x = images_to_tensor(images)
        if x.shape[0] != b:
            raise ContractViolation(f"{x.shape[0]} images for {b} prompts")
        if keep is None or tuple(np.shape(keep)) != tuple(x.shape[-2:]):
            raise ContractViolation(f"keep mask shape {None if keep is None else np.shape(keep)} does not match image {tuple(x.shape[-2:])}")
        with torch.no_grad():
            known_raw = codec.encode(x, r_pre)
        token_keep = keep_mask_to_tokens(keep, codec.stride * model.cfg.patch)
        if not token_keep.any():
            log.warning("keep mask is empty; generating the whole panorama from the prompt")
    result = generate(
        model,
        prompts,
        settings,
        known=None if known_raw is None else codec.normalize(known_raw),
        known_mask=token_keep,
    )
    z = codec.denormalize(result.latents)
    if known_raw is not None:
        keep_lat = torch.from_numpy(np.kron(token_keep, np.ones((model.cfg.patch, model.cfg.patch), dtype=bool)))
        z = torch.where(keep_lat, known_raw, z)
    with torch.no_grad():
        out = codec.decode(z, r_post)
    return TaskResult(tensor_to_images(out), z, result)


def outpaint(model, codec, images, known_pixels, prompts, settings, r_pre=0.125, r_post=0.125) -> TaskResult:
    """Generate everything outside ``known_pixels`` (True = known)."""
    return complete(model, codec, prompts, settings, images, known_pixels, r_pre, r_post)


def edit(model, codec, images, keep, prompts, settings, r_pre=0.125, r_post=0.125) -> TaskResult:
    """Regenerate outside ``keep`` under new prompts, preserving the inside."""
    return complete(model, codec, prompts, settings, images, keep, r_pre, r_post)
