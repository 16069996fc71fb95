"""Glue between config, corpus, codec, model, checkpoints and the sampler."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .codec import CodecReport, LatentCodec, images_to_tensor, reconstruction_mse, train_codec
from .config import RunConfig, parse_config
from .errors import ConfigError, ContractViolation
from .imageio import write_ppm
from .metrics import RandomPatchFeatures, equivariance_gap, frechet_distance, mean_discontinuity
from .model import ModelConfig, PARModel
from .sampler import SamplerSettings, TaskResult, complete
from .synthdata import load_images, prompt_tokens, read_manifest, split_items
from .tensor_core import AdamW, RngStream, set_deterministic
from .training import NoiseSchedule, TrainConfig, TrainLog, make_optimizer, train

log = logging.getLogger(__name__)

CODEC_FILE = "codec.ckpt"
PAR_FILE = "par.ckpt"
TRAIN_LOG = "train_log.txt"


def build_codec(cfg: RunConfig) -> LatentCodec:
    codec = LatentCodec(cfg.channels, cfg.latent_channels, cfg.codec_boundary)
    codec.reset_parameters(RngStream(cfg.codec_seed, "init"))
    return codec


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        latent_channels=cfg.latent_channels,
        latent_h=cfg.image_size // 8,
        latent_w=cfg.image_size // 4,
        patch=cfg.patch,
        d=cfg.d,
        enc_depth=cfg.enc_depth,
        dec_depth=cfg.dec_depth,
        heads=cfg.heads,
        mlp_ratio=cfg.mlp_ratio,
        head_width=cfg.head_width,
        head_depth=cfg.head_depth,
    )


def build_model(cfg: RunConfig) -> PARModel:
    model = PARModel(model_config(cfg))
    model.reset_parameters(RngStream(cfg.seed, "init"))
    return model


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        steps=cfg.steps,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        lam=cfg.lam,
        p_uncond=cfg.p_uncond,
        mask_ratio_min=cfg.mask_ratio_min,
        mask_ratio_max=cfg.mask_ratio_max,
        grad_clip=cfg.grad_clip,
        diffusion_steps=cfg.diffusion_steps,
        seed=cfg.seed,
        log_every=cfg.log_every,
    )


def sampler_settings(cfg: RunConfig, seed: int | None = None) -> SamplerSettings:
    return SamplerSettings(
        steps=cfg.ar_steps,
        denoise_steps=cfg.denoise_steps,
        cfg_weight=cfg.cfg_weight,
        schedule=cfg.group_schedule,
        seed=cfg.sample_seed if seed is None else seed,
        diffusion_steps=cfg.diffusion_steps,
    )


# --------------------------------------------------------------------------
# checkpoints


def _split_state(text: str) -> tuple[str, dict[str, str]]:
    cfg_lines, state = [], {}
    for line in text.splitlines():
        if line.startswith("state."):
            k, v = line[len("state.") :].split("=", 1)
            state[k.strip()] = v.strip()
        else:
            cfg_lines.append(line)
    return "\n".join(cfg_lines), state


def save_codec(path, codec: LatentCodec, cfg: RunConfig) -> Path:
    c = ckpt.Checkpoint(cfg.to_text() + "state.kind = codec\n")
    c.add_module("codec", codec)
    return ckpt.save(c, path)


def load_codec(path, cfg: RunConfig | None = None) -> LatentCodec:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"codec checkpoint not found: {path} (run train-codec first)")
    c = ckpt.load(path)
    text, state = _split_state(c.config_text)
    if state.get("kind") != "codec":
        raise ckpt.CheckpointError(f"{path} is not a codec checkpoint (kind={state.get('kind')!r})")
    ckpt.check_names(c, ["codec"])
    saved = parse_config(text, str(path))
    codec = build_codec(saved)
    ckpt.load_module(codec, c.section("codec"), "codec")
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    if cfg is not None:
        for key in ("image_size", "latent_channels", "r_pre"):
            if getattr(cfg, key) != getattr(saved, key):
                raise ConfigError(f"config key {key!r}: {getattr(cfg, key)!r} differs from codec checkpoint value {getattr(saved, key)!r}")
    return codec


def save_par(path, model: PARModel, cfg: RunConfig, optimizer: AdamW | None = None, step: int = 0) -> Path:
    c = ckpt.Checkpoint(cfg.to_text() + f"state.kind = par\nstate.step = {step}\n")
    c.add_module("model", model)
    if optimizer is not None:
        for name in optimizer.params:
            c.tensors[f"optim.m.{name}"] = optimizer.state.exp_avg[name].detach().numpy().astype("<f4")
            c.tensors[f"optim.v.{name}"] = optimizer.state.exp_avg_sq[name].detach().numpy().astype("<f4")
        c.config_text += f"state.optim_step = {optimizer.state.step}\n"
    return ckpt.save(c, path)


@dataclass
class ParState:
    model: PARModel
    cfg: RunConfig
    optimizer: AdamW | None
    step: int


def load_par(path, cfg: RunConfig | None = None) -> ParState:
    """Load a model checkpoint. With ``cfg`` the optimizer is rebuilt from it."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model checkpoint not found: {path} (run train first)")
    c = ckpt.load(path)
    text, state = _split_state(c.config_text)
    if state.get("kind") != "par":
        raise ckpt.CheckpointError(f"{path} is not a model checkpoint (kind={state.get('kind')!r})")
    ckpt.check_names(c, ["model", "optim.m", "optim.v"])
    saved = parse_config(text, str(path))
    use = cfg or saved
    model = PARModel(model_config(saved))
    ckpt.load_module(model, c.section("model"), "model")
    model.eval()
    optimizer = None
    m, v = c.section("optim.m"), c.section("optim.v")
    if m:
        optimizer = make_optimizer(model, train_config(use))
        if set(m) != set(optimizer.params) or set(v) != set(optimizer.params):
            bad = sorted(set(m) ^ set(optimizer.params))
            raise ckpt.CheckpointError(f"{path}: optimizer tensors do not match parameters: {bad}")
        for name in optimizer.params:
            optimizer.state.exp_avg[name].copy_(torch.from_numpy(m[name]))
            optimizer.state.exp_avg_sq[name].copy_(torch.from_numpy(v[name]))
        optimizer.state.step = int(state.get("optim_step", 0))
    return ParState(model, saved, optimizer, int(state.get("step", 0)))


# --------------------------------------------------------------------------
# data


@dataclass
class Corpus:
    images: np.ndarray  # (N, H, W, 3) float32
    prompts: list[list[int]]
    names: list[str]


def load_corpus(cfg: RunConfig, split: str = "train") -> Corpus:
    items = read_manifest(cfg.corpus_dir)
    if split == "all":
        chosen = items
    else:
        train, val = split_items(items, cfg.seed)
        chosen = {"train": train, "val": val}[split]
    if not chosen:
        raise ContractViolation(f"corpus split {split!r} in {cfg.corpus_dir} is empty")
    images = load_images(chosen)
    if images.shape[1] != cfg.image_size:
        raise ConfigError(f"config key 'image_size': {cfg.image_size} but corpus images are {images.shape[1]} rows high")
    return Corpus(images, [prompt_tokens(it.spec.attributes) for it in chosen], [it.path.name for it in chosen])


@torch.no_grad()
def encode_latents(codec: LatentCodec, images: np.ndarray, r_pre: float) -> torch.Tensor:
    """Normalised latents ``(N, C, h, w)`` of ``(N, H, W, 3)`` images."""
    return codec.normalize(codec.encode(images_to_tensor(images), r_pre))


# --------------------------------------------------------------------------
# stages


def run_train_codec(cfg: RunConfig, corpus: Corpus | None = None) -> tuple[LatentCodec, CodecReport]:
    set_deterministic(cfg.deterministic)
    corpus = corpus or load_corpus(cfg)
    x = images_to_tensor(corpus.images)
    codec = build_codec(cfg)
    report = train_codec(codec, x, cfg.codec_steps, RngStream(cfg.codec_seed, "data"), cfg.codec_batch, cfg.codec_lr)
    codec.fit_latent_stats(x, cfg.r_pre)
    save_codec(cfg.path(CODEC_FILE), codec, cfg)
    log.info("codec: %d steps, mse %.3g -> %.3g (psnr %.2f dB)", report.steps, report.initial_mse, report.final_mse, report.psnr)
    return codec, report


def run_train(
    cfg: RunConfig,
    codec: LatentCodec | None = None,
    corpus: Corpus | None = None,
    resume: bool = True,
    stop_step: int | None = None,
    save: bool = True,
) -> tuple[PARModel, TrainLog, AdamW]:
    """Train (or resume) the masked autoregressive model on frozen-codec latents."""
    set_deterministic(cfg.deterministic)
    codec = codec or load_codec(cfg.path(CODEC_FILE), cfg)
    corpus = corpus or load_corpus(cfg)
    latents = encode_latents(codec, corpus.images, cfg.r_pre)
    ckpt_path = cfg.path(PAR_FILE)
    start, optimizer = 0, None
    if resume and save and ckpt_path.exists():
        state = load_par(ckpt_path, cfg)
        model, optimizer, start = state.model, state.optimizer, state.step
        log.info("resuming from %s at step %d", ckpt_path, start)
    else:
        model = build_model(cfg)

    log_file = cfg.path(TRAIN_LOG) if save else None
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)

    def log_fn(line):
        if log_file is not None:
            with open(log_file, "a") as fh:
                fh.write(line + "\n")

    def checkpoint_fn(step, opt):
        if save:
            save_par(ckpt_path, model, cfg, opt, step)

    tc = train_config(cfg)
    optimizer, history = train(
        model, latents, corpus.prompts, tc, optimizer, start, stop_step, log_fn, checkpoint_fn, cfg.checkpoint_every
    )
    if save:
        save_par(ckpt_path, model, cfg, optimizer, optimizer.state.step)
    return model, history, optimizer


def write_outputs(result: TaskResult, out_dir, stem: str, prompts, settings: SamplerSettings, extra: str = "") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(result.images):
        p = out / f"{stem}_{i:03d}.ppm"
        write_ppm(p, img)
        paths.append(p)
    plan = result.generation.plan
    side = [f"prompts = {'; '.join(' '.join(str(t) for t in pr) for pr in prompts)}", f"sample_seed = {settings.seed}"]
    if extra:
        side.append(extra.rstrip("\n"))
    text = "\n".join(side) + "\n" + (plan.to_text() if plan is not None else "plan = none (all tokens known)\n")
    (out / f"{stem}.txt").write_text(text)
    return paths


def settings_seed(cfg: RunConfig, seed=None) -> int:
    return cfg.sample_seed if seed is None else seed


def generate_images(cfg: RunConfig, model: PARModel, codec: LatentCodec, prompts, seed=None, images=None, keep=None) -> TaskResult:
    settings = sampler_settings(cfg, seed)
    r_pre = cfg.r_pre if images is not None else 0.0
    return complete(model, codec, prompts, settings, images, keep, r_pre=r_pre, r_post=cfg.r_post)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    rows: list[tuple[str, float, int]]  # (metric, value, n)
    seed: int

    def to_text(self) -> str:
        return "metric, value, n, seed\n" + "".join(f"{k}, {v:.6g}, {n}, {self.seed}\n" for k, v, n in self.rows)

    def value(self, metric: str) -> float:
        return next(v for k, v, _ in self.rows if k == metric)


def run_eval(cfg: RunConfig, model: PARModel, codec: LatentCodec, n_samples: int = 8, seed: int | None = None) -> EvalReport:
    corpus = load_corpus(cfg, "all")
    x = images_to_tensor(corpus.images)
    prompts = [corpus.prompts[i % len(corpus.prompts)] for i in range(n_samples)]
    gen = generate_images(cfg, model, codec, prompts, seed)
    feats = RandomPatchFeatures(seed=cfg.seed)
    lat = encode_latents(codec, corpus.images, cfg.r_pre)
    wp = model.cfg.grid[1]
    shifts = [s * model.cfg.patch for s in range(1, wp, max(1, wp // 4))]
    gap = equivariance_gap(model, lat, corpus.prompts, shifts, NoiseSchedule(cfg.diffusion_steps), RngStream(cfg.seed, "mask-order"))
    n_real = len(corpus.images)
    rows = [
        ("codec_recon_mse", reconstruction_mse(codec, x, cfg.r_pre), n_real),
        ("corpus_mean_ds", mean_discontinuity(corpus.images), n_real),
        ("generated_mean_ds", mean_discontinuity(gen.images), n_samples),
        ("frechet_randpatch", frechet_distance(feats(gen.images), feats(corpus.images)), n_samples),
        ("equivariance_gap", gap, n_real * len(shifts)),
    ]
    return EvalReport(rows, settings_seed(cfg, seed))
