"""Run configuration as flat ``key = value`` text."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    # data
    corpus_dir: str = "corpus"
    run_dir: str = "run"
    image_size: int = 64
    # codec
    codec_channels: str = "16,32,64"
    latent_channels: int = 8
    codec_boundary: str = "zero"
    codec_steps: int = 1500
    codec_lr: float = 2e-3
    codec_batch: int = 8
    codec_seed: int = 0
    # model
    d: int = 128
    enc_depth: int = 4
    dec_depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    patch: int = 1
    head_width: int = 128
    head_depth: int = 3
    # training
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
    checkpoint_every: int = 500
    log_every: int = 50
    # padding and sampling
    r_pre: float = 0.125
    r_post: float = 0.125
    ar_steps: int = 64
    denoise_steps: int = 25
    cfg_weight: float = 5.0
    group_schedule: str = "uniform"
    sample_seed: int = 0
    deterministic: bool = True

    def validate(self) -> "RunConfig":
        def need(ok, key, why):
            if not ok:
                raise ConfigError(f"config key {key!r}: {why} (got {getattr(self, key)!r})")

        need(self.image_size in (32, 64), "image_size", "must be 32 or 64")
        try:
            chans = self.channels
        except ValueError:
            chans = ()
        need(len(chans) == 3 and all(c > 0 for c in chans), "codec_channels", "must be three positive integers")
        need(self.codec_boundary in ("zero", "circular"), "codec_boundary", "must be 'zero' or 'circular'")
        need(self.group_schedule in ("uniform", "cosine"), "group_schedule", "must be 'uniform' or 'cosine'")
        for key in ("latent_channels", "codec_steps", "codec_batch", "d", "enc_depth", "dec_depth", "heads",
                    "patch", "head_width", "head_depth", "steps", "batch_size", "diffusion_steps",
                    "ar_steps", "denoise_steps"):
            need(getattr(self, key) >= 1, key, "must be >= 1")
        for key in ("codec_lr", "lr", "mlp_ratio"):
            need(getattr(self, key) > 0, key, "must be > 0")
        for key in ("weight_decay", "lam", "grad_clip", "checkpoint_every", "log_every"):
            need(getattr(self, key) >= 0, key, "must be >= 0")
        for key in ("beta1", "beta2"):
            need(0 <= getattr(self, key) < 1, key, "must be in [0, 1)")
        need(0 <= self.p_uncond < 1, "p_uncond", "must be in [0, 1)")
        need(0 < self.mask_ratio_min <= 1, "mask_ratio_min", "must be in (0, 1]")
        need(self.mask_ratio_min <= self.mask_ratio_max <= 1, "mask_ratio_max", "must be in [mask_ratio_min, 1]")
        need(self.d % self.heads == 0, "heads", f"must divide d={self.d}")
        need(self.denoise_steps <= self.diffusion_steps, "denoise_steps", "must not exceed diffusion_steps")
        lat_h, lat_w = self.image_size // 8, self.image_size // 4
        need(lat_h % self.patch == 0, "patch", f"must divide the latent grid {lat_h}x{lat_w}")
        W = 2 * self.image_size
        for key in ("r_pre", "r_post"):
            r = getattr(self, key)
            need(0 <= r <= 1, key, "must be in [0, 1]")
        need((self.r_pre * W / 2) % 8 == 0, "r_pre", f"pads r*W/2 px per side; must be a multiple of 8 at W={W}")
        need(float(self.r_post * lat_w / 2).is_integer(), "r_post", f"pads r*w/2 latent columns; must be whole at w={lat_w}")
        return self

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(int(c) for c in str(self.codec_channels).split(","))

    def path(self, name: str) -> Path:
        return Path(self.run_dir) / name

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw).validate()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _convert(key: str, raw: str, typ):
    try:
        if typ is bool or typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ}") from None


def parse_config(text: str, source: str = "<config>", base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: config key {key!r} given twice")
        seen.add(key)
        setattr(cfg, key, _convert(key, raw, types[key]))
    return cfg.validate()


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config(path.read_text(), str(path))
    if overrides:
        text = "".join(f"{k} = {v}\n" for k, v in overrides.items())
        cfg = parse_config(text, "<overrides>", base=cfg)
    return cfg
