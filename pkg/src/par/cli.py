"""Command-line entry point.

Exit codes: 0 success, 2 configuration or contract error, 3 numeric
failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import RunConfig, load_config
from .errors import ConfigError, NumericError, ParError, VerificationError
from .erp import verify_non_iid
from .imageio import read_pgm, read_ppm
from .synthdata import build_corpus, prompt_tokens
from .tensor_core import RngStream, set_deterministic

log = logging.getLogger("par")


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args) -> RunConfig:
    over = _overrides(args.set)
    if getattr(args, "seed", None) is not None and args.command in ("train", "train-codec"):
        over.setdefault("seed", str(args.seed))
    if getattr(args, "no_deterministic", False):
        over["deterministic"] = "false"
    cfg = load_config(args.config, over)
    set_deterministic(cfg.deterministic)
    return cfg


def _prompt(text: str) -> list[int]:
    try:
        ids = [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"--prompt must be space-separated attribute ids, got {text!r}") from None
    return prompt_tokens(ids)


def cmd_make_data(args) -> int:
    manifest = build_corpus(args.n, args.seed, args.out_dir, args.size)
    print(f"wrote {args.n} panoramas and {manifest}")
    return 0


def cmd_train_codec(args) -> int:
    cfg = _config(args)
    _, report = pipeline.run_train_codec(cfg)
    print(f"codec: mse {report.initial_mse:.4g} -> {report.final_mse:.4g}, psnr {report.psnr:.2f} dB")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    _, history, opt = pipeline.run_train(cfg, resume=not args.fresh)
    if history.lines:
        print(history.lines[-1])
    print(f"trained to step {opt.state.step}; checkpoint {cfg.path(pipeline.PAR_FILE)}")
    return 0


def _load_models(cfg: RunConfig):
    codec = pipeline.load_codec(cfg.path(pipeline.CODEC_FILE))
    state = pipeline.load_par(cfg.path(pipeline.PAR_FILE))
    return state.model, codec


def cmd_generate(args) -> int:
    cfg = _config(args)
    model, codec = _load_models(cfg)
    prompts = [_prompt(args.prompt)] * args.n
    settings = pipeline.sampler_settings(cfg, args.seed)
    result = pipeline.generate_images(cfg, model, codec, prompts, args.seed)
    paths = pipeline.write_outputs(result, args.out, "sample", prompts, settings)
    print("\n".join(str(p) for p in paths))
    return 0


def _masked_task(args, stem: str) -> int:
    cfg = _config(args)
    model, codec = _load_models(cfg)
    image = read_ppm(args.image).astype(np.float32) / 255.0
    mask = read_pgm(args.mask)
    if mask.shape != image.shape[:2]:
        raise ConfigError(f"mask {mask.shape} and image {image.shape[:2]} dimensions differ")
    keep = mask == 255
    prompts = [_prompt(args.prompt)]
    settings = pipeline.sampler_settings(cfg, args.seed)
    result = pipeline.generate_images(cfg, model, codec, prompts, args.seed, image[None], keep)
    paths = pipeline.write_outputs(result, args.out, stem, prompts, settings, f"image = {args.image}\nmask = {args.mask}")
    print("\n".join(str(p) for p in paths))
    return 0


def cmd_outpaint(args) -> int:
    return _masked_task(args, "outpaint")


def cmd_edit(args) -> int:
    return _masked_task(args, "edit")


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, codec = _load_models(cfg)
    report = pipeline.run_eval(cfg, model, codec, args.n, args.seed)
    text = report.to_text()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    print(text, end="")
    return 0


def cmd_verify_erp(args) -> int:
    set_deterministic(True)
    report = verify_non_iid(2 * args.H, args.H, n_samples=args.samples, rng=RngStream(args.seed, "data"))
    text = report.to_text()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text, end="")
    if not report.ratio_ok:
        raise VerificationError(f"variance ratio {report.variance_ratio:.4f} outside 2.0 +/- 5%")
    if not report.covariance_ok:
        raise VerificationError("a cross-pixel covariance is more than 3 standard errors from 0")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="par", description="Panoramic masked autoregressive generation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", help="render a synthetic panorama corpus")
    s.add_argument("n", type=int)
    s.add_argument("seed", type=int)
    s.add_argument("out_dir")
    s.add_argument("--size", type=int, default=32, help="image height H (W = 2H)")
    s.set_defaults(func=cmd_make_data)

    def with_config(name, func, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--no-deterministic", action="store_true")
        s.set_defaults(func=func)
        return s

    with_config("train-codec", cmd_train_codec, "train the frozen autoencoder")
    s = with_config("train", cmd_train, "train the autoregressive model (resumes from the run checkpoint)")
    s.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    for name, func in (("generate", cmd_generate),):
        s = with_config(name, func, "text-to-panorama sampling")
        s.add_argument("--prompt", required=True)
        s.add_argument("--n", type=int, default=1)
        s.add_argument("--out", default="samples")
    for name, func, help_ in (("outpaint", cmd_outpaint, "fill the unknown region of an image"),
                              ("edit", cmd_edit, "regenerate outside the keep mask")):
        s = with_config(name, func, help_)
        s.add_argument("--image", required=True)
        s.add_argument("--mask", required=True, help="PGM, 255 = keep")
        s.add_argument("--prompt", required=True)
        s.add_argument("--out", default="samples")
    s = with_config("eval", cmd_eval, "write the metrics table")
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--out", default="metrics.txt")

    s = sub.add_parser("verify-erp", help="Monte Carlo check of ERP pixel statistics")
    s.add_argument("--H", type=int, default=64)
    s.add_argument("--samples", type=int, default=1_000_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_verify_erp)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ParError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
