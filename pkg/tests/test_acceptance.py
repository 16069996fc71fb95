"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

The lines are printed in the "acceptance criteria" section of the pytest
terminal summary.
"""

import re
import shutil
import time

import numpy as np
import pytest
import torch

import fd_suite
from conftest import record
from par import cli, pipeline, sampler
from par.codec import LatentCodec, images_to_tensor, tensor_to_images
from par.erp import circular_pad, crop_padding, cyclic_shift
from par.metrics import equivariance_gap, frechet_distance, mean_discontinuity
from par.model import ModelConfig, PARModel
from par.synthdata import build_corpus
from par.tensor_core import RngStream
from par.training import NoiseSchedule, consistency_residual, make_noised_batch, masked_mse


# 1 ------------------------------------------------------------------------------


def test_criterion_1_verify_erp(tmp_path, capsys):
    out = tmp_path / "erp.txt"
    t = time.perf_counter()
    code = cli.main(["verify-erp", "--H", "64", "--samples", "1000000", "--out", str(out)])
    took = time.perf_counter() - t
    text = out.read_text()
    ratio = float(re.search(r"variance_ratio\(.*\): ([0-9.]+)", text).group(1))
    covs = re.findall(r"^cov.*-> (PASS|FAIL)$", text, re.M)
    ok = code == 0 and abs(ratio - 2.0) <= 0.1 and covs and all(c == "PASS" for c in covs) and took < 60
    record("1", ok, f"verify-erp H=64 n=1e6 ratio {ratio:.4f} (2.0 +- 5%), {covs.count('PASS')}/{len(covs)} covariances within 3 SE, exit {code}", took)
    assert ok


# 2 ------------------------------------------------------------------------------


def test_criterion_2_finite_differences():
    t = time.perf_counter()
    cases = fd_suite.kernel_cases() + fd_suite.end_to_end_cases()
    took = time.perf_counter() - t
    worst_name, worst = max(cases, key=lambda c: c[1])
    ok = worst <= fd_suite.TOL and took < 300
    record("2", ok, f"{len(cases)} float64 gradient cases, worst rel. error {worst:.2e} ({worst_name}) <= 1e-3", took)
    assert ok


# 3 ------------------------------------------------------------------------------


def test_criterion_3_padding_and_equivariance():
    t = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    exact = True
    for r in (0.125, 0.25, 0.5):
        for shape in ((2, 3, 64, 128), (2, 8, 8, 16)):
            x = torch.randn(shape, generator=g)
            exact &= torch.equal(crop_padding(circular_pad(x, r), r, shape[-1]), x)
    codec = LatentCodec(boundary="circular")
    codec.reset_parameters(RngStream(0, "init"))
    x = torch.rand(1, 3, 64, 128, generator=g)
    worst = 0.0
    with torch.no_grad():
        z, y = codec.encode(x), codec.decode(codec.encode(x))
        for v in (8, 40, 96):
            zs = codec.encode(cyclic_shift(x, v))
            worst = max(worst, float((zs - cyclic_shift(z, v // 8)).abs().max()))
            worst = max(worst, float((codec.decode(zs) - cyclic_shift(y, v)).abs().max()))
    took = time.perf_counter() - t
    ok = exact and worst <= 1e-6 and took < 60
    record("3", ok, f"crop(pad) bit-exact for r in {{0.125, 0.25, 0.5}}: {exact}; circular codec shift error {worst:.1e} <= 1e-6", took)
    assert ok


# 4 ------------------------------------------------------------------------------


def test_criterion_4_consistency_degenerate_cases():
    t = time.perf_counter()
    model = PARModel(ModelConfig())
    model.reset_parameters(RngStream(0, "init"))
    with torch.no_grad():
        gen = torch.Generator().manual_seed(1)
        for p in model.parameters():
            p.add_(0.02 * torch.randn(p.shape, generator=gen))
    lat = torch.randn(4, 8, 8, 16, generator=gen)
    batch = make_noised_batch(model, lat, NoiseSchedule(1000), seed=3, key=0)
    cond = model.embed_text([[0, 6], [], [3], [1, 12]])
    zero_v0 = consistency_residual(model, batch, cond, 0).item()
    zero_vw = consistency_residual(model, batch, cond, model.cfg.latent_w).item()
    nonzero = consistency_residual(model, batch, cond, 5).item()
    pred = model(batch.tokens, batch.mask, cond, batch.x_t, batch.t)
    pred.retain_grad()
    masked_mse(pred, batch.noise, batch.mask).backward()
    off = batch.mask == 0
    off_grad = float(pred.grad[off].abs().max())
    took = time.perf_counter() - t
    ok = zero_v0 == 0.0 and zero_vw == 0.0 and nonzero > 0 and off.any() and off_grad == 0.0 and took < 60
    record("4", ok, f"L_cons(v=0) = {zero_v0}, L_cons(v=w) = {zero_vw} (v=5 gives {nonzero:.2e}); max off-mask grad {off_grad}", took)
    assert ok


# 5 ------------------------------------------------------------------------------


SAMPLE_SEED = 3


def _generated(run, r_post=None):
    cfg = run.cfg if r_post is None else run.cfg.replace(r_post=r_post)
    return pipeline.generate_images(cfg, run.model, run.codec, run.corpus.prompts, seed=SAMPLE_SEED)


def test_criterion_5_overfit_run(run_lam):
    t = time.perf_counter()
    h = run_lam.history
    l0, l_end = h.loss_va[0], float(np.mean(h.loss_va[-50:]))
    res = _generated(run_lam)
    settings = pipeline.sampler_settings(run_lam.cfg, SAMPLE_SEED)
    ds_gen, ds_corpus = mean_discontinuity(res.images), mean_discontinuity(run_lam.corpus.images)
    took = run_lam.seconds + time.perf_counter() - t
    drop = 1 - l_end / l0
    ok = (
        drop >= 0.5
        and ds_gen <= 1.5 * ds_corpus
        and (settings.steps, settings.denoise_steps, settings.cfg_weight) == (64, 25, 5.0)
        and took < 1800
    )
    record(
        "5",
        ok,
        f"L_va {l0:.3f} -> {l_end:.3f} (drop {drop:.0%} >= 50%); codec PSNR {run_lam.codec_report.psnr:.1f} dB; "
        f"generated DS {ds_gen:.3f} <= 1.5 x corpus DS {ds_corpus:.3f} (ratio {ds_gen / ds_corpus:.2f})",
        took,
    )
    assert ok


# 6 ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def held_out(corpus32, run_lam):
    cfg = run_lam.cfg.replace(corpus_dir=str(corpus32 / "held"))
    corpus = pipeline.load_corpus(cfg, "all")
    return pipeline.encode_latents(run_lam.codec, corpus.images, cfg.r_pre), corpus.prompts


def test_criterion_6a_consistency_ablation(run_lam, run_nolam, held_out):
    t = time.perf_counter()
    lat, prompts = held_out
    wp = run_lam.model.cfg.grid[1]
    shifts = list(range(1, wp))
    rng = RngStream(11, "mask-order")
    sched = NoiseSchedule(run_lam.cfg.diffusion_steps)
    gap_lam = equivariance_gap(run_lam.model, lat, prompts, shifts, sched, rng)
    gap_zero = equivariance_gap(run_nolam.model, lat, prompts, shifts, sched, rng)
    # both twins share one codec
    took = run_lam.seconds + run_nolam.seconds - run_nolam.codec_seconds + time.perf_counter() - t
    reduction = 1 - gap_lam / gap_zero
    ok = reduction >= 0.3 and took < 3600
    record("6a", ok, f"held-out equivariance gap lam=0.1 {gap_lam:.4g} vs lam=0 {gap_zero:.4g} ({reduction:.0%} lower, need >= 30%)", took)
    assert ok


def test_criterion_6b_padding_ablation(run64):
    t = time.perf_counter()
    run = run64
    settings = pipeline.sampler_settings(run.cfg, SAMPLE_SEED)
    gen = sampler.generate(run.model, run.corpus.prompts, settings)
    z = run.codec.denormalize(gen.latents)
    with torch.no_grad():
        padded = tensor_to_images(run.codec.decode(z, 0.125))
        plain = tensor_to_images(run.codec.decode(z, 0.0))
    ds_pad, ds_plain = mean_discontinuity(padded), mean_discontinuity(plain)
    took = run.seconds + time.perf_counter() - t
    ok = ds_pad < ds_plain and took < 3600
    record("6b", ok, f"H=64 matched seeds: DS with r=(0.125, 0.125) {ds_pad:.3f} < DS with r=(0, 0) {ds_plain:.3f}", took)
    assert ok


# 7 ------------------------------------------------------------------------------


def test_criterion_7_unified_tasks(run_lam):
    t = time.perf_counter()
    run = run_lam
    r = run.cfg.r_pre
    images = run.corpus.images[:4]
    H, W = images.shape[1:3]
    keep = np.zeros((H, W), bool)
    keep[:, : W // 2] = True
    settings = pipeline.sampler_settings(run.cfg, SAMPLE_SEED)
    prompts = run.corpus.prompts[:4]
    out = sampler.outpaint(run.model, run.codec, images, keep, prompts, settings, r, run.cfg.r_post)
    with torch.no_grad():
        z = run.codec.encode(images_to_tensor(images), r)
        recon = tensor_to_images(run.codec.decode(z, run.cfg.r_post))
    half = z.shape[-1] // 2
    tokens_exact = torch.equal(out.latents[..., :half], z[..., :half])
    err_out = float(np.abs(out.images[:, keep] - images[:, keep]).mean())
    err_codec = float(np.abs(recon[:, keep] - images[:, keep]).mean())
    edit = sampler.edit(run.model, run.codec, images, np.ones((H, W), bool), prompts, settings, r, run.cfg.r_post)
    edit_exact = np.array_equal(edit.images, recon) and edit.generation.model_calls == 0
    took = time.perf_counter() - t
    ok = tokens_exact and err_out <= 2 * err_codec and edit_exact and took < 300
    record(
        "7",
        ok,
        f"left-half outpaint keeps known tokens bit-exactly: {tokens_exact}; known-pixel MAE {err_out:.4f} vs codec "
        f"reconstruction MAE {err_codec:.4f} (<= 2x); full-keep edit == codec reconstruction: {edit_exact}",
        took,
    )
    assert ok


# 8 ------------------------------------------------------------------------------


def test_criterion_8_frechet():
    t = time.perf_counter()
    g = np.random.default_rng(0)
    x = g.normal(size=(2000, 16))
    same = frechet_distance(x, x)
    a, b = g.normal(0, 1, 100_000), g.normal(1, 1, 100_000)
    uni = frechet_distance(a, b)
    p, q = g.normal(size=(500, 8)), g.normal(size=(400, 8)) * 1.5 + 0.3
    asym = abs(frechet_distance(p, q) - frechet_distance(q, p))
    took = time.perf_counter() - t
    ok = abs(same) <= 1e-6 and abs(uni - 1) <= 0.02 and asym <= 1e-8 and took < 60
    record("8", ok, f"d(A, A) = {same:.1e}; d(N(0,1), N(1,1)) = {uni:.4f} at n=1e5; |d(A,B) - d(B,A)| = {asym:.1e}", took)
    assert ok


# 9 ------------------------------------------------------------------------------


TINY = dict(image_size=32, r_pre=0.25, r_post=0.25, codec_channels="4,8,8", latent_channels=4, codec_steps=30,
            d=32, enc_depth=2, dec_depth=2, heads=2, head_width=32, head_depth=2, steps=12, batch_size=4,
            checkpoint_every=0, seed=5)


def test_criterion_9_resume_and_persistence(tmp_path):
    t = time.perf_counter()
    build_corpus(6, 2, tmp_path / "corpus", 32)
    base = pipeline.RunConfig(corpus_dir=str(tmp_path / "corpus"), run_dir=str(tmp_path / "a"), **TINY).validate()
    corpus = pipeline.load_corpus(base, "all")
    codec, _ = pipeline.run_train_codec(base, corpus)

    # both arms use the same run directory, which is recorded in the checkpoint text
    run = base.replace(run_dir=str(tmp_path / "run"))
    m1, _, _ = pipeline.run_train(run, codec, corpus, resume=False)
    straight_log = run.path(pipeline.TRAIN_LOG).read_text()
    straight_ckpt = run.path(pipeline.PAR_FILE).read_bytes()
    shutil.rmtree(run.run_dir)
    pipeline.run_train(run, codec, corpus, resume=False, stop_step=5)
    m2, _, _ = pipeline.run_train(run, codec, corpus, resume=True)
    params_equal = all(torch.equal(a, b) for a, b in zip(m1.state_dict().values(), m2.state_dict().values()))
    logs_equal = straight_log == run.path(pipeline.TRAIN_LOG).read_text()
    files_equal = straight_ckpt == run.path(pipeline.PAR_FILE).read_bytes()

    state = pipeline.load_par(run.path(pipeline.PAR_FILE), run)
    again = pipeline.save_par(tmp_path / "again.ckpt", state.model, run, state.optimizer, state.step)
    round_trip = again.read_bytes() == run.path(pipeline.PAR_FILE).read_bytes()
    took = time.perf_counter() - t
    ok = params_equal and logs_equal and files_equal and round_trip and took < 300
    record(
        "9",
        ok,
        f"12-step run vs 5 + resume 7: parameters identical {params_equal}, logs identical {logs_equal}, "
        f"checkpoint files identical {files_equal}; load/save round trip byte-identical {round_trip}",
        took,
    )
    assert ok
