import struct

import numpy as np
import pytest
import torch

from par import checkpoint as ckpt
from par import pipeline
from par.config import RunConfig
from par.errors import ConfigError
from par.training import make_optimizer


def _sample():
    g = np.random.default_rng(0)
    return ckpt.Checkpoint(
        "a = 1\nb = two\n",
        {"x.w": g.normal(size=(3, 4)).astype(np.float32), "x.b": g.normal(size=4).astype(np.float32), "s": np.float32(2.5).reshape(())},
    )


def test_round_trip_is_bit_exact(tmp_path):
    c = _sample()
    p = ckpt.save(c, tmp_path / "a.ckpt")
    back = ckpt.load(p)
    assert back.config_text == c.config_text
    assert list(back.tensors) == list(c.tensors)
    for k in c.tensors:
        assert back.tensors[k].tobytes() == c.tensors[k].tobytes()
        assert back.tensors[k].shape == c.tensors[k].shape
    p2 = ckpt.save(back, tmp_path / "b.ckpt")
    assert p.read_bytes() == p2.read_bytes()


def test_layout_header(tmp_path):
    raw = ckpt.save(ckpt.Checkpoint("k = v\n", {}), tmp_path / "h.ckpt").read_bytes()
    assert raw[:8] == b"PARCKPT1"
    assert struct.unpack("<I", raw[8:12])[0] == 1
    assert struct.unpack("<I", raw[12:16])[0] == 6
    assert raw[16:22] == b"k = v\n"
    assert struct.unpack("<I", raw[22:26])[0] == 0


def test_version_mismatch_rejected(tmp_path):
    p = ckpt.save(_sample(), tmp_path / "v.ckpt")
    raw = bytearray(p.read_bytes())
    raw[8:12] = struct.pack("<I", 2)
    p.write_bytes(bytes(raw))
    with pytest.raises(ckpt.CheckpointError, match="version 2"):
        ckpt.load(p)


def test_corrupt_files_rejected(tmp_path):
    p = ckpt.save(_sample(), tmp_path / "c.ckpt")
    raw = p.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-3])
    with pytest.raises(ckpt.CheckpointError, match="truncated"):
        ckpt.load(tmp_path / "t.ckpt")
    (tmp_path / "e.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(ckpt.CheckpointError, match="trailing"):
        ckpt.load(tmp_path / "e.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.load(tmp_path / "m.ckpt")
    with pytest.raises(FileNotFoundError):
        ckpt.load(tmp_path / "missing.ckpt")


def test_only_float32_stored(tmp_path):
    with pytest.raises(ckpt.CheckpointError, match="float32"):
        ckpt.save(ckpt.Checkpoint("", {"a": np.zeros(2)}), tmp_path / "f.ckpt")


def test_unknown_and_missing_names_are_listed():
    lin = torch.nn.Linear(2, 3)
    good = {k: v.detach().numpy().copy() for k, v in lin.state_dict().items()}
    with pytest.raises(ckpt.CheckpointError, match=r"unknown tensors \['extra'\]"):
        ckpt.load_module(lin, {**good, "extra": np.zeros(1, np.float32)})
    with pytest.raises(ckpt.CheckpointError, match=r"missing tensors \['bias'\]"):
        ckpt.load_module(lin, {"weight": good["weight"]})
    with pytest.raises(ckpt.CheckpointError, match="shape mismatch"):
        ckpt.load_module(lin, {"weight": np.zeros((3, 3), np.float32), "bias": good["bias"]})
    c = ckpt.Checkpoint("", {"model.a": np.zeros(1, np.float32), "junk.b": np.zeros(1, np.float32)})
    with pytest.raises(ckpt.CheckpointError, match="junk.b"):
        ckpt.check_names(c, ["model"])


def _tiny_cfg(tmp_path):
    return RunConfig(run_dir=str(tmp_path), image_size=32, r_pre=0.25, r_post=0.25, d=32, enc_depth=1, dec_depth=1,
                     heads=2, head_width=32, head_depth=1, codec_channels="4,8,8", latent_channels=4).validate()


def test_model_and_optimizer_round_trip(tmp_path):
    cfg = _tiny_cfg(tmp_path)
    model = pipeline.build_model(cfg)
    opt = make_optimizer(model, pipeline.train_config(cfg))
    for p in opt.params.values():
        p.grad = torch.randn_like(p)
    opt.step()
    path = pipeline.save_par(tmp_path / "par.ckpt", model, cfg, opt, 1)
    state = pipeline.load_par(path, cfg)
    assert state.step == 1 and state.optimizer.state.step == 1
    for (n, a), (_, b) in zip(model.state_dict().items(), state.model.state_dict().items()):
        assert torch.equal(a, b), n
    for n in opt.params:
        assert torch.equal(opt.state.exp_avg[n], state.optimizer.state.exp_avg[n])
        assert torch.equal(opt.state.exp_avg_sq[n], state.optimizer.state.exp_avg_sq[n])
    assert state.cfg == cfg


def test_codec_round_trip_and_kind_checks(tmp_path):
    cfg = _tiny_cfg(tmp_path)
    codec = pipeline.build_codec(cfg)
    codec.latent_mean.fill_(0.25)
    path = pipeline.save_codec(tmp_path / "codec.ckpt", codec, cfg)
    back = pipeline.load_codec(path, cfg)
    for (n, a), (_, b) in zip(codec.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), n
    with pytest.raises(ckpt.CheckpointError, match="not a model checkpoint"):
        pipeline.load_par(path)
    with pytest.raises(ConfigError, match="r_pre"):
        pipeline.load_codec(path, cfg.replace(r_pre=0.5))
