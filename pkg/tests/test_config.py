import pytest

from par.config import RunConfig, load_config, parse_config
from par.errors import ConfigError


def test_defaults():
    cfg = RunConfig().validate()
    assert (cfg.lam, cfg.r_pre, cfg.r_post) == (0.1, 0.125, 0.125)
    assert (cfg.ar_steps, cfg.denoise_steps, cfg.cfg_weight) == (64, 25, 5.0)


def test_text_round_trip():
    cfg = RunConfig(image_size=32, r_pre=0.25, r_post=0.25, lam=0.0, deterministic=False).validate()
    assert parse_config(cfg.to_text()) == cfg


def test_comments_blank_lines_and_types():
    cfg = parse_config("# run\n\nsteps = 12  # short\nlr = 5e-4\ndeterministic = no\ncorpus_dir = a b\n")
    assert cfg.steps == 12 and cfg.lr == 5e-4 and cfg.deterministic is False and cfg.corpus_dir == "a b"


@pytest.mark.parametrize(
    "text,match",
    [
        ("colour = red", "unknown config key 'colour'"),
        ("steps = 3\nsteps = 4", "'steps' given twice"),
        ("steps = many", "'steps': cannot parse"),
        ("just words", "expected 'key = value'"),
        ("r_pre = 0.3", "'r_pre'"),
        ("image_size = 48", "'image_size'"),
        ("heads = 3", "'heads'"),
        ("lam = -1", "'lam'"),
        ("codec_boundary = reflect", "'codec_boundary'"),
        ("image_size = 32", "'r_pre'"),
        ("mask_ratio_min = 0.9\nmask_ratio_max = 0.8", "'mask_ratio_max'"),
        ("codec_channels = 16,32", "'codec_channels'"),
    ],
)
def test_errors_name_the_key(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_load_config_with_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("image_size = 32\nr_pre = 0.25\nr_post = 0.25\nsteps = 10\n")
    cfg = load_config(p, {"steps": "20", "lam": "0"})
    assert cfg.steps == 20 and cfg.lam == 0.0 and cfg.image_size == 32
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.cfg")
    with pytest.raises(ConfigError, match="<overrides>"):
        load_config(p, {"bogus": "1"})
    assert cfg.path("x.ckpt").name == "x.ckpt"
