import itertools

import numpy as np
import pytest

from par import synthdata as sd
from par.errors import ContractViolation
from par.imageio import to_uint8
from par.metrics import discontinuity_score
from par.tensor_core import RngStream


def _specs(n, seed=0):
    st = RngStream(seed, "data")
    return [sd.random_spec(st.generator(i)) for i in range(n)]


def test_vocabularies_are_small():
    assert all(1 <= n <= 8 for n in sd.VOCAB_SIZES)
    assert sd.VOCAB_SIZE == sum(sd.VOCAB_SIZES)


def test_palettes_are_separated():
    for a, b in itertools.combinations(range(len(sd.PALETTES)), 2):
        assert np.linalg.norm(sd.PALETTES[a] - sd.PALETTES[b]) > 0.1


@pytest.mark.parametrize("H", [32, 64])
def test_render_shape_range_and_determinism(H):
    spec = _specs(1)[0]
    a = sd.render(spec, H)
    assert a.shape == (H, 2 * H, 3)
    assert a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, sd.render(spec, H))


def test_render_rejects_other_sizes():
    with pytest.raises(ContractViolation):
        sd.render(_specs(1)[0], 48)


def test_spec_validation():
    with pytest.raises(ContractViolation, match="stripe"):
        sd.SceneSpec(0, 9, 0, 0, seed=1)


def test_rendered_images_are_wrap_continuous():
    # the wrap column pair behaves like an interior pair: its difference is bounded
    # by the largest interior difference up to the sampling of the steepest band
    for spec in _specs(40):
        img = sd.render(spec, 64)
        ext = np.concatenate([img, img[:, :1]], axis=1)
        d = np.abs(np.diff(ext, axis=1))
        seam, interior = d[:, -1], d[:, :-1]
        assert seam.max() <= interior.max() * 1.0 / np.cos(2 * np.pi * 4 / 128) + 1e-12


def test_shifted_render_is_again_seamless():
    img = sd.render(_specs(1, seed=3)[0], 32)
    base = np.abs(np.diff(img, axis=1)).max()
    for v in range(0, 64, 7):
        s = np.roll(img, v, axis=1)
        assert np.abs(s[:, 0] - s[:, -1]).max() <= base * 1.09


def test_shift_averaged_seam_score_is_one():
    # each shift moves a different column pair onto the seam; the score then
    # compares that pair with the mean of the other W - 1 pairs
    img = sd.render(_specs(1, seed=4)[0], 32)
    W = img.shape[1]
    pair = np.abs(img - np.roll(img, 1, axis=1)).mean(axis=(0, 2))  # pair (j-1, j)
    total = pair.sum()
    scores = []
    for v in range(W):
        s = pair[(-v) % W]  # rolled seam is the old pair (-v - 1, -v)
        expected = (W - 1) * s / (total - s)
        scores.append(discontinuity_score(np.roll(img, v, axis=1)))
        assert scores[-1] == pytest.approx(expected, rel=1e-9)
    assert np.mean(scores) == pytest.approx(1.0, abs=0.05)


def test_classifier_recovers_every_attribute():
    for H in (32, 64):
        for spec in _specs(200, seed=H):
            img = sd.render(spec, H)
            assert sd.classify(img) == spec.attributes
            assert sd.classify(to_uint8(img)) == spec.attributes


def test_caption_and_prompt_tokens():
    spec = sd.SceneSpec(2, 1, 3, 0, seed=5)
    assert sd.caption(spec) == [2, 1, 3, 0]
    assert sd.prompt_tokens([2, 1, 3, 0]) == [2, 6 + 1, 10 + 3, 14]
    with pytest.raises(ContractViolation):
        sd.prompt_tokens([7])
    with pytest.raises(ContractViolation):
        sd.prompt_tokens([0, 0, 0, 0, 0])


def test_build_corpus_manifest_and_determinism(tmp_path):
    m1 = sd.build_corpus(16, 7, tmp_path / "a" / "nested")
    m2 = sd.build_corpus(16, 7, tmp_path / "b")
    lines = m1.read_text().splitlines()
    assert len(lines) == 16
    assert m1.read_bytes() == m2.read_bytes()
    for name in (l.split(",")[0] for l in lines):
        assert (m1.parent / name).read_bytes() == (m2.parent / name).read_bytes()
    items = sd.read_manifest(m1.parent)
    imgs = sd.load_images(items)
    assert imgs.shape == (16, 32, 64, 3)
    for it, img in zip(items, imgs):
        assert sd.classify(img) == it.spec.attributes


def test_split_is_seeded_and_disjoint(tmp_path):
    items = sd.read_manifest(sd.build_corpus(20, 1, tmp_path))
    tr, va = sd.split_items(items, 3)
    assert len(va) == 2 and len(tr) == 18
    assert not {i.path for i in tr} & {i.path for i in va}
    assert sd.split_items(items, 3) == (tr, va)


def test_build_corpus_rejects_empty(tmp_path):
    with pytest.raises(ContractViolation):
        sd.build_corpus(0, 1, tmp_path)


def test_malformed_manifest(tmp_path):
    (tmp_path / sd.MANIFEST).write_text("a.ppm, 1, 2\n")
    with pytest.raises(ContractViolation, match="6 fields"):
        sd.read_manifest(tmp_path)
