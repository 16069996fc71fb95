"""Procedural panoramas that are seamless by construction, with attribute captions.

Each image is a palette colour plus three zero-mean layers:

* longitude stripes ``sin(2 pi k u / W + phase)`` with integer ``k``,
* ``n`` equally spaced wrapped Gaussian blobs on the equator,
* a polar gradient ``g * cos(theta)``.

Because every layer is periodic in ``u`` with period ``W``, any cyclic shift
of a rendered image is again a valid rendering. The layers are separable
enough that :func:`classify` recovers all four attribute ids exactly.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .imageio import read_ppm, write_ppm
from .tensor_core import RngStream

PALETTES = np.array(
    [
        [0.35, 0.45, 0.62],
        [0.62, 0.40, 0.35],
        [0.42, 0.60, 0.40],
        [0.55, 0.55, 0.55],
        [0.38, 0.38, 0.42],
        [0.62, 0.58, 0.36],
    ]
)
STRIPE_FREQS = (1, 2, 3, 4)
BLOB_COUNTS = (1, 2, 3, 4)
POLE_GRADIENTS = (-0.10, -0.05, 0.05, 0.10)
VOCAB_SIZES = (len(PALETTES), len(STRIPE_FREQS), len(BLOB_COUNTS), len(POLE_GRADIENTS))
VOCAB_OFFSETS = tuple(int(x) for x in np.cumsum((0,) + VOCAB_SIZES[:-1]))
VOCAB_SIZE = sum(VOCAB_SIZES)

STRIPE_AMP = 0.10
STRIPE_COLOR = np.array([1.0, 0.75, 0.5])
BLOB_AMP = 0.15
BLOB_COLOR = np.array([0.4, 0.6, 1.0])
GRADIENT_COLOR = np.array([1.0, 1.0, 1.0])


@dataclass(frozen=True)
class SceneSpec:
    palette: int
    stripe: int
    blobs: int
    pole: int
    seed: int

    def __post_init__(self):
        for value, size, name in zip(self.attributes, VOCAB_SIZES, ("palette", "stripe", "blobs", "pole")):
            if not 0 <= value < size:
                raise ContractViolation(f"{name} id {value} outside [0, {size})")

    @property
    def attributes(self) -> tuple[int, int, int, int]:
        return (self.palette, self.stripe, self.blobs, self.pole)


def random_spec(gen: np.random.Generator) -> SceneSpec:
    ids = [int(gen.integers(0, n)) for n in VOCAB_SIZES]
    return SceneSpec(*ids, seed=int(gen.integers(0, 2**31)))


def _layers(spec: SceneSpec, H: int):
    W = 2 * H
    gen = RngStream(spec.seed, "data").generator(H)
    u = np.arange(W)
    theta = np.pi * np.arange(H) / H

    k = STRIPE_FREQS[spec.stripe]
    stripe = STRIPE_AMP * np.sin(2 * np.pi * k * u / W + gen.uniform(0, 2 * np.pi))

    n = BLOB_COUNTS[spec.blobs]
    sigma_u, sigma_v = W / 20, H / 12
    centres = gen.uniform(0, W) + W * np.arange(n) / n
    d = (u[None, :] - centres[:, None] + W / 2) % W - W / 2
    along = np.exp(-0.5 * (d / sigma_u) ** 2).sum(axis=0)
    across = np.exp(-0.5 * ((np.arange(H) - H / 2) / sigma_v) ** 2)
    blob = BLOB_AMP * across[:, None] * along[None, :]

    grad = POLE_GRADIENTS[spec.pole] * np.cos(theta)
    return stripe, blob, grad


def render(spec: SceneSpec, H: int) -> np.ndarray:
    """Render an ``(H, 2H, 3)`` float image in [0, 1]."""
    if H not in (32, 64):
        raise ContractViolation(f"render supports H in {{32, 64}}, got {H}")
    stripe, blob, grad = _layers(spec, H)
    img = np.broadcast_to(PALETTES[spec.palette], (H, 2 * H, 3)).copy()
    img += stripe[None, :, None] * STRIPE_COLOR
    img += (blob - blob.mean())[..., None] * BLOB_COLOR
    img += (grad - grad.mean())[:, None, None] * GRADIENT_COLOR
    return np.clip(img, 0.0, 1.0)


def caption(spec: SceneSpec) -> list[int]:
    """Attribute ids in canonical order (palette, stripe, blobs, pole)."""
    return list(spec.attributes)


def prompt_tokens(attributes) -> list[int]:
    """Map canonical attribute ids onto the shared text vocabulary."""
    attributes = list(attributes)
    if len(attributes) > len(VOCAB_SIZES):
        raise ContractViolation(f"at most {len(VOCAB_SIZES)} attribute ids, got {attributes}")
    out = []
    for i, a in enumerate(attributes):
        if not 0 <= int(a) < VOCAB_SIZES[i]:
            raise ContractViolation(f"attribute {i} id {a} outside [0, {VOCAB_SIZES[i]})")
        out.append(VOCAB_OFFSETS[i] + int(a))
    return out


# --------------------------------------------------------------------------
# oracle classifier


def _dominant_frequency(signal: np.ndarray, candidates) -> int:
    spec = np.abs(np.fft.rfft(signal - signal.mean()))
    return int(np.argmax([spec[k] for k in candidates]))


def classify(img: np.ndarray) -> tuple[int, int, int, int]:
    """Recover (palette, stripe, blobs, pole) ids from an ``(H, W, 3)`` image."""
    scale = 255.0 if np.asarray(img).dtype == np.uint8 else 1.0
    img = np.asarray(img, dtype=np.float64) / scale
    H = img.shape[0]
    palette = int(np.argmin(np.linalg.norm(PALETTES - img.mean(axis=(0, 1)), axis=1)))

    cap = max(1, H // 8)
    polar = img[:cap].mean(axis=0) @ STRIPE_COLOR
    stripe = _dominant_frequency(polar, STRIPE_FREQS)

    blob_row = (img[H // 2] - img[H // 2 - H // 4]) @ BLOB_COLOR
    blobs = _dominant_frequency(blob_row, BLOB_COUNTS)

    theta = np.pi * np.arange(H) / H
    top = img[:cap].mean(axis=(0, 1)) @ GRADIENT_COLOR / 3
    bottom = img[-cap:].mean(axis=(0, 1)) @ GRADIENT_COLOR / 3
    unit = np.cos(theta[:cap]).mean() - np.cos(theta[-cap:]).mean()
    pole = int(np.argmin([abs((top - bottom) - g * unit) for g in POLE_GRADIENTS]))
    return palette, stripe, blobs, pole


# --------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class CorpusItem:
    path: Path
    spec: SceneSpec


MANIFEST = "manifest.txt"


def build_corpus(n: int, seed: int, out_dir, H: int = 32) -> Path:
    """Render ``n`` items into ``out_dir`` and write the manifest; returns its path."""
    if n < 1:
        raise ContractViolation(f"corpus size must be >= 1, got {n}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc
    stream = RngStream(seed, "data")
    lines = []
    for i in range(n):
        spec = random_spec(stream.generator(i))
        name = f"pano_{i:05d}.ppm"
        write_ppm(out / name, render(spec, H))
        a = spec.attributes
        lines.append(f"{name}, {a[0]}, {a[1]}, {a[2]}, {a[3]}, {spec.seed}")
    manifest = out / MANIFEST
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> list[CorpusItem]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    items = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 6:
            raise ContractViolation(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        name, *ids, s = parts
        items.append(CorpusItem(path.parent / name, SceneSpec(*(int(x) for x in ids), seed=int(s))))
    return items


def split_items(items: list[CorpusItem], seed: int) -> tuple[list[CorpusItem], list[CorpusItem]]:
    """Seeded 90/10 train/val split (at least one validation item when n >= 2)."""
    order = list(range(len(items)))
    random.Random(seed).shuffle(order)
    n_val = max(1, round(0.1 * len(items))) if len(items) >= 2 else 0
    val = sorted(order[:n_val])
    train = sorted(order[n_val:])
    return [items[i] for i in train], [items[i] for i in val]


def load_images(items: list[CorpusItem]) -> np.ndarray:
    """Stack items into an ``(N, H, W, 3)`` float32 array in [0, 1]."""
    return np.stack([read_ppm(it.path) for it in items]).astype(np.float32) / 255.0
