"""Seam score, Fréchet feature distance and the equivariance gap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractViolation
from .tensor_core import RngStream

DS_FLOOR = 1e-6


def discontinuity_score(img) -> float:
    """Mean wrap-seam difference relative to the mean interior column difference.

    ``img`` is ``(H, W)`` or ``(H, W, C)``. A value near 1 means the seam
    between the last and first column looks like an ordinary column pair.
    """
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    if a.shape[1] < 4:
        raise ContractViolation(f"discontinuity score needs W >= 4, got {a.shape[1]}")
    seam = np.abs(a[:, 0] - a[:, -1]).mean()
    if seam == 0.0:
        return 0.0
    interior = np.abs(np.diff(a, axis=1)).mean()
    return float(seam / max(interior, DS_FLOOR))


def mean_discontinuity(images) -> float:
    return float(np.mean([discontinuity_score(im) for im in images]))


# --------------------------------------------------------------------------
# Fréchet distance


@dataclass
class FeatureSet:
    features: np.ndarray  # (n, k)
    label: str = "features"

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        if f.ndim != 2:
            raise ContractViolation(f"features must be (n, k), got shape {f.shape}")
        if f.shape[0] < 2:
            raise ContractViolation(f"need at least 2 samples for a covariance, got {f.shape[0]}")
        if not np.isfinite(f).all():
            raise ContractViolation(f"non-finite values in feature set {self.label!r}")
        self.features = f

    def stats(self) -> tuple[np.ndarray, np.ndarray]:
        n, k = self.features.shape
        mu = self.features.mean(axis=0)
        sigma = np.atleast_2d(np.cov(self.features, rowvar=False))
        if n < k + 1:
            sigma = sigma + 1e-6 * np.eye(k)
        return mu, sigma


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a, b) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product root is taken as ``Tr((S_a^½ S_b S_a^½)^½)``,
    which has the same eigenvalues and stays symmetric.
    """
    a = a if isinstance(a, FeatureSet) else FeatureSet(a)
    b = b if isinstance(b, FeatureSet) else FeatureSet(b)
    if a.features.shape[1] != b.features.shape[1]:
        raise ContractViolation(
            f"feature widths differ: {a.features.shape[1]} vs {b.features.shape[1]}"
        )
    mu_a, s_a = a.stats()
    mu_b, s_b = b.stats()
    root_a = _psd_sqrt(s_a)
    inner = root_a @ s_b @ root_a
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_root = np.sqrt(np.clip(w, 0.0, None)).sum()
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(s_a) + np.trace(s_b) - 2.0 * tr_root)
    return max(d, 0.0)


class RandomPatchFeatures:
    """Fixed random projection of image patches, tanh, then average pooling."""

    def __init__(self, k: int = 64, patch: int = 4, seed: int = 0):
        self.k = k
        self.patch = patch
        self.seed = seed
        d = 3 * patch * patch
        gen = RngStream(seed, "init").generator(0xFEA7)
        self.proj = gen.standard_normal((d, k)) / np.sqrt(d)
        self.bias = gen.uniform(-0.5, 0.5, k)

    @property
    def label(self) -> str:
        return f"randpatch-k{self.k}-p{self.patch}-s{self.seed}"

    def __call__(self, images) -> FeatureSet:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ContractViolation(f"expected (N, H, W, 3) images, got {x.shape}")
        n, h, w, _ = x.shape
        p = self.patch
        x = x[:, : h - h % p, : w - w % p]
        patches = x.reshape(n, h // p, p, w // p, p, 3).transpose(0, 1, 3, 2, 4, 5)
        patches = patches.reshape(n, -1, p * p * 3) - 0.5
        feats = np.tanh(patches @ self.proj + self.bias).mean(axis=1)
        return FeatureSet(feats, self.label)


# --------------------------------------------------------------------------
# equivariance gap


@torch.no_grad()
def equivariance_gap(model, latents, conditions, shifts, schedule, rng: RngStream, mask_ratio=(0.7, 1.0)) -> float:
    """Mean consistency residual over ``latents`` and every shift in ``shifts``.

    ``latents`` is ``(N, C, h, w)`` (normalised), ``conditions`` a list of
    prompt-token lists. Masks, noise and timesteps are drawn from ``rng`` with
    the sample index as key so different models see identical inputs.
    """
    from .training import consistency_residual, make_noised_batch

    model.eval()
    total, count = 0.0, 0
    for i in range(latents.shape[0]):
        batch = make_noised_batch(model, latents[i : i + 1], schedule, rng.seed, key=i, mask_ratio=mask_ratio)
        cond = model.embed_text([conditions[i]])
        for v in shifts:
            total += float(consistency_residual(model, batch, cond, int(v)))
            count += 1
    return total / max(count, 1)
