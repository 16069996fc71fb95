"""Equirectangular projection geometry, cyclic shifts and circular padding.

Conventions: longitude ``phi`` in (-pi, pi], polar angle ``theta`` in [0, pi],
``u = (phi + pi) / (2 pi) * W`` and ``v = theta / pi * H``. Pixel ``(u, v)`` is
centred on ``(phi(u), theta(v))`` so row 0 sits on the north pole.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch

from .errors import ContractViolation
from .tensor_core import RngStream


@dataclass(frozen=True)
class SpherePoint:
    x: float
    y: float
    z: float

    def __post_init__(self):
        n2 = self.x * self.x + self.y * self.y + self.z * self.z
        if abs(n2 - 1.0) > 1e-9:
            raise ContractViolation(f"sphere point must be unit norm, |p|^2 = {n2!r}")


@dataclass(frozen=True)
class ErpCoord:
    u: float
    v: float
    W: int
    H: int


def sphere_to_erp(p: SpherePoint, W: int, H: int) -> ErpCoord:
    phi = math.atan2(p.y, p.x)  # atan2(0, 0) == 0
    theta = math.acos(max(-1.0, min(1.0, p.z)))
    u = (phi + math.pi) / (2 * math.pi) * W
    return ErpCoord(u % W, theta / math.pi * H, W, H)


def erp_to_sphere(c: ErpCoord) -> SpherePoint:
    phi = 2 * math.pi * c.u / c.W - math.pi
    theta = math.pi * c.v / c.H
    st = math.sin(theta)
    x, y, z = st * math.cos(phi), st * math.sin(phi), math.cos(theta)
    n = math.sqrt(x * x + y * y + z * z)
    return SpherePoint(x / n, y / n, z / n)


def sphere_to_erp_array(xyz: np.ndarray, W: int, H: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`sphere_to_erp` for an ``(n, 3)`` array."""
    phi = np.arctan2(xyz[:, 1], xyz[:, 0])
    theta = np.arccos(np.clip(xyz[:, 2], -1.0, 1.0))
    return np.mod((phi + np.pi) / (2 * np.pi) * W, W), theta / np.pi * H


# --------------------------------------------------------------------------
# pixel areas


def row_boundaries(H: int) -> np.ndarray:
    """Polar-angle edges of the ``H`` pixel rows, clamped so they tile [0, pi]."""
    edges = np.pi * (np.arange(H + 1) - 0.5) / H
    edges[0] = 0.0
    edges[-1] = np.pi
    return edges


def pixel_solid_angle(v: int, W: int, H: int) -> float:
    """Exact solid angle of a pixel in row ``v`` (cosine-difference form)."""
    if not 0 <= v < H:
        raise ContractViolation(f"row index {v} outside [0, {H})")
    e = row_boundaries(H)
    return 2 * math.pi / W * (math.cos(e[v]) - math.cos(e[v + 1]))


def pixel_solid_angle_approx(v: int, W: int, H: int) -> float:
    """Mid-latitude approximation ``2 pi^2 / (W H) * sin(theta_v)``."""
    return 2 * math.pi**2 / (W * H) * math.sin(math.pi * v / H)


def row_areas(W: int, H: int) -> np.ndarray:
    e = row_boundaries(H)
    return 2 * np.pi / W * (np.cos(e[:-1]) - np.cos(e[1:]))


# --------------------------------------------------------------------------
# Monte Carlo check of per-pixel noise statistics


@dataclass
class NonIIDReport:
    W: int
    H: int
    sigma2: float
    n_samples: int
    realizations: int
    rows: list[tuple[int, float, float, float, float]]  # v, sin, empirical, predicted, ratio
    flagged_rows: list[int]
    equator_row: int
    half_row: int
    variance_ratio: float
    covariances: list[tuple[tuple[int, int], tuple[int, int], float, float]]  # a, b, cov, stderr

    @property
    def ratio_ok(self) -> bool:
        return abs(self.variance_ratio - 2.0) <= 0.05 * 2.0

    @property
    def covariance_ok(self) -> bool:
        return all(abs(c) <= 3 * se for _, _, c, se in self.covariances)

    def to_text(self) -> str:
        lines = [
            f"# non-iid check W={self.W} H={self.H} sigma2={self.sigma2} "
            f"samples={self.n_samples} realizations={self.realizations}",
            "v, sin_theta, empirical_var, predicted_var, ratio",
        ]
        for v, s, emp, pred, ratio in self.rows:
            lines.append(f"{v}, {s:.6f}, {emp:.6g}, {pred:.6g}, {ratio:.4f}")
        lines.append(f"flagged_rows: {' '.join(map(str, self.flagged_rows)) or '-'}")
        lines.append(
            f"variance_ratio(row {self.half_row} / row {self.equator_row}): "
            f"{self.variance_ratio:.4f} target 2.0 +- 5% -> {'PASS' if self.ratio_ok else 'FAIL'}"
        )
        for a, b, c, se in self.covariances:
            lines.append(f"cov{a}{b}: {c:.4g} stderr {se:.4g} -> {'PASS' if abs(c) <= 3 * se else 'FAIL'}")
        return "\n".join(lines) + "\n"


def sample_sphere_field(
    W: int, H: int, sigma2: float, n_points: int, gen: np.random.Generator
) -> np.ndarray:
    """One realisation of area-averaged white noise, shape ``(H, W)``.

    ``n_points`` uniform-area points each carry an independent Gaussian value
    with variance ``sigma2 / dA`` (``dA = 4 pi / n_points``), so a region of
    area ``A`` integrates to variance ``sigma2 * A``. Each pixel stores the
    accumulated integral divided by its exact area.
    """
    dA = 4 * np.pi / n_points
    # z uniform on [-1, 1] and phi uniform is exactly uniform-area sampling
    z = gen.uniform(-1.0, 1.0, n_points)
    u = gen.uniform(0.0, W, n_points)
    eps = gen.standard_normal(n_points) * math.sqrt(sigma2 / dA)
    v = np.arccos(z) * (H / np.pi)
    col = np.floor(u + 0.5).astype(np.int64) % W
    row = np.minimum(np.floor(v + 0.5).astype(np.int64), H - 1)
    integral = np.bincount(row * W + col, weights=eps * dA, minlength=H * W).reshape(H, W)
    return integral / row_areas(W, H)[:, None]


def verify_non_iid(
    W: int,
    H: int,
    sigma2: float = 1.0,
    n_samples: int = 1_000_000,
    rng: RngStream | None = None,
    realizations: int = 200,
) -> NonIIDReport:
    """Estimate per-row variances and a few cross-pixel covariances.

    ``n_samples`` is the number of sphere points per field realisation.
    Row variances pool all ``W`` pixels of a row over every realisation.
    """
    if W != 2 * H:
        raise ContractViolation(f"ERP raster must have W = 2H, got W={W}, H={H}")
    if n_samples < 100_000:
        raise ContractViolation(f"n_samples must be >= 1e5, got {n_samples}")
    rng = rng or RngStream(0, "data")
    sums = np.zeros(H)
    sq = np.zeros(H)
    pairs = _covariance_pairs(W, H)
    prod = np.zeros(len(pairs))
    prod_sq = np.zeros(len(pairs))
    ia = np.array([a[0] * W + a[1] for a, _ in pairs])
    ib = np.array([b[0] * W + b[1] for _, b in pairs])
    for r in range(realizations):
        eta = sample_sphere_field(W, H, sigma2, n_samples, rng.generator(r))
        sums += eta.sum(axis=1)
        sq += (eta * eta).sum(axis=1)
        flat = eta.reshape(-1)
        pr = flat[ia] * flat[ib]
        prod += pr
        prod_sq += pr * pr
    m = realizations * W
    emp_var = sq / m - (sums / m) ** 2
    areas = row_areas(W, H)
    pred = sigma2 / areas
    sin_t = np.sin(np.pi * np.arange(H) / H)
    flagged = [int(v) for v in range(H) if sin_t[v] < 1e-6]
    rows = [
        (v, float(sin_t[v]), float(emp_var[v]), float(pred[v]), float(emp_var[v] / pred[v]))
        for v in range(H)
    ]
    equator = int(np.argmax(sin_t))
    half = _half_row(H, sin_t, flagged)
    # rows v and H - v share sin(theta); pool them
    half_var = 0.5 * (emp_var[half] + emp_var[H - half])
    ratio = float(half_var / emp_var[equator])
    covs = []
    for k, (a, b) in enumerate(pairs):
        mean = prod[k] / realizations
        var = prod_sq[k] / realizations - mean * mean
        covs.append((a, b, float(mean), float(math.sqrt(max(var, 0.0) / realizations))))
    return NonIIDReport(W, H, sigma2, n_samples, realizations, rows, flagged, equator, half, ratio, covs)


def _half_row(H: int, sin_t: np.ndarray, flagged: list[int]) -> int:
    cand = [v for v in range(H // 2) if v not in flagged]
    return min(cand, key=lambda v: abs(sin_t[v] - 0.5))


def _covariance_pairs(W: int, H: int) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """(row, col) pixel pairs: horizontal and vertical neighbours, the seam, far pairs."""
    e = H // 2
    q = H // 4
    return [
        ((e, 0), (e, 1)),
        ((e, W // 2), (e + 1, W // 2)),
        ((e, 0), (e, W - 1)),
        ((q, 3), (q, 4)),
        ((q, 5), (q + 1, 5)),
        ((q, 7), (H - q, W // 2 + 7)),
    ]


# --------------------------------------------------------------------------
# cyclic translation and circular padding


def cyclic_shift(x: torch.Tensor, v: int) -> torch.Tensor:
    """Rotate the trailing (width) axis by ``v`` columns: ``out[..., j] = x[..., j - v]``."""
    return torch.roll(x, shifts=int(v) % x.shape[-1], dims=-1) if x.shape[-1] else x


def pad_width(r: float, W: int) -> int:
    """Columns added on each side by :func:`circular_pad`; must be integral."""
    if r < 0:
        raise ContractViolation(f"padding ratio must be >= 0, got r={r}")
    half = Fraction(r).limit_denominator(1 << 20) * W / 2
    if half.denominator != 1:
        raise ContractViolation(f"padding r*W/2 must be an integer, got r={r}, W={W}")
    if half > W:
        raise ContractViolation(f"padding ratio r={r} wraps more than once around W={W}")
    return int(half)


def circular_pad(x: torch.Tensor, r: float) -> torch.Tensor:
    """``concat(x[..., -rW/2:], x, x[..., :rW/2])`` along the width axis."""
    k = pad_width(r, x.shape[-1])
    if k == 0:
        return x
    return torch.cat([x[..., -k:], x, x[..., :k]], dim=-1)


def circular_crop(x: torch.Tensor, k: int) -> torch.Tensor:
    """Drop ``k`` columns from each side (inverse of a pad of ``k`` columns)."""
    return x if k == 0 else x[..., k:-k]


def crop_padding(x: torch.Tensor, r: float, W: int) -> torch.Tensor:
    """Inverse of ``circular_pad(., r)`` for an original width ``W``."""
    return circular_crop(x, pad_width(r, W))
