"""Training losses: image l1, transport chromaticity, illumination, albedo, and their sum.

Each loss has a ``*_grad`` twin returning ``(value, gradient)`` for the
hand-written backward pass; the plain function returns the value only.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .envlight import direction_to_texel
from .sh import ShIllumination, ShVector, eval_sh_basis, transpose_matmul, uniform_sphere
from .transport import MaterialTextures

log = logging.getLogger(__name__)

CHROMA_EPS = 1e-8
ALBEDO_TARGET = 0.5


@dataclass(frozen=True)
class LossWeights:
    lambda_chr: float = 1.0
    lambda_illum: float = 1.0
    lambda_alb: float = 1.0

    def __post_init__(self):
        for name in ("lambda_chr", "lambda_illum", "lambda_alb"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class LossReport:
    im: float
    chr: float
    illum: float
    alb: float
    total: float
    p: int = 0
    q: int = 0

    def as_row(self) -> list[float]:
        return [self.im, self.chr, self.illum, self.alb, self.total]


def _packed(image, mask):
    image = np.asarray(image, dtype=np.float64)
    if mask is None:
        return image.reshape(-1, 3)
    return image[np.asarray(mask, dtype=bool)]


def image_loss_grad(rendered: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over pixels of the channel-summed l1 error, on packed (P, 3) arrays."""
    if rendered.shape != target.shape:
        raise ValueError(f"rendered {rendered.shape} and target {target.shape} differ")
    n = rendered.shape[0]
    if n == 0:
        raise ValueError("image loss over an empty mask")
    diff = rendered - target
    return float(np.sum(np.abs(diff)) / n), np.sign(diff) / n


def image_loss(rendered, target, mask=None) -> float:
    r, t = _packed(rendered, mask), _packed(target, mask)
    return image_loss_grad(r, t)[0]


def chroma_weights(target_pixels: np.ndarray) -> np.ndarray:
    """w(x) = min(20 ||I(x)||_2, 1) from the reference image."""
    return np.minimum(20.0 * np.linalg.norm(target_pixels, axis=-1), 1.0)


def chromaticity_loss_grad(transport: np.ndarray, weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Chromaticity spread of per-sample transports (P, m, 3).

    Per pixel the loss is ``w * sum_j (1 - u_j . M)`` over valid samples,
    where ``u_j = T_j / |T_j|`` and ``M = s / |s|`` with ``s = sum_j u_j``;
    this equals ``w * (count - |s|)``, normalized by ``n * m``. Samples with
    ``|T_j| < 1e-8`` contribute neither to ``M`` nor to the loss.
    """
    p, m, _ = transport.shape
    if m < 2:
        raise ValueError("chromaticity loss needs at least 2 samples per pixel")
    norm = np.linalg.norm(transport, axis=-1)
    valid = norm >= CHROMA_EPS
    safe = np.where(valid, norm, 1.0)
    u = np.where(valid[..., None], transport / safe[..., None], 0.0)
    s = u.sum(axis=1)
    s_norm = np.linalg.norm(s, axis=-1)
    count = valid.sum(axis=1)
    scale = 1.0 / (p * m)
    value = float(np.sum(weights * (count - s_norm)) * scale)
    ok = s_norm > 0
    mean = np.where(ok[:, None], s / np.where(ok, s_norm, 1.0)[:, None], 0.0)
    proj = np.sum(u * mean[:, None, :], axis=-1, keepdims=True)
    # d(-|s|)/du_j = -M ; du/dT = (I - u u^T) / |T|
    grad = -(mean[:, None, :] - proj * u) / safe[..., None]
    grad = np.where(valid[..., None], grad, 0.0) * (weights[:, None, None] * scale)
    return value, grad


def chromaticity_loss(transport, target_image, mask=None) -> float:
    """Loss for one sample set; ``transport`` is (P, m, 3) over the masked pixels."""
    return chromaticity_loss_grad(np.asarray(transport, dtype=np.float64),
                                  chroma_weights(_packed(target_image, mask)))[0]


class IlluminationPrior:
    """Frozen sphere directions inside the initial coverage with their SH basis."""

    def __init__(self, illum: ShIllumination, coverage: np.ndarray | None = None,
                 dir_count: int = 4096, seed: int = 0):
        coverage = illum.coverage if coverage is None else coverage
        dirs = uniform_sphere(dir_count, np.random.default_rng(seed))
        if coverage is not None:
            cov = np.asarray(coverage, dtype=bool)
            row, col = direction_to_texel(dirs, cov.shape[1], cov.shape[0])
            dirs = dirs[cov[row, col]]
        self.dirs = dirs
        self.p = len(dirs)
        self.basis = eval_sh_basis(dirs, illum.initial.order, check_unit=False)
        self.reference = self.basis @ illum.initial.coeffs
        if self.p == 0:
            log.warning("illumination loss: no sampled direction falls inside the covered region")

    def loss_grad(self, current: ShVector) -> tuple[float, np.ndarray]:
        if self.p == 0:
            return 0.0, np.zeros_like(current.coeffs)
        diff = self.basis @ current.coeffs - self.reference
        return float(np.sum(np.abs(diff)) / self.p), transpose_matmul(self.basis, np.sign(diff)) / self.p


def illumination_loss(illum: ShIllumination, coverage=None, dir_count: int = 4096, seed: int = 0) -> float:
    return IlluminationPrior(illum, coverage, dir_count, seed).loss_grad(illum.current)[0]


def albedo_loss_grad(textures: MaterialTextures) -> tuple[float, np.ndarray, np.ndarray]:
    q = textures.q
    dd = textures.rho_d - ALBEDO_TARGET
    ds = textures.rho_s - ALBEDO_TARGET
    value = float((np.sum(np.abs(dd)) + np.sum(np.abs(ds))) / q)
    return value, np.sign(dd) / q, np.sign(ds) / q


def albedo_loss(textures: MaterialTextures) -> float:
    return albedo_loss_grad(textures)[0]


def total_loss(parts: dict, weights: LossWeights = LossWeights(), p: int = 0, q: int = 0) -> LossReport:
    """Weighted sum ``im + l_chr chr + l_illum illum + l_alb alb``."""
    values = {}
    for name in ("im", "chr", "illum", "alb"):
        v = float(parts.get(name, 0.0))
        if not math.isfinite(v):
            raise FloatingPointError(f"loss part '{name}' is not finite")
        values[name] = v
    total = (values["im"] + weights.lambda_chr * values["chr"]
             + weights.lambda_illum * values["illum"] + weights.lambda_alb * values["alb"])
    return LossReport(total=total, p=p, q=q, **values)
