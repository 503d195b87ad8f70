"""Equirectangular environment maps, panorama stitching, and SH initialization.

Mapping (zenith +Y): ``v = acos(y) / pi`` and ``u = (atan2(x, -z) + pi) / (2 pi)``,
so -Z sits at the map centre. Texel (row, col) covers
``[col/W, (col+1)/W) x [row/H, (row+1)/H)`` in (u, v).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio
from .scene import SceneDataset
from .sh import ILLUMINATION_ORDER, ShIllumination, project_texels

log = logging.getLogger(__name__)


class NoBackgroundError(ValueError):
    pass


@dataclass
class EnvironmentMap:
    texels: np.ndarray     # (H, W, 3)
    coverage: np.ndarray   # (H, W) bool

    def __post_init__(self):
        self.texels = np.asarray(self.texels, dtype=np.float64)
        self.coverage = np.asarray(self.coverage, dtype=bool)
        h, w = self.texels.shape[:2]
        if w != 2 * h or self.texels.shape[2:] != (3,) or self.coverage.shape != (h, w):
            raise ValueError(f"environment map must be (H, 2H, 3) with matching coverage, got {self.texels.shape}")

    @property
    def width(self) -> int:
        return self.texels.shape[1]

    @property
    def height(self) -> int:
        return self.texels.shape[0]

    @classmethod
    def from_function(cls, fn, height: int) -> "EnvironmentMap":
        dirs = texel_directions(2 * height, height)
        tex = np.asarray(fn(dirs.reshape(-1, 3))).reshape(height, 2 * height, 3)
        return cls(tex, np.ones((height, 2 * height), bool))

    def lookup(self, dirs: np.ndarray) -> np.ndarray:
        """Nearest-texel radiance."""
        row, col = direction_to_texel(dirs, self.width, self.height)
        return self.texels[row, col]

    def covered(self, dirs: np.ndarray) -> np.ndarray:
        row, col = direction_to_texel(dirs, self.width, self.height)
        return self.coverage[row, col]


def direction_to_equirect(dirs) -> np.ndarray:
    """(u, v) for unit directions; u is 0.5 on the polar axis."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    v = np.arccos(np.clip(y, -1.0, 1.0)) / math.pi
    polar = x * x + z * z < 1e-24
    u = np.where(polar, 0.5, (np.arctan2(x, -z) + math.pi) / (2 * math.pi))
    return np.stack([u, v], axis=-1)


def equirect_to_direction(uv) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    theta = uv[..., 1] * math.pi
    phi = uv[..., 0] * 2 * math.pi - math.pi
    s = np.sin(theta)
    return np.stack([s * np.sin(phi), np.cos(theta), -s * np.cos(phi)], axis=-1)


def direction_to_texel(dirs, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    uv = direction_to_equirect(dirs)
    col = np.floor(uv[..., 0] * width).astype(np.int64) % width
    row = np.clip(np.floor(uv[..., 1] * height).astype(np.int64), 0, height - 1)
    return row, col


def texel_directions(width: int, height: int) -> np.ndarray:
    """Unit directions through texel centres, (H, W, 3)."""
    v = (np.arange(height) + 0.5) / height
    u = (np.arange(width) + 0.5) / width
    uu, vv = np.meshgrid(u, v)
    return equirect_to_direction(np.stack([uu, vv], axis=-1))


def lower_median_bins(bins: np.ndarray, values: np.ndarray, n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin lower median of ``values`` (N, C); returns (medians, counts)."""
    counts = np.bincount(bins, minlength=n_bins)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    has = counts > 0
    pick = starts[has] + (counts[has] - 1) // 2
    med = np.zeros((n_bins, values.shape[1]))
    for c in range(values.shape[1]):
        order = np.lexsort((values[:, c], bins))
        med[has, c] = values[order, c][pick]
    return med, counts


def stitch_environment(dataset: SceneDataset, map_height: int = 128, view_ids=None) -> EnvironmentMap:
    """Median-stitch background pixels of the given views into a panorama."""
    w, h = 2 * map_height, map_height
    view_ids = list(view_ids) if view_ids is not None else dataset.view_ids
    all_bins, all_vals = [], []
    for vid in view_ids:
        view = dataset.view(vid)
        bg = ~view.mask
        if not bg.any():
            continue
        rays = dataset.cameras[vid].pixel_rays()[bg]
        row, col = direction_to_texel(rays, w, h)
        all_bins.append(row * w + col)
        all_vals.append(view.pixels[bg])
    if not all_bins:
        raise NoBackgroundError(
            "no background pixels in any view; supply a ground-truth illumination (--env or --sh) instead")
    bins = np.concatenate(all_bins)
    vals = np.concatenate(all_vals)
    med, counts = lower_median_bins(bins, vals, w * h)
    return EnvironmentMap(med.reshape(h, w, 3), (counts > 0).reshape(h, w))


def init_illumination(env: EnvironmentMap, order: int = ILLUMINATION_ORDER) -> ShIllumination:
    """Project covered texels onto SH; uncovered texels contribute zero."""
    if not env.coverage.any():
        raise ValueError("environment map has no covered texels")
    sh = project_texels(env.texels, order, weights_mask=env.coverage.astype(np.float64))
    return ShIllumination.from_initial(sh, coverage=env.coverage.copy())


def save_environment(path, env: EnvironmentMap) -> Path:
    """Write ``<path>.pfm`` radiance and a sibling ``<stem>_coverage.png``."""
    path = Path(path)
    imageio.write_pfm(path, env.texels)
    cov = path.with_name(path.stem + "_coverage.png")
    imageio.write_mask(cov, env.coverage)
    return cov


def load_environment(path, srgb: bool = False) -> EnvironmentMap:
    """Load an equirect PFM/PNG; a sibling coverage PNG is used when present."""
    path = Path(path)
    tex = imageio.read_image(path, srgb=srgb)
    if tex.ndim == 2:
        tex = np.repeat(tex[..., None], 3, axis=2)
    cov_path = path.with_name(path.stem + "_coverage.png")
    cov = imageio.read_mask(cov_path) if cov_path.is_file() else np.ones(tex.shape[:2], bool)
    return EnvironmentMap(tex, cov)
