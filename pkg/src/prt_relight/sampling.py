"""Per-pixel light-direction sampling for the diffuse and specular components.

All per-pixel arrays here are *packed*: one row per masked G-buffer pixel in
row-major order (``np.nonzero(gbuffer.mask)``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .raster import GBuffer

Z_AXIS = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class SamplingConfig:
    diffuse_half_angles: tuple[float, ...] = (20.0, 40.0)
    specular_half_angles: tuple[float, ...] = (5.0, 10.0)
    samples_per_cone: int = 8
    include_axis: bool = True

    def __post_init__(self):
        for a in (*self.diffuse_half_angles, *self.specular_half_angles):
            if not 0 <= a < 90:
                raise ValueError(f"cone half-angles must lie in [0, 90), got {a}")
        if self.samples_per_cone < 1:
            raise ValueError("samples_per_cone must be >= 1")

    @property
    def diffuse_count(self) -> int:
        return int(self.include_axis) + len(self.diffuse_half_angles) * self.samples_per_cone

    @property
    def specular_count(self) -> int:
        return int(self.include_axis) + len(self.specular_half_angles) * self.samples_per_cone

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingConfig":
        kw = {k: d[k] for k in ("diffuse_half_angles", "specular_half_angles",
                                "samples_per_cone", "include_axis") if k in d}
        for k in ("diffuse_half_angles", "specular_half_angles"):
            if k in kw:
                kw[k] = tuple(float(a) for a in kw[k])
        return cls(**kw)


def orthonormal_frame(axis: np.ndarray, reference: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing ``axis`` to a right-handed frame.

    With ``reference`` the first vector is ``reference`` orthogonalized
    against the axis; otherwise a branch-based construction (Duff et al.
    2017) is used.
    """
    a = np.asarray(axis, dtype=np.float64)
    if reference is not None:
        t = np.asarray(reference, dtype=np.float64)
        t = t - np.dot(t, a) * a
        t /= np.linalg.norm(t)
        return t, np.cross(a, t)
    sign = math.copysign(1.0, a[2])
    k = -1.0 / (sign + a[2])
    b = a[0] * a[1] * k
    t = np.array([1.0 + sign * a[0] * a[0] * k, sign * b, -sign * a[0]])
    bt = np.array([b, sign + a[1] * a[1] * k, -a[1]])
    return t, bt


def sample_cone_directions(axis, half_angle: float, count: int, phase: float = 0.0,
                           reference=None) -> np.ndarray:
    """``count`` directions at ``half_angle`` degrees from ``axis``, evenly spaced in azimuth."""
    a = np.asarray(axis, dtype=np.float64)
    if abs(np.linalg.norm(a) - 1.0) > 1e-6:
        raise ValueError("cone axis must be a unit vector")
    t, b = orthonormal_frame(a, reference)
    alpha = math.radians(half_angle)
    phi = phase + 2 * math.pi * np.arange(count) / count
    ring = np.cos(phi)[:, None] * t + np.sin(phi)[:, None] * b
    return math.cos(alpha) * a + math.sin(alpha) * ring


def tangent_cone_set(half_angles, config: SamplingConfig) -> np.ndarray:
    """Axis sample (optional) followed by one ring per half-angle, in tangent space."""
    dirs = [Z_AXIS[None]] if config.include_axis else []
    step = math.pi / config.samples_per_cone
    for k, ang in enumerate(half_angles):
        dirs.append(sample_cone_directions(Z_AXIS, ang, config.samples_per_cone,
                                           phase=(k % 2) * step, reference=np.array([1.0, 0.0, 0.0])))
    return np.concatenate(dirs, axis=0)


def packed(gbuffer: GBuffer, name: str) -> np.ndarray:
    return getattr(gbuffer, name)[gbuffer.mask]


def sample_diffuse_dirs(gbuffer: GBuffer, config: SamplingConfig) -> np.ndarray:
    """Tangent-space diffuse samples, (P, m_d, 3); identical for every pixel."""
    base = tangent_cone_set(config.diffuse_half_angles, config)
    return np.broadcast_to(base, (int(gbuffer.mask.sum()),) + base.shape)


def reflect(w: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Mirror ``w`` (pointing away from the surface) about ``h``: 2 (w.h) h - w."""
    return 2 * np.sum(w * h, axis=-1, keepdims=True) * h - w


def sample_specular_dirs(gbuffer: GBuffer, config: SamplingConfig) -> np.ndarray:
    """Tangent-space specular samples, (P, m_s, 3): view reflected about halfway cones."""
    halfway = tangent_cone_set(config.specular_half_angles, config)
    tbn = packed_tbn(gbuffer)
    wo = np.einsum("pji,pj->pi", tbn, packed(gbuffer, "view_dir"))
    return reflect(wo[:, None, :], halfway[None, :, :])


def packed_tbn(gbuffer: GBuffer) -> np.ndarray:
    return np.stack([packed(gbuffer, "tangent"), packed(gbuffer, "bitangent"),
                     packed(gbuffer, "normal")], axis=-1)


def tangent_to_world(dirs: np.ndarray, tbn: np.ndarray) -> np.ndarray:
    """Apply each pixel's R_TBN (columns t, b, n) to its tangent-space samples."""
    return np.einsum("pij,pmj->pmi", tbn, dirs)


def world_to_tangent(dirs: np.ndarray, tbn: np.ndarray) -> np.ndarray:
    return np.einsum("pji,pmj->pmi", tbn, dirs)


@dataclass
class LightSampleSet:
    """Diffuse and specular sample directions per packed pixel, in both frames."""

    diffuse_tangent: np.ndarray
    diffuse_world: np.ndarray
    specular_world: np.ndarray
    specular_tangent: np.ndarray | None = field(default=None, repr=False)

    @property
    def m_d(self) -> int:
        return self.diffuse_world.shape[1]

    @property
    def m_s(self) -> int:
        return self.specular_world.shape[1]

    @property
    def pixels(self) -> int:
        return self.diffuse_world.shape[0]

    @classmethod
    def from_gbuffer(cls, gbuffer: GBuffer, config: SamplingConfig) -> "LightSampleSet":
        tbn = packed_tbn(gbuffer)
        d_t = sample_diffuse_dirs(gbuffer, config)
        s_t = sample_specular_dirs(gbuffer, config)
        return cls(d_t, tangent_to_world(d_t, tbn), tangent_to_world(s_t, tbn), s_t)

    @classmethod
    def from_world(cls, gbuffer: GBuffer, world_dirs: np.ndarray) -> "LightSampleSet":
        """Use the same world directions (m, 3) for both components at every pixel."""
        tbn = packed_tbn(gbuffer)
        w = np.broadcast_to(world_dirs, (tbn.shape[0],) + world_dirs.shape)
        t = world_to_tangent(w, tbn)
        return cls(t, w, w, t)
