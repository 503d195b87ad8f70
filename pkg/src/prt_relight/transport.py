"""Albedo textures and the explicit per-texel light-transport field.

Diffuse transport is an order-``L_d`` SH expansion in each texel's tangent
frame (+z = surface normal). Specular transport is a zonal expansion of
order ``L_s`` in the cosine between the light direction and the mirror
direction of the view, so it needs no azimuthal anchor.

Texel ``(row, col)`` of an ``R x R`` texture is centred at
``u = (col + 0.5) / R``, ``v = (row + 0.5) / R`` and stored at flat index
``row * R + col``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .sh import (ShVector, clamped_cosine_zonal, eval_sh_basis,
                 num_coeffs, sh_index, zonal_basis, zonal_project)

CHECKPOINT_MAGIC = b"PRTCKPT\0"
CHECKPOINT_VERSION = 1
SPECULAR_INIT_PEAK = 0.05
SPECULAR_INIT_EXPONENT = 8.0


@dataclass
class MaterialTextures:
    resolution: int
    rho_d: np.ndarray  # (q, 3)
    rho_s: np.ndarray  # (q, 3)

    @property
    def q(self) -> int:
        return self.resolution ** 2


@dataclass
class TransportField:
    resolution: int
    diffuse_order: int
    specular_order: int
    diffuse: np.ndarray   # (q, 3, (L_d+1)^2)
    specular: np.ndarray  # (q, 3, L_s+1)
    softplus: bool = False

    @property
    def kd(self) -> int:
        return num_coeffs(self.diffuse_order)

    @property
    def ks(self) -> int:
        return self.specular_order + 1


@dataclass
class Footprint:
    """Bilinear taps of packed pixels into a texture, as a sparse (P, q) matrix."""

    matrix: sp.csr_matrix
    texels: np.ndarray   # (P, 4)
    weights: np.ndarray  # (P, 4)

    def gather(self, tex: np.ndarray) -> np.ndarray:
        flat = tex.reshape(tex.shape[0], -1)
        return (self.matrix @ flat).reshape((self.matrix.shape[0],) + tex.shape[1:])

    def scatter(self, grad: np.ndarray) -> np.ndarray:
        flat = grad.reshape(grad.shape[0], -1)
        return (self.matrix.T @ flat).reshape((self.matrix.shape[1],) + grad.shape[1:])


def bilinear_footprint(uv: np.ndarray, resolution: int) -> Footprint:
    """Clamp-to-edge bilinear taps for uv coordinates (P, 2)."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    r = resolution
    x = uv[:, 0] * r - 0.5
    y = uv[:, 1] * r - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx, fy = x - x0, y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    cols = [np.clip(x0, 0, r - 1), np.clip(x0 + 1, 0, r - 1)]
    rows = [np.clip(y0, 0, r - 1), np.clip(y0 + 1, 0, r - 1)]
    texels = np.stack([rows[0] * r + cols[0], rows[0] * r + cols[1],
                       rows[1] * r + cols[0], rows[1] * r + cols[1]], axis=1)
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    p = len(uv)
    m = sp.csr_matrix((weights.ravel(), (np.repeat(np.arange(p), 4), texels.ravel())), shape=(p, r * r))
    return Footprint(m, texels, weights)


def sample_textures(tex: np.ndarray, uv: np.ndarray, resolution: int) -> tuple[np.ndarray, Footprint]:
    """Bilinearly sample per-texel data ``tex`` (q, ...) at ``uv``; returns values and taps."""
    fp = bilinear_footprint(uv, resolution)
    return fp.gather(tex), fp


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def diffuse_transport(coeffs: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Raw diffuse transport (P, 3, m) from coefficients (P, 3, K) and basis (m, K) or (P, m, K)."""
    if basis.ndim == 2:
        return coeffs @ basis.T
    return coeffs @ np.swapaxes(basis, 1, 2)


def eval_diffuse_transport(field: TransportField, uv: np.ndarray, tangent_dirs: np.ndarray) -> np.ndarray:
    """Transport per direction and channel, (P, m, 3), for tangent-space dirs (m, 3) or (P, m, 3)."""
    coeffs, _ = sample_textures(field.diffuse, uv, field.resolution)
    basis = eval_sh_basis(tangent_dirs, field.diffuse_order)
    t = diffuse_transport(coeffs, basis)
    if field.softplus:
        t = softplus(t)
    return np.swapaxes(t, 1, 2)


def mirror_direction(normal: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    return 2 * np.sum(view_dir * normal, axis=-1, keepdims=True) * normal - view_dir


def specular_basis(world_dirs: np.ndarray, normal: np.ndarray, view_dir: np.ndarray, order: int) -> np.ndarray:
    """Zonal basis at the cosine between each sample and the mirror direction, (P, m, L_s+1)."""
    r = mirror_direction(normal, view_dir)
    cos = np.clip(np.einsum("pmi,pi->pm", world_dirs, r), -1.0, 1.0)
    return zonal_basis(cos, order)


def eval_specular_transport(field: TransportField, uv, world_dirs, normal, view_dir) -> np.ndarray:
    """Zonal specular transport, (P, m, 3)."""
    coeffs, _ = sample_textures(field.specular, uv, field.resolution)
    basis = specular_basis(world_dirs, normal, view_dir, field.specular_order)
    t = coeffs @ np.swapaxes(basis, 1, 2)
    if field.softplus:
        t = softplus(t)
    return np.swapaxes(t, 1, 2)


def clamped_cosine_sh(order: int) -> np.ndarray:
    """Full SH vector (m = 0 entries only) of max(cos theta, 0) about +z."""
    z = clamped_cosine_zonal(order)
    out = np.zeros(num_coeffs(order))
    for l in range(order + 1):
        out[sh_index(l, 0)] = z[l]
    return out


def specular_init_lobe(order: int, peak: float = SPECULAR_INIT_PEAK) -> np.ndarray:
    lobe = zonal_project(lambda t: np.maximum(t, 0.0) ** SPECULAR_INIT_EXPONENT, order)
    return lobe * (peak / float(zonal_basis(np.array(1.0), order) @ lobe))


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_parameters(resolution: int = 256, diffuse_order: int = 4, specular_order: int = 8,
                    diffuse_scale: float = 1.0, softplus_transport: bool = False
                    ) -> tuple[MaterialTextures, TransportField]:
    """Deterministic starting point: albedo 0.5, clamped-cosine diffuse lobe, faint specular lobe.

    ``diffuse_scale`` multiplies the clamped-cosine lobe (1 / pi gives the
    Lambertian transport max(cos, 0) / pi).
    """
    if resolution < 1 or not 0 <= diffuse_order <= 10 or not 0 <= specular_order <= 10:
        raise ValueError("invalid texture resolution or transport order")
    q = resolution * resolution
    tex = MaterialTextures(resolution, np.full((q, 3), 0.5), np.full((q, 3), 0.5))
    d = clamped_cosine_sh(diffuse_order) * diffuse_scale
    s = specular_init_lobe(specular_order)
    if softplus_transport:
        # match the softplus output to the lobe values on the sampled peak only
        d = np.zeros_like(d)
        d[0] = _inverse_softplus(np.array(0.9 * diffuse_scale))[()] / eval_sh_basis(
            np.array([0.0, 0.0, 1.0]), 0)[0]
        s = np.zeros_like(s)
        s[0] = _inverse_softplus(np.array(SPECULAR_INIT_PEAK))[()] / zonal_basis(np.array(1.0), 0)[0]
    field = TransportField(
        resolution, diffuse_order, specular_order,
        np.broadcast_to(d, (q, 3, len(d))).copy(),
        np.broadcast_to(s, (q, 3, len(s))).copy(),
        softplus_transport,
    )
    return tex, field


# --- checkpoints -------------------------------------------------------------------
#
# Layout (little-endian):
#   magic b"PRTCKPT\0" | u32 version | u32 resolution | u32 L_d | u32 L_s
#   u32 illumination order | u32 flags (bit0 softplus, bit1 adam state) | u64 step
#   f8 arrays: rho_d[q,3] rho_s[q,3] diffuse[q,3,Kd] specular[q,3,Ks]
#              illum_current[K,3] illum_initial[K,3]
#   if adam state: m and v for rho_d, rho_s, diffuse, specular, illum_current

PARAM_BLOCKS = ("rho_d", "rho_s", "diffuse", "specular", "illum")


def save_checkpoint(path, textures: MaterialTextures, field: TransportField, illum_current: ShVector,
                    illum_initial: ShVector, adam=None) -> None:
    flags = int(field.softplus) | (2 if adam is not None else 0)
    step = adam.step if adam is not None else 0
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<6IQ", CHECKPOINT_VERSION, textures.resolution, field.diffuse_order,
                             field.specular_order, illum_current.order, flags, step))
        for arr in (textures.rho_d, textures.rho_s, field.diffuse, field.specular,
                    illum_current.coeffs, illum_initial.coeffs):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if adam is not None:
            for name in PARAM_BLOCKS:
                fh.write(np.ascontiguousarray(adam.m[name], dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(adam.v[name], dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path):
    """Returns (textures, field, illum_current, illum_initial, adam_arrays_or_None, step)."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, res, ld, ls, lo, flags, step = struct.unpack_from("<6IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version} unsupported")
    q, kd, ks, kl = res * res, num_coeffs(ld), ls + 1, num_coeffs(lo)
    offset = 8 + struct.calcsize("<6IQ")

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape))
        arr = np.frombuffer(data, "<f8", n, offset).reshape(shape).astype(np.float64)
        offset += 8 * n
        return arr

    shapes = {"rho_d": (q, 3), "rho_s": (q, 3), "diffuse": (q, 3, kd), "specular": (q, 3, ks), "illum": (kl, 3)}
    rho_d, rho_s, diff, spec = take(shapes["rho_d"]), take(shapes["rho_s"]), take(shapes["diffuse"]), take(shapes["specular"])
    cur, init = ShVector(lo, take((kl, 3))), ShVector(lo, take((kl, 3)))
    adam = None
    if flags & 2:
        adam = {}
        for name in PARAM_BLOCKS:
            adam[name] = (take(shapes[name]), take(shapes[name]))
    tex = MaterialTextures(res, rho_d, rho_s)
    field = TransportField(res, ld, ls, diff, spec, bool(flags & 1))
    return tex, field, cur, init, adam, step

