"""Software rasterization of the mesh proxy into per-pixel G-buffers.

Conventions: pixel centres sit at half-integer coordinates, shared edges
follow the top-left fill rule, back faces are not culled, and the nearest
fragment (smallest camera-space z) wins. Attributes are interpolated with
perspective-correct barycentrics.

G-buffer cache blob (little-endian)::

    b"GBUF" | u32 version | u32 width | u32 height
    uv f8[H,W,2] | normal f8[H,W,3] | tangent f8[H,W,3] | bitangent f8[H,W,3]
    view_dir f8[H,W,3] | position f8[H,W,3] | depth f8[H,W] | mask u1[H,W]

Outside the mask every float field holds 0 and depth holds +inf.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Mesh
from .scene import Camera

GBUFFER_VERSION = 1
NEAR = 1e-6


@dataclass
class TangentFrames:
    tangents: np.ndarray
    bitangents: np.ndarray
    fallback: np.ndarray  # vertex indices that needed an arbitrary tangent


def _orthogonal_axis(n: np.ndarray) -> np.ndarray:
    """A unit vector perpendicular to each row of ``n``."""
    pick = np.where(np.abs(n[..., :1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    t = pick - np.sum(pick * n, axis=-1, keepdims=True) * n
    return t / np.linalg.norm(t, axis=-1, keepdims=True)


def compute_tangent_frames(mesh: Mesh) -> TangentFrames:
    """Per-vertex tangents from uv gradients, Gram-Schmidt against the normal."""
    p = mesh.vertices[mesh.faces]
    uv = mesh.uvs[mesh.faces]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    d1, d2 = uv[:, 1] - uv[:, 0], uv[:, 2] - uv[:, 0]
    det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    face_t = (e1 * d2[:, 1:2] - e2 * d1[:, 1:2]) * inv[:, None]
    acc = np.zeros_like(mesh.vertices)
    for c in range(3):
        np.add.at(acc, mesh.faces[:, c], face_t)
    n = mesh.normals
    t = acc - np.sum(acc * n, axis=1, keepdims=True) * n
    length = np.linalg.norm(t, axis=1)
    bad = length < 1e-10
    t = np.where(bad[:, None], _orthogonal_axis(n), t / np.where(bad, 1.0, length)[:, None])
    return TangentFrames(t, np.cross(n, t), np.nonzero(bad)[0])


@dataclass
class GBuffer:
    width: int
    height: int
    uv: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray
    bitangent: np.ndarray
    view_dir: np.ndarray
    position: np.ndarray
    depth: np.ndarray
    mask: np.ndarray

    @property
    def tbn(self) -> np.ndarray:
        """Per-pixel R_TBN with columns (tangent, bitangent, normal), (H, W, 3, 3)."""
        return np.stack([self.tangent, self.bitangent, self.normal], axis=-1)

    @classmethod
    def empty(cls, width: int, height: int) -> "GBuffer":
        z3 = np.zeros((height, width, 3))
        return cls(width, height, np.zeros((height, width, 2)), z3.copy(), z3.copy(), z3.copy(),
                   z3.copy(), z3.copy(), np.full((height, width), np.inf), np.zeros((height, width), bool))


def _is_top_left(ex: float, ey: float) -> bool:
    return ey < 0 or (ey == 0 and ex > 0)


def rasterize(mesh: Mesh, camera: Camera, tangents: TangentFrames | None = None) -> GBuffer:
    """Rasterize ``mesh`` through ``camera`` into a G-buffer."""
    if tangents is None:
        tangents = compute_tangent_frames(mesh)
    w, h = camera.width, camera.height
    cam = mesh.vertices @ camera.rotation.T + camera.translation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = camera.fx * cam[:, 0] / z + camera.cx
        sy = camera.fy * cam[:, 1] / z + camera.cy

    zbuf = np.full((h, w), np.inf)
    tri_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))

    for f, (a, b, c) in enumerate(mesh.faces):
        za, zb, zc = z[a], z[b], z[c]
        if za <= NEAR or zb <= NEAR or zc <= NEAR:
            continue
        xs = (sx[a], sx[b], sx[c])
        ys = (sy[a], sy[b], sy[c])
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (ys[1] - ys[0]) * (xs[2] - xs[0])
        if area == 0 or not np.isfinite(area):
            continue
        if area < 0:
            order = (0, 2, 1)
            area = -area
        else:
            order = (0, 1, 2)
        vx = [xs[k] for k in order]
        vy = [ys[k] for k in order]
        i0 = max(int(np.floor(min(vx) - 0.5)), 0)
        i1 = min(int(np.ceil(max(vx) - 0.5)), w - 1)
        j0 = max(int(np.floor(min(vy) - 0.5)), 0)
        j1 = min(int(np.ceil(max(vy) - 0.5)), h - 1)
        if i0 > i1 or j0 > j1:
            continue
        px = np.arange(i0, i1 + 1) + 0.5
        py = np.arange(j0, j1 + 1)[:, None] + 0.5
        inside = np.ones((j1 - j0 + 1, i1 - i0 + 1), dtype=bool)
        weights = []
        for e in range(3):
            ax, ay = vx[(e + 1) % 3], vy[(e + 1) % 3]
            bx, by = vx[(e + 2) % 3], vy[(e + 2) % 3]
            ex, ey = bx - ax, by - ay
            val = ex * (py - ay) - ey * (px - ax)
            inside &= (val > 0) | ((val == 0) & _is_top_left(ex, ey))
            weights.append(val)
        if not inside.any():
            continue
        # weights[e] is the barycentric (times area) of vertex order[e]
        lam = np.zeros((3,) + inside.shape)
        for e in range(3):
            lam[order[e]] = weights[e] / area
        inv = lam[0] / za + lam[1] / zb + lam[2] / zc
        depth = 1.0 / inv
        block = zbuf[j0:j1 + 1, i0:i1 + 1]
        win = inside & (depth < block)
        if not win.any():
            continue
        block[win] = depth[win]
        tri_id[j0:j1 + 1, i0:i1 + 1][win] = f
        persp = np.stack([lam[0] / za, lam[1] / zb, lam[2] / zc], axis=-1) / inv[..., None]
        bary[j0:j1 + 1, i0:i1 + 1][win] = persp[win]

    gb = GBuffer.empty(w, h)
    mask = tri_id >= 0
    gb.mask = mask
    if not mask.any():
        return gb
    fid = tri_id[mask]
    bw = bary[mask][..., None]
    corners = mesh.faces[fid]

    def interp(attr):
        return np.sum(attr[corners] * bw, axis=1)

    uv = np.clip(interp(mesh.uvs), 0.0, 1.0)
    pos = interp(mesh.vertices)
    n = interp(mesh.normals)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    t = interp(tangents.tangents)
    t -= np.sum(t * n, axis=1, keepdims=True) * n
    tl = np.linalg.norm(t, axis=1)
    bad = tl < 1e-10
    t = np.where(bad[:, None], _orthogonal_axis(n), t / np.where(bad, 1.0, tl)[:, None])
    bt = np.cross(n, t)
    v = camera.center - pos
    v /= np.linalg.norm(v, axis=1, keepdims=True)

    gb.uv[mask] = uv
    gb.position[mask] = pos
    gb.normal[mask] = n
    gb.tangent[mask] = t
    gb.bitangent[mask] = bt
    gb.view_dir[mask] = v
    gb.depth[mask] = zbuf[mask]
    return gb


# --- cache -----------------------------------------------------------------------

_FIELDS = ("uv", "normal", "tangent", "bitangent", "view_dir", "position", "depth")


def save_gbuffer(path, gb: GBuffer) -> None:
    with open(path, "wb") as fh:
        fh.write(b"GBUF" + struct.pack("<III", GBUFFER_VERSION, gb.width, gb.height))
        for name in _FIELDS:
            fh.write(np.ascontiguousarray(getattr(gb, name), dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(gb.mask, dtype=np.uint8).tobytes())


def load_gbuffer(path) -> GBuffer:
    data = Path(path).read_bytes()
    if data[:4] != b"GBUF":
        raise ValueError(f"{path}: not a G-buffer blob")
    version, w, h = struct.unpack_from("<III", data, 4)
    if version != GBUFFER_VERSION:
        raise ValueError(f"{path}: G-buffer version {version}, expected {GBUFFER_VERSION}")
    offset = 16
    shapes = {"uv": (h, w, 2), "depth": (h, w)}
    arrays = {}
    for name in _FIELDS:
        shape = shapes.get(name, (h, w, 3))
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, "<f8", count, offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    mask = np.frombuffer(data, np.uint8, h * w, offset).reshape(h, w).astype(bool)
    return GBuffer(w, h, mask=mask, **arrays)


def cache_key(mesh: Mesh, camera: Camera) -> str:
    cam = hashlib.sha256(np.ascontiguousarray(camera.extrinsic).tobytes()
                         + repr((camera.fx, camera.fy, camera.cx, camera.cy)).encode()).hexdigest()[:8]
    return f"{mesh.digest()}_{camera.id}_{camera.width}x{camera.height}_{cam}_v{GBUFFER_VERSION}"


def cached_rasterize(mesh: Mesh, camera: Camera, tangents: TangentFrames | None = None,
                     cache_dir=None) -> GBuffer:
    """Rasterize, reusing a blob under ``cache_dir`` (default ``$PRT_RELIGHT_CACHE``)."""
    cache_dir = cache_dir or os.environ.get("PRT_RELIGHT_CACHE")
    if not cache_dir:
        return rasterize(mesh, camera, tangents)
    path = Path(cache_dir) / f"{cache_key(mesh, camera)}.gbuf"
    if path.is_file():
        return load_gbuffer(path)
    gb = rasterize(mesh, camera, tangents)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_gbuffer(tmp, gb)
    tmp.replace(path)
    return gb
