"""Triangle meshes: OBJ parsing/writing, vertex normals, procedural fixtures."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Malformed or inconsistent mesh data."""


@dataclass
class Mesh:
    """Render-ready mesh with one uv and normal per vertex.

    OBJ corners with distinct ``v/vt/vn`` combinations become distinct
    vertices; ``position_ids`` remembers which source position each came
    from so seams can be welded when accumulating normals.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray
    normals: np.ndarray
    position_ids: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.position_ids is None:
            self.position_ids = np.arange(len(self.vertices))
        self.position_ids = np.asarray(self.position_ids, dtype=np.int64)

    def validate(self, source: str = "mesh") -> None:
        n = len(self.vertices)
        if len(self.faces) == 0:
            raise MeshError(f"{source}: mesh has no faces")
        bad = np.nonzero((self.faces < 0) | (self.faces >= n))[0]
        if bad.size:
            raise MeshError(f"{source}: face {bad[0]} has a vertex index out of range")
        if self.uvs.shape != (n, 2) or self.normals.shape != (n, 3):
            raise MeshError(f"{source}: per-vertex uv/normal arrays do not match {n} vertices")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError(f"{source}: non-finite vertex positions")
        off = np.nonzero(np.any((self.uvs < -1e-6) | (self.uvs > 1 + 1e-6), axis=1))[0]
        if off.size:
            raise MeshError(f"{source}: vertex {off[0]} has uv outside [0,1]^2")
        lengths = np.linalg.norm(self.normals, axis=1)
        badn = np.nonzero(np.abs(lengths - 1.0) > 1e-4)[0]
        if badn.size:
            raise MeshError(f"{source}: vertex {badn[0]} normal is not unit length")

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.vertices, self.faces, self.uvs, self.normals):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def area_weighted_normals(vertices: np.ndarray, faces: np.ndarray, position_ids: np.ndarray) -> np.ndarray:
    """Vertex normals from face normals weighted by area, welded by source position."""
    p = vertices[faces]
    face_n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])  # |cross| = 2 * area
    acc = np.zeros((position_ids.max() + 1, 3))
    for c in range(3):
        np.add.at(acc, position_ids[faces[:, c]], face_n)
    n = acc[position_ids]
    length = np.linalg.norm(n, axis=1, keepdims=True)
    if np.any(length < 1e-300):
        idx = int(np.argmin(length[:, 0]))
        raise MeshError(f"vertex {idx} has no non-degenerate incident face for its normal")
    return n / length


def load_obj(path) -> Mesh:
    """Parse v/vt/vn/f records; polygons are fan-triangulated."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: mesh file not found")
    positions, texcoords, normals = [], [], []
    corners = []  # per triangle: 3 (v, vt, vn) tuples
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag = parts[0]
        try:
            if tag == "v":
                positions.append([float(v) for v in parts[1:4]])
            elif tag == "vt":
                texcoords.append([float(v) for v in parts[1:3]])
            elif tag == "vn":
                normals.append([float(v) for v in parts[1:4]])
            elif tag == "f":
                poly = []
                for item in parts[1:]:
                    fields = item.split("/")
                    vi = _obj_index(fields[0], len(positions))
                    ti = _obj_index(fields[1], len(texcoords)) if len(fields) > 1 and fields[1] else None
                    ni = _obj_index(fields[2], len(normals)) if len(fields) > 2 and fields[2] else None
                    poly.append((vi, ti, ni))
                if len(poly) < 3:
                    raise MeshError(f"{path}:{lineno}: face with fewer than 3 corners")
                for i in range(1, len(poly) - 1):
                    corners.append((poly[0], poly[i], poly[i + 1]))
        except (ValueError, IndexError) as exc:
            if isinstance(exc, MeshError):
                raise
            raise MeshError(f"{path}:{lineno}: malformed '{tag}' record") from exc
    if not corners:
        raise MeshError(f"{path}: no faces")

    key_to_vertex: dict[tuple, int] = {}
    faces = np.empty((len(corners), 3), dtype=np.int64)
    for fi, tri in enumerate(corners):
        for c, key in enumerate(tri):
            vi, ti, ni = key
            if vi < 0 or vi >= len(positions):
                raise MeshError(f"{path}: face {fi} references missing vertex {vi + 1}")
            if ti is None:
                raise MeshError(f"{path}: face {fi} has no uv coordinates")
            if ti < 0 or ti >= len(texcoords):
                raise MeshError(f"{path}: face {fi} references missing uv {ti + 1}")
            if ni is not None and (ni < 0 or ni >= len(normals)):
                raise MeshError(f"{path}: face {fi} references missing normal {ni + 1}")
            if key not in key_to_vertex:
                key_to_vertex[key] = len(key_to_vertex)
            faces[fi, c] = key_to_vertex[key]

    keys = list(key_to_vertex)
    pos = np.asarray(positions, dtype=np.float64)
    tex = np.asarray(texcoords, dtype=np.float64)
    pos_ids = np.array([k[0] for k in keys], dtype=np.int64)
    verts = pos[pos_ids]
    uvs = tex[[k[1] for k in keys]]
    has_normals = all(k[2] is not None for k in keys)
    if has_normals:
        nrm = np.asarray(normals, dtype=np.float64)[[k[2] for k in keys]]
        length = np.linalg.norm(nrm, axis=1, keepdims=True)
        nrm = nrm / np.where(length > 0, length, 1.0)
    else:
        nrm = area_weighted_normals(verts, faces, pos_ids)
    mesh = Mesh(verts, faces, uvs, nrm, pos_ids)
    mesh.validate(str(path))
    return mesh


def _obj_index(token: str, count: int) -> int:
    i = int(token)
    return i - 1 if i > 0 else count + i


def save_obj(path, mesh: Mesh) -> None:
    """Write positions welded by ``position_ids`` and explicit per-vertex vt/vn."""
    uniq, first = np.unique(mesh.position_ids, return_index=True)
    remap = {int(p): i for i, p in enumerate(uniq)}
    lines = []
    lines += ["v %r %r %r" % tuple(map(float, mesh.vertices[f])) for f in first]
    lines += ["vt %r %r" % tuple(map(float, uv)) for uv in mesh.uvs]
    lines += ["vn %r %r %r" % tuple(map(float, n)) for n in mesh.normals]
    for tri in mesh.faces:
        lines.append("f " + " ".join(
            f"{remap[int(mesh.position_ids[v])] + 1}/{v + 1}/{v + 1}" for v in tri))
    Path(path).write_text("\n".join(lines) + "\n")


def quad_mesh(size: float = 1.0, z: float = 0.0, uv_rotation: int = 0) -> Mesh:
    """Axis-aligned square in the z = const plane with normal +z.

    ``uv_rotation`` rotates the uv layout by multiples of 90 degrees.
    """
    h = size / 2
    verts = np.array([[-h, -h, z], [h, -h, z], [h, h, z], [-h, h, z]])
    uvs = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    for _ in range(uv_rotation % 4):
        # (u, v) -> (v, 1 - u): u now increases along +y
        uvs = np.stack([uvs[:, 1], 1 - uvs[:, 0]], axis=1)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    normals = np.tile([0.0, 0.0, 1.0], (4, 1))
    return Mesh(verts, faces, uvs, normals)


def sphere_uv(points: np.ndarray) -> np.ndarray:
    """Longitude/latitude uv used by :func:`uv_sphere` (y is the polar axis)."""
    p = points / np.linalg.norm(points, axis=-1, keepdims=True)
    u = (np.arctan2(p[..., 0], p[..., 2]) / (2 * math.pi)) % 1.0
    v = np.arccos(np.clip(p[..., 1], -1.0, 1.0)) / math.pi
    return np.stack([u, v], axis=-1)


def uv_sphere(radius: float = 1.0, segments: int = 48, rings: int = 24) -> Mesh:
    """Latitude/longitude sphere with a duplicated uv seam at u = 0/1.

    Vertex positions follow :func:`sphere_uv` so that uv = sphere_uv(x)
    holds exactly at every vertex.
    """
    verts, uvs, pos_ids = [], [], []
    pos_index: dict[tuple, int] = {}
    for r in range(rings + 1):
        v = r / rings
        theta = v * math.pi
        for s in range(segments + 1):
            u = s / segments
            phi = u * 2 * math.pi
            p = (radius * math.sin(theta) * math.sin(phi),
                 radius * math.cos(theta),
                 radius * math.sin(theta) * math.cos(phi))
            if r in (0, rings):
                key = ("pole", r)
            else:
                key = (r, s % segments)
            pos_ids.append(pos_index.setdefault(key, len(pos_index)))
            verts.append(p)
            uvs.append((u, v))
    verts = np.array(verts)
    pos_ids = np.array(pos_ids)
    faces = []
    stride = segments + 1
    for r in range(rings):
        for s in range(segments):
            a = r * stride + s
            b = a + stride
            if r != 0:
                faces.append((a, a + 1, b))
            if r != rings - 1:
                faces.append((a + 1, b + 1, b))
    faces = np.array(faces)
    used = np.unique(faces)
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts, uvs, pos_ids, faces = verts[used], np.array(uvs)[used], pos_ids[used], remap[faces]
    normals = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    return Mesh(verts, faces, uvs, normals, pos_ids)
