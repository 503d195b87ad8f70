"""Ground-truth synthetic data: Lambert/Phong objects under SH or panorama light.

Reflected radiance is direct lighting only (no inter-reflection):

    L_o = rho_d / pi * int L(w) max(n.w, 0) dw
        + rho_s * int L(w) (e + 1) / (2 pi) * max(r.w, 0)^e dw

with ``r`` the mirror of the view direction about ``n``. The Phong lobe is
normalized over the sphere and carries no foreshortening term, so under
band-limited SH light both terms have exact Funk-Hecke closed forms.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .envlight import EnvironmentMap
from .geometry import Mesh, uv_sphere
from .raster import rasterize
from .renderer import RadianceImage
from .scene import Camera, SceneDataset, ViewImage, save_scene
from .sh import (ILLUMINATION_ORDER, ShVector, eval_sh_basis, lambert_factors, project_fn_to_sh, project_texels,
                 save_sh, zonal_project, zonal_to_convolution)

# close, wide cameras: backgrounds cover ~97% of the sphere, so the stitched prior is nearly unbiased
CAMERA_DISTANCE = 2.6
CAMERA_FOV = 100.0
PANORAMA_HEIGHT = 256


@dataclass(frozen=True)
class AnalyticMaterial:
    kind: str = "lambert"
    diffuse_albedo: tuple[float, float, float] = (0.7, 0.7, 0.7)
    specular_albedo: tuple[float, float, float] = (0.0, 0.0, 0.0)
    phong_exponent: float = 1.0
    texture_amplitude: float = 0.0  # smooth multiplicative diffuse pattern, 0 = uniform

    def __post_init__(self):
        if self.kind not in ("lambert", "phong"):
            raise ValueError(f"unknown material kind {self.kind!r}")
        for name in ("diffuse_albedo", "specular_albedo"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (3,) or np.any(v < 0) or np.any(v > 1):
                raise ValueError(f"{name} must be 3 values in [0, 1]")
            object.__setattr__(self, name, tuple(float(x) for x in v))
        if self.phong_exponent < 1:
            raise ValueError("phong exponent must be >= 1")
        if not 0 <= self.texture_amplitude < 1:
            raise ValueError("texture amplitude must lie in [0, 1)")

    @property
    def has_specular(self) -> bool:
        return self.kind == "phong" and any(self.specular_albedo)

    def diffuse_at(self, points: np.ndarray) -> np.ndarray:
        """Diffuse albedo at object-space surface points (N, 3)."""
        base = np.broadcast_to(np.asarray(self.diffuse_albedo), points.shape).copy()
        if self.texture_amplitude:
            p = points / np.linalg.norm(points, axis=-1, keepdims=True)
            pattern = np.stack([np.sin(3 * p[:, 0] + 1.0) * np.cos(2 * p[:, 1]),
                                np.sin(2 * p[:, 2] - 0.5) * np.cos(3 * p[:, 0]),
                                np.cos(3 * p[:, 1] + 2 * p[:, 2])], axis=-1)
            base *= 1.0 + self.texture_amplitude * pattern
        return np.clip(base, 0.0, 1.0)


@dataclass(frozen=True)
class AnalyticSphere:
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0


@dataclass
class SurfaceSamples:
    """Packed visible surface points of one view."""

    mask: np.ndarray
    position: np.ndarray
    normal: np.ndarray
    view_dir: np.ndarray
    local: np.ndarray  # object-space point used for textures


def _frames(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized branchless orthonormal basis around unit axes (N, 3)."""
    sign = np.where(axis[:, 2] >= 0, 1.0, -1.0)
    k = -1.0 / (sign + axis[:, 2])
    b = axis[:, 0] * axis[:, 1] * k
    t = np.stack([1 + sign * axis[:, 0] ** 2 * k, sign * b, -sign * axis[:, 0]], axis=-1)
    bt = np.stack([b, sign + axis[:, 1] ** 2 * k, -axis[:, 1]], axis=-1)
    return t, bt


def intersect(target, camera: Camera) -> SurfaceSamples:
    if isinstance(target, AnalyticSphere):
        rays = camera.pixel_rays()
        o = camera.center - np.asarray(target.center)
        b = rays @ o
        disc = b * b - (o @ o - target.radius ** 2)
        hit = disc > 0
        t = -b - np.sqrt(np.where(hit, disc, 0.0))
        mask = hit & (t > 0)
        d = rays[mask]
        local = o + t[mask, None] * d
        return SurfaceSamples(mask, local + np.asarray(target.center), local / target.radius, -d, local)
    if isinstance(target, Mesh):
        gb = rasterize(target, camera)
        m = gb.mask
        n = gb.normal[m]
        return SurfaceSamples(m, gb.position[m], n, gb.view_dir[m], gb.position[m])
    raise TypeError(f"cannot render {type(target).__name__}")


def _phong_zonal(exponent: float, order: int) -> np.ndarray:
    return zonal_project(lambda t: (exponent + 1) / (2 * math.pi) * np.maximum(t, 0.0) ** exponent, order)


def mirror(normal: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    r = 2 * np.sum(normal * view_dir, axis=-1, keepdims=True) * normal - view_dir
    return r / np.linalg.norm(r, axis=-1, keepdims=True)


def analytic_radiance(surf: SurfaceSamples, material: AnalyticMaterial, light: ShVector) -> np.ndarray:
    """Exact shading of packed surface samples under band-limited SH light."""
    if not isinstance(light, ShVector):
        raise TypeError("the analytic path needs band-limited SH light; use spp > 0 for panoramas")
    order = light.order
    band = np.concatenate([np.full(2 * l + 1, l) for l in range(order + 1)])
    irr = eval_sh_basis(surf.normal, order, check_unit=False) @ (light.coeffs * lambert_factors(order)[band, None])
    out = material.diffuse_at(surf.local) / math.pi * irr
    if material.has_specular:
        fh = zonal_to_convolution(_phong_zonal(material.phong_exponent, order))
        r = mirror(surf.normal, surf.view_dir)
        out += np.asarray(material.specular_albedo) * (
            eval_sh_basis(r, order, check_unit=False) @ (light.coeffs * fh[band, None]))
    return out


def _light_values(light, dirs: np.ndarray) -> np.ndarray:
    if isinstance(light, ShVector):
        return eval_sh_basis(dirs, light.order, check_unit=False) @ light.coeffs
    if isinstance(light, EnvironmentMap):
        return light.lookup(dirs)
    raise TypeError(f"unsupported light {type(light).__name__}")


def _occluded(origins: np.ndarray, dirs: np.ndarray, mesh: Mesh, eps: float = 1e-5) -> np.ndarray:
    """Brute-force any-hit ray/triangle test (Moller-Trumbore), chunked over rays."""
    v0, v1, v2 = (mesh.vertices[mesh.faces[:, k]] for k in range(3))
    e1, e2 = v1 - v0, v2 - v0
    out = np.zeros(len(dirs), bool)
    for s in range(0, len(dirs), 256):
        o, d = origins[s:s + 256, None, :], dirs[s:s + 256, None, :]
        pv = np.cross(d, e2[None])
        det = np.sum(e1[None] * pv, axis=-1)
        ok = np.abs(det) > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tv = o - v0[None]
        u = np.sum(tv * pv, axis=-1) * inv
        qv = np.cross(tv, e1[None])
        v = np.sum(d * qv, axis=-1) * inv
        t = np.sum(e2[None] * qv, axis=-1) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > eps)
        out[s:s + 256] = hit.any(axis=1)
    return out


def mc_radiance(surf: SurfaceSamples, material: AnalyticMaterial, light, spp: int, seed: int = 0,
                view_index: int = 0, occlusion_mesh: Mesh | None = None) -> np.ndarray:
    """Monte-Carlo shading: cosine-weighted diffuse and Phong-lobe specular sampling.

    Each pixel draws from its own stream seeded by ``(seed, view_index, pixel)``.
    """
    if spp < 1:
        raise ValueError("Monte-Carlo rendering needs spp >= 1")
    n_px = len(surf.normal)
    pix = np.flatnonzero(surf.mask)
    u = np.empty((n_px, spp, 4))
    for i, p in enumerate(pix):
        u[i] = np.random.default_rng((seed, view_index, int(p))).random((spp, 4))
    spec = material.has_specular
    refl = mirror(surf.normal, surf.view_dir) if spec else None
    albedo = material.diffuse_at(surf.local)
    out = np.zeros((n_px, 3))
    chunk = max(1, 65536 // spp)
    for s in range(0, n_px, chunk):
        sl = slice(s, s + chunk)
        n = surf.normal[sl]
        t, b = _frames(n)
        r1, r2 = u[sl, :, 0], u[sl, :, 1]
        sin_t, cos_t, phi = np.sqrt(1 - r1), np.sqrt(r1), 2 * math.pi * r2
        w = ((sin_t * np.cos(phi))[..., None] * t[:, None] + (sin_t * np.sin(phi))[..., None] * b[:, None]
             + cos_t[..., None] * n[:, None])
        li = _light_values(light, w.reshape(-1, 3)).reshape(w.shape)
        if occlusion_mesh is not None:
            orig = np.repeat(surf.position[sl], spp, axis=0)
            li = li * ~_occluded(orig, w.reshape(-1, 3), occlusion_mesh).reshape(w.shape[:2])[..., None]
        out[sl] = albedo[sl] * li.mean(axis=1)
        if spec:
            r = refl[sl]
            t, b = _frames(r)
            e = material.phong_exponent
            cos_a = u[sl, :, 2] ** (1.0 / (e + 1))
            sin_a = np.sqrt(np.maximum(0.0, 1 - cos_a ** 2))
            phi = 2 * math.pi * u[sl, :, 3]
            w = ((sin_a * np.cos(phi))[..., None] * t[:, None] + (sin_a * np.sin(phi))[..., None] * b[:, None]
                 + cos_a[..., None] * r[:, None])
            li = _light_values(light, w.reshape(-1, 3)).reshape(w.shape)
            if occlusion_mesh is not None:
                orig = np.repeat(surf.position[sl], spp, axis=0)
                li = li * ~_occluded(orig, w.reshape(-1, 3), occlusion_mesh).reshape(w.shape[:2])[..., None]
            out[sl] += np.asarray(material.specular_albedo) * li.mean(axis=1)
    return out


def render_reference(target, camera: Camera, material: AnalyticMaterial, light, spp: int = 0,
                     seed: int = 0, view_index: int = 0, background: EnvironmentMap | None = None,
                     occlusion: bool = False) -> RadianceImage:
    """Ground-truth image of a sphere or mesh; ``spp = 0`` selects the exact SH path.

    Background pixels come from ``background`` (or from ``light`` when it is
    a panorama) and are black otherwise.
    """
    surf = intersect(target, camera)
    if spp == 0:
        values = analytic_radiance(surf, material, light)
    else:
        occ = target if (occlusion and isinstance(target, Mesh)) else None
        values = mc_radiance(surf, material, light, spp, seed, view_index, occ)
    img = np.zeros(surf.mask.shape + (3,))
    img[surf.mask] = values
    bg_map = background if background is not None else (light if isinstance(light, EnvironmentMap) else None)
    if bg_map is not None:
        rays = camera.pixel_rays()
        img[~surf.mask] = bg_map.lookup(rays[~surf.mask])
    return RadianceImage(img, surf.mask)


# --- lights ---------------------------------------------------------------------


def spherical_gaussian_light(lobes, ambient, order: int = 6) -> ShVector:
    """Positive band-limited light: ambient plus spherical Gaussians ``(axis, sharpness, rgb)``."""
    def fn(d):
        out = np.broadcast_to(np.asarray(ambient, dtype=np.float64), d.shape).copy()
        for axis, sharp, rgb in lobes:
            a = np.asarray(axis, dtype=np.float64)
            a = a / np.linalg.norm(a)
            out += np.exp(sharp * (d @ a - 1.0))[:, None] * np.asarray(rgb)
        return out

    sh = project_fn_to_sh(fn, order, resolution=(512, 256)).resized(10)
    dirs = np.random.default_rng(1).normal(size=(20000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if np.min(eval_sh_basis(dirs, 10) @ sh.coeffs) <= 0:
        raise ValueError("light preset is not positive after band limiting")
    return sh


PRESET_LIGHTS = {
    "warm_key": dict(lobes=[((0.5, 0.8, 0.6), 0.75, (0.8, 0.6, 0.4)), ((-0.7, -0.2, -0.4), 0.5, (0.1, 0.15, 0.3))],
                     ambient=(0.125, 0.125, 0.15)),
    "cool_side": dict(lobes=[((-0.8, 0.3, 0.3), 0.625, (0.3, 0.45, 0.75)), ((0.4, 0.6, -0.7), 0.75, (0.45, 0.3, 0.15))],
                      ambient=(0.1, 0.11, 0.1)),
}


def preset_light(name: str) -> ShVector:
    if name not in PRESET_LIGHTS:
        raise KeyError(f"unknown light preset {name!r}; choose from {sorted(PRESET_LIGHTS)}")
    return spherical_gaussian_light(**PRESET_LIGHTS[name])


def sh_panorama(light: ShVector, height: int = PANORAMA_HEIGHT) -> EnvironmentMap:
    return EnvironmentMap.from_function(lambda d: eval_sh_basis(d, light.order, check_unit=False) @ light.coeffs,
                                        height)


# --- datasets -------------------------------------------------------------------


def random_cameras(count: int, resolution: int, seed: int, distance: float = CAMERA_DISTANCE,
                   fov: float = CAMERA_FOV) -> list[Camera]:
    rng = np.random.default_rng(seed)
    cams = []
    for i in range(count):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        cams.append(Camera.look_at(f"view_{i:03d}", d * distance, [0, 0, 0], [0, 1, 0], fov,
                                   resolution, resolution))
    return cams


@dataclass
class GroundTruth:
    shape: str
    material: AnalyticMaterial
    light_a: ShVector
    light_b: ShVector
    seed: int
    resolution: int

    def to_json(self) -> dict:
        return {"shape": self.shape, "material": asdict(self.material), "seed": self.seed,
                "resolution": self.resolution, "light_a": "light_a.sh", "light_b": "light_b.sh"}


def _shape_target(shape: str):
    if shape == "sphere":
        return AnalyticSphere(), uv_sphere(1.0, 48, 24)
    if shape == "sphere_mesh":
        mesh = uv_sphere(1.0, 48, 24)
        return mesh, mesh
    raise ValueError(f"unknown oracle shape {shape!r}")


def generate_scene(shape: str, material: AnalyticMaterial, light_a, light_b,
                   view_count: int = 36, resolution: int = 128, seed: int = 0, test_count: int = 4,
                   spp: int = 0, out_dir=None, camera_distance: float = CAMERA_DISTANCE,
                   camera_fov: float = CAMERA_FOV, occlusion: bool = False,
                   background: str = "light") -> tuple[SceneDataset, SceneDataset, GroundTruth]:
    """Same cameras and geometry rendered under two illuminations.

    Lights are SH vectors or panoramas; panoramas need ``spp >= 1`` and are
    recorded in the ground truth by their order-10 projection. With
    ``background="light"`` backgrounds show each light as a panorama so the
    stitching stage can recover it; ``"black"`` leaves them at zero. With
    ``out_dir`` the datasets go to ``illum_a/`` and ``illum_b/`` next to
    ``truth.json`` and both SH files.
    """
    if view_count < 2 or not 1 <= test_count < view_count:
        raise ValueError("need at least 2 views and 1 <= test_count < view_count")
    if background not in ("light", "black"):
        raise ValueError(f"background must be 'light' or 'black', got {background!r}")
    lights = (light_a, light_b)
    if spp == 0 and any(isinstance(light, EnvironmentMap) for light in lights):
        raise ValueError("panorama lights need Monte-Carlo rendering (spp >= 1)")
    target, proxy = _shape_target(shape)
    cams = random_cameras(view_count, resolution, seed, camera_distance, camera_fov)
    perm = np.random.default_rng(seed + 1).permutation(view_count)
    test = tuple(cams[i].id for i in sorted(perm[:test_count]))
    train = tuple(c.id for c in cams if c.id not in test)
    datasets, sh_lights = [], []
    for light in lights:
        if isinstance(light, EnvironmentMap):
            pano = light
            sh_lights.append(project_texels(light.texels, ILLUMINATION_ORDER))
        else:
            pano = sh_panorama(light)
            sh_lights.append(light)
        views = []
        for k, cam in enumerate(cams):
            img = render_reference(target, cam, material, light, spp, seed, k,
                                   background=pano if background == "light" else None, occlusion=occlusion)
            views.append(ViewImage(cam.id, img.image, img.mask))
        datasets.append(SceneDataset({c.id: c for c in cams}, proxy, views, train, test))
    light_a, light_b = sh_lights
    truth = GroundTruth(shape, material, light_a, light_b, seed, resolution)
    if out_dir is not None:
        out = Path(out_dir)
        for name, ds in zip(("illum_a", "illum_b"), datasets):
            save_scene(out / name, ds)
        save_sh(out / "light_a.sh", light_a)
        save_sh(out / "light_b.sh", light_b)
        (out / "truth.json").write_text(json.dumps(truth.to_json(), indent=1))
    return datasets[0], datasets[1], truth
