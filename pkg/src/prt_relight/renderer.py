"""Image formation: sampled-quadrature rendering and its closed-form SH counterpart.

Per masked pixel the sampled renderer evaluates

    I = rho_d * sum_j dw_d T_d(w_j) L+(w_j)  +  rho_s * sum_j dw_s T_s(w_j) L+(w_j)

with ``L+ = max(sum_k c_k Y_k, 0)`` and ``dw = 2 pi / m`` per component
unless overridden.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .raster import GBuffer
from .sampling import LightSampleSet, packed, packed_tbn
from .sh import ShIllumination, ShVector, eval_sh_basis, num_coeffs, rotation_matrices, zonal_to_convolution
from .transport import (Footprint, MaterialTextures, TransportField, bilinear_footprint, mirror_direction,
                        softplus, specular_basis)


@dataclass
class RadianceImage:
    image: np.ndarray  # (H, W, 3), zero outside the mask
    mask: np.ndarray

    @property
    def n(self) -> int:
        return int(self.mask.sum())

    @property
    def pixels(self) -> np.ndarray:
        return self.image[self.mask]

    @classmethod
    def from_packed(cls, values: np.ndarray, mask: np.ndarray) -> "RadianceImage":
        img = np.zeros(mask.shape + (3,))
        img[mask] = values
        return cls(img, mask.copy())


def _light_coeffs(illumination) -> ShVector:
    if isinstance(illumination, ShIllumination):
        return illumination.current
    return illumination


def _shared_rows(a: np.ndarray) -> bool:
    return a.ndim == 3 and a.strides[0] == 0


@dataclass
class ViewContext:
    """Everything about one view that stays fixed while parameters change."""

    mask: np.ndarray
    footprint: Footprint
    diffuse_basis: np.ndarray         # (m_d, K_d) or (P, m_d, K_d)
    specular_basis: np.ndarray        # (P, m_s, K_s)
    light_dirs: np.ndarray            # (P, m_d + m_s, 3) world
    m_d: int
    m_s: int
    dw_d: float
    dw_s: float
    resolution: int
    diffuse_order: int
    specular_order: int
    target: np.ndarray | None = None  # (P, 3)
    _light_basis: dict = field(default_factory=dict, repr=False)
    cache_light_basis: bool = False

    @property
    def pixels(self) -> int:
        return self.light_dirs.shape[0]

    def light_basis(self, order: int) -> np.ndarray:
        """SH basis at every sample direction, (P * m, K)."""
        if order in self._light_basis:
            return self._light_basis[order]
        basis = eval_sh_basis(self.light_dirs.reshape(-1, 3), order, check_unit=False)
        if self.cache_light_basis:
            self._light_basis[order] = basis
        return basis


def build_context(gbuffer: GBuffer, samples: LightSampleSet, field_: TransportField,
                  quadrature_weight: float | tuple[float, float] | None = None,
                  target: np.ndarray | None = None) -> ViewContext:
    p = int(gbuffer.mask.sum())
    if samples.pixels != p:
        raise ValueError(f"sample set covers {samples.pixels} pixels, G-buffer mask has {p}")
    if quadrature_weight is None:
        dw_d, dw_s = 2 * math.pi / samples.m_d, 2 * math.pi / samples.m_s
    elif np.ndim(quadrature_weight) == 0:
        dw_d = dw_s = float(quadrature_weight)
    else:
        dw_d, dw_s = map(float, quadrature_weight)
    d_t = samples.diffuse_tangent
    if _shared_rows(d_t):
        yd = eval_sh_basis(d_t[0], field_.diffuse_order, check_unit=False)
    else:
        yd = eval_sh_basis(d_t, field_.diffuse_order, check_unit=False)
    zs = specular_basis(samples.specular_world, packed(gbuffer, "normal"), packed(gbuffer, "view_dir"),
                        field_.specular_order)
    light_dirs = np.concatenate([samples.diffuse_world, samples.specular_world], axis=1)
    if target is not None:
        target = np.asarray(target, dtype=np.float64)
        if target.shape[:2] == gbuffer.mask.shape:
            target = target[gbuffer.mask]
    return ViewContext(
        mask=gbuffer.mask.copy(),
        footprint=bilinear_footprint(packed(gbuffer, "uv"), field_.resolution),
        diffuse_basis=yd, specular_basis=zs, light_dirs=np.ascontiguousarray(light_dirs),
        m_d=samples.m_d, m_s=samples.m_s, dw_d=dw_d, dw_s=dw_s,
        resolution=field_.resolution, diffuse_order=field_.diffuse_order,
        specular_order=field_.specular_order, target=target,
    )


@dataclass
class Tape:
    """Forward intermediates needed by the backward pass (layouts (P, 3, m))."""

    rho_d: np.ndarray
    rho_s: np.ndarray
    td: np.ndarray
    ts: np.ndarray
    td_raw: np.ndarray | None
    ts_raw: np.ndarray | None
    light_d: np.ndarray
    light_s: np.ndarray
    light_basis: np.ndarray
    diffuse_int: np.ndarray
    specular_int: np.ndarray
    radiance: np.ndarray
    clamp_light: bool
    light_order: int


def forward(ctx: ViewContext, textures: MaterialTextures, field_: TransportField, light: ShVector,
            clamp_light: bool = True) -> Tape:
    fp = ctx.footprint
    p = ctx.pixels
    rho_d = fp.gather(textures.rho_d)
    rho_s = fp.gather(textures.rho_s)
    a = fp.gather(field_.diffuse)          # (P, 3, Kd)
    s = fp.gather(field_.specular)         # (P, 3, Ks)
    yd = ctx.diffuse_basis
    td = a @ (yd.T if yd.ndim == 2 else np.swapaxes(yd, 1, 2))
    ts = s @ np.swapaxes(ctx.specular_basis, 1, 2)
    td_raw = ts_raw = None
    if field_.softplus:
        td_raw, ts_raw = td, ts
        td, ts = softplus(td_raw), softplus(ts_raw)

    yl = ctx.light_basis(light.order)
    lin = (yl @ light.coeffs).reshape(p, ctx.m_d + ctx.m_s, 3).transpose(0, 2, 1)
    light_d, light_s = lin[:, :, :ctx.m_d], lin[:, :, ctx.m_d:]
    if clamp_light:
        ld, ls = np.maximum(light_d, 0.0), np.maximum(light_s, 0.0)
    else:
        ld, ls = light_d, light_s
    dint = ctx.dw_d * np.sum(td * ld, axis=2)
    sint = ctx.dw_s * np.sum(ts * ls, axis=2)
    radiance = rho_d * dint + rho_s * sint
    return Tape(rho_d, rho_s, td, ts, td_raw, ts_raw, light_d, light_s, yl, dint, sint,
                radiance, clamp_light, light.order)


def render_view(gbuffer: GBuffer, textures: MaterialTextures, field_: TransportField, illumination,
                samples: LightSampleSet, quadrature_weight=None, clamp_light: bool = True) -> RadianceImage:
    """Sampled-quadrature render of one view."""
    ctx = build_context(gbuffer, samples, field_, quadrature_weight)
    tape = forward(ctx, textures, field_, _light_coeffs(illumination), clamp_light)
    return RadianceImage.from_packed(tape.radiance, gbuffer.mask)


def relight(gbuffer: GBuffer, textures: MaterialTextures, field_: TransportField, new_illumination,
            samples: LightSampleSet, quadrature_weight=None) -> RadianceImage:
    """Render with substituted illumination coefficients (order <= 10)."""
    light = _light_coeffs(new_illumination)
    if light.order > 10:
        raise ValueError("relighting accepts SH illumination up to order 10")
    return render_view(gbuffer, textures, field_, light, samples, quadrature_weight)


def render_closed_form(gbuffer: GBuffer, textures: MaterialTextures, field_: TransportField,
                       illumination) -> RadianceImage:
    """Exact full-sphere integral of transport x SH light; no sampling, no clamping.

    Diffuse: tangent-frame transport coefficients are rotated into world
    space and dotted with the light. Specular: Funk-Hecke turns each zonal
    band into ``sqrt(4 pi / (2l+1)) s_l sum_m c_lm Y_lm(r)``.
    """
    light = _light_coeffs(illumination)
    mask = gbuffer.mask
    if not mask.any():
        return RadianceImage(np.zeros(mask.shape + (3,)), mask.copy())
    if field_.softplus:
        raise ValueError("closed-form rendering needs linear (non-softplus) transport")
    fp = bilinear_footprint(packed(gbuffer, "uv"), field_.resolution)
    rho_d, rho_s = fp.gather(textures.rho_d), fp.gather(textures.rho_s)
    a = fp.gather(field_.diffuse)  # (P, 3, Kd)
    s = fp.gather(field_.specular)  # (P, 3, Ks)

    ld = field_.diffuse_order
    order = max(ld, light.order)
    c = light.resized(order).coeffs
    rot = rotation_matrices(packed_tbn(gbuffer), ld)  # (P, Kd, Kd)
    a_world = np.einsum("pij,pcj->pci", rot, a)
    diffuse = np.einsum("pck,kc->pc", a_world, c[:num_coeffs(ld)])

    ls = field_.specular_order
    r = mirror_direction(packed(gbuffer, "normal"), packed(gbuffer, "view_dir"))
    r /= np.linalg.norm(r, axis=1, keepdims=True)
    lo = max(ls, light.order)
    cs = light.resized(lo).coeffs
    yr = eval_sh_basis(r, lo, check_unit=False)  # (P, K)
    band = np.concatenate([np.full(2 * l + 1, l) for l in range(lo + 1)])
    per_band = np.zeros((len(r), lo + 1, 3))
    for l in range(lo + 1):
        sl = band == l
        per_band[:, l, :] = yr[:, sl] @ cs[sl]
    fh = np.zeros((len(r), 3, lo + 1))
    fh[:, :, :ls + 1] = s * zonal_to_convolution(np.ones(ls + 1))
    specular = np.einsum("pcl,plc->pc", fh, per_band)
    return RadianceImage.from_packed(rho_d * diffuse + rho_s * specular, mask)

