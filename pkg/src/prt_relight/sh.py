"""Real spherical harmonics: basis evaluation, projection, and reconstruction.

Convention
----------
Directions are expressed in the frame whose polar axis is +z, with
``theta = acos(z)`` and ``phi = atan2(y, x)``. The real basis is

    Y_l^0      = K_l^0 P_l^0(cos theta)
    Y_l^m      = sqrt(2) K_l^m  cos(m phi) P_l^m(cos theta)     (m > 0)
    Y_l^{-m}   = sqrt(2) K_l^m  sin(m phi) P_l^m(cos theta)     (m > 0)
    K_l^m      = sqrt((2l + 1) / (4 pi) * (l - m)! / (l + m)!)

where ``P_l^m`` is the associated Legendre function *without* the
Condon-Shortley phase. Coefficients are stored at flat index
``k = l*l + l + m``. Serialized files rely on this layout.

``P_l^m(z) * (cos(m phi), sin(m phi))`` is evaluated as
``Q_l^m(z) * (Re, Im)[(x + i y)^m]`` where ``Q_l^m = P_l^m / sin^m theta``
is a polynomial in ``z``; the recurrence on ``Q`` never divides by
``sin theta`` and stays exact at the poles.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

MAX_ORDER = 10
ILLUMINATION_ORDER = 10
UNIT_TOLERANCE = 1e-6

SH_C0 = 0.5 / math.sqrt(math.pi)


def num_coeffs(order: int) -> int:
    return (order + 1) ** 2


def sh_index(l: int, m: int) -> int:
    return l * l + l + m


def _check_order(order: int) -> None:
    if not 0 <= order <= MAX_ORDER:
        raise ValueError(f"SH order must be in [0, {MAX_ORDER}], got {order}")


def _as_directions(dirs, check_unit: bool = True) -> np.ndarray:
    d = np.asarray(dirs, dtype=np.float64)
    if d.shape[-1] != 3:
        raise ValueError(f"direction arrays must end in a 3-axis, got shape {d.shape}")
    if check_unit:
        norms = np.sqrt(np.sum(d * d, axis=-1))
        if d.size and np.max(np.abs(norms - 1.0)) > UNIT_TOLERANCE:
            raise ValueError("directions must be unit length within 1e-6")
    return d


def _norm_constants(order: int) -> np.ndarray:
    """K_l^m for m >= 0, indexed [l, m]."""
    k = np.zeros((order + 1, order + 1))
    for l in range(order + 1):
        for m in range(l + 1):
            k[l, m] = math.sqrt(
                (2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m)
            )
    return k


_K_CACHE = {o: _norm_constants(o) for o in range(MAX_ORDER + 1)}


def eval_sh_basis(dirs, order: int, check_unit: bool = True) -> np.ndarray:
    """Evaluate the real SH basis at one or many unit directions.

    Returns an array of shape ``dirs.shape[:-1] + ((order+1)**2,)``.
    """
    _check_order(order)
    d = _as_directions(dirs, check_unit)
    lead = d.shape[:-1]
    flat = d.reshape(-1, 3)
    x, y, z = flat[:, 0], flat[:, 1], flat[:, 2]
    # coefficient-major buffer keeps every write contiguous
    out = np.empty((num_coeffs(order), flat.shape[0]))
    kn = _K_CACHE[order]
    sqrt2 = math.sqrt(2.0)

    # (x + iy)^m, built incrementally
    re = np.ones_like(x)
    im = np.zeros_like(x)
    q_mm = np.ones_like(z)  # Q_m^m = (2m-1)!!
    for m in range(order + 1):
        if m > 0:
            re, im = re * x - im * y, re * y + im * x
            q_mm = q_mm * (2 * m - 1)
        q_prev2 = None
        q_prev = q_mm
        for l in range(m, order + 1):
            if l == m:
                q = q_mm
            elif l == m + 1:
                q = z * (2 * m + 1) * q_mm
            else:
                q = ((2 * l - 1) * z * q_prev - (l + m - 1) * q_prev2) / (l - m)
            if l > m:
                q_prev2, q_prev = q_prev, q
            if m == 0:
                np.multiply(q, kn[l, 0], out=out[sh_index(l, 0)])
            else:
                c = sqrt2 * kn[l, m] * q
                np.multiply(c, re, out=out[sh_index(l, m)])
                np.multiply(c, im, out=out[sh_index(l, -m)])
    if len(lead) == 1:
        return out.T
    return np.ascontiguousarray(out.T).reshape(lead + (out.shape[0],))


def legendre(t, order: int) -> np.ndarray:
    """Legendre polynomials P_0..P_order at ``t``; shape ``t.shape + (order+1,)``."""
    t = np.asarray(t, dtype=np.float64)
    out = np.empty(t.shape + (order + 1,))
    out[..., 0] = 1.0
    if order >= 1:
        out[..., 1] = t
    for l in range(2, order + 1):
        out[..., l] = ((2 * l - 1) * t * out[..., l - 1] - (l - 1) * out[..., l - 2]) / l
    return out


def zonal_basis(t, order: int) -> np.ndarray:
    """Zonal SH Y_l^0 as a function of the cosine to the lobe axis."""
    scale = np.sqrt((2 * np.arange(order + 1) + 1) / (4 * math.pi))
    return legendre(t, order) * scale


def zonal_project(fn: Callable[[np.ndarray], np.ndarray], order: int, nodes: int = 256) -> np.ndarray:
    """Zonal coefficients ``2 pi * int_{-1}^{1} fn(t) Y_l^0(t) dt`` by Gauss-Legendre.

    ``fn`` may have kinks (e.g. a clamped cosine); the integral is split at
    ``t = 0`` so each half is smooth for the usual lobes.
    """
    xs, ws = np.polynomial.legendre.leggauss(nodes)
    coeffs = np.zeros(order + 1)
    for lo, hi in ((-1.0, 0.0), (0.0, 1.0)):
        t = 0.5 * (hi - lo) * xs + 0.5 * (hi + lo)
        w = 0.5 * (hi - lo) * ws
        coeffs += 2 * math.pi * (w * fn(t)) @ zonal_basis(t, order)
    return coeffs


def clamped_cosine_zonal(order: int) -> np.ndarray:
    """Zonal coefficients of max(cos theta, 0) about the +z axis."""
    return zonal_project(lambda t: np.maximum(t, 0.0), order)


def lambert_factors(order: int) -> np.ndarray:
    """Closed-form convolution factors A_l of the clamped cosine.

    A_0 = pi, A_1 = 2 pi / 3, odd l > 1 vanish, and for even l
    A_l = 2 pi (-1)^(l/2 - 1) / ((l + 2)(l - 1)) * l! / (2^l ((l/2)!)^2).
    """
    a = np.zeros(order + 1)
    for l in range(order + 1):
        if l == 0:
            a[l] = math.pi
        elif l == 1:
            a[l] = 2 * math.pi / 3
        elif l % 2 == 0:
            h = l // 2
            a[l] = (
                2 * math.pi * (-1) ** (h - 1) / ((l + 2) * (l - 1))
                * math.factorial(l) / (2 ** l * math.factorial(h) ** 2)
            )
    return a


def zonal_to_convolution(zonal: np.ndarray) -> np.ndarray:
    """Funk-Hecke factors sqrt(4 pi / (2l + 1)) * z_l for a zonal kernel."""
    l = np.arange(len(zonal))
    return np.sqrt(4 * math.pi / (2 * l + 1)) * zonal


def band_of(order: int) -> np.ndarray:
    """Degree l of every flat coefficient index."""
    return np.concatenate([np.full(2 * l + 1, l) for l in range(order + 1)])


@dataclass
class ShVector:
    """SH coefficients for 3 colour channels, shape ``((order+1)**2, 3)``."""

    order: int
    coeffs: np.ndarray

    def __post_init__(self):
        _check_order(self.order)
        self.coeffs = np.array(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim == 1:
            self.coeffs = self.coeffs.reshape(-1, 3)
        if self.coeffs.shape != (num_coeffs(self.order), 3):
            raise ValueError(
                f"order {self.order} needs {num_coeffs(self.order)}x3 coefficients, "
                f"got {self.coeffs.shape}"
            )
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("SH coefficients must be finite")

    @classmethod
    def zeros(cls, order: int) -> "ShVector":
        return cls(order, np.zeros((num_coeffs(order), 3)))

    @classmethod
    def constant(cls, rgb, order: int = 0) -> "ShVector":
        sh = cls.zeros(order)
        sh.coeffs[0] = np.asarray(rgb, dtype=np.float64) / SH_C0
        return sh

    def resized(self, order: int) -> "ShVector":
        """Truncate or zero-pad to ``order``."""
        out = ShVector.zeros(order)
        n = min(num_coeffs(order), num_coeffs(self.order))
        out.coeffs[:n] = self.coeffs[:n]
        return out

    def copy(self) -> "ShVector":
        return ShVector(self.order, self.coeffs.copy())

    def __mul__(self, s: float) -> "ShVector":
        return ShVector(self.order, self.coeffs * s)

    __rmul__ = __mul__


@dataclass
class ShIllumination:
    """Optimizable illumination ``current`` and the frozen stitched ``initial``."""

    current: ShVector
    initial: ShVector
    coverage: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("current", "initial"):
            if getattr(self, name).order != ILLUMINATION_ORDER:
                raise ValueError(f"illumination {name} must have order {ILLUMINATION_ORDER}")

    @classmethod
    def from_initial(cls, initial: ShVector, coverage=None) -> "ShIllumination":
        initial = initial.resized(ILLUMINATION_ORDER)
        return cls(current=initial.copy(), initial=initial, coverage=coverage)


def eval_sh_radiance(sh: ShVector, dirs, check_unit: bool = True) -> np.ndarray:
    """Per-channel reconstruction ``sum_k c_k Y_k(dir)``; may be negative."""
    basis = eval_sh_basis(dirs, sh.order, check_unit)
    return basis @ sh.coeffs


def equirect_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Texel-centre directions and Riemann solid angles of an equirect map."""
    from .envlight import texel_directions  # local import: envlight owns the mapping

    dirs = texel_directions(width, height)
    theta = (np.arange(height) + 0.5) / height * math.pi
    d_omega = np.sin(theta) * (math.pi / height) * (2 * math.pi / width)
    return dirs, np.broadcast_to(d_omega[:, None], (height, width))


def transpose_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a.T @ b`` summed in a fixed order.

    BLAS splits long reductions across threads, so the result would depend
    on the thread count; einsum's plain loop keeps checkpoints bit-identical.
    """
    return np.einsum("nk,nc->kc", a, b)


def project_texels(texels: np.ndarray, order: int, weights_mask: np.ndarray | None = None) -> ShVector:
    """Riemann projection of an equirect map (H, W, 3); masked texels contribute zero."""
    texels = np.asarray(texels, dtype=np.float64)
    if texels.ndim != 3 or texels.shape[2] != 3 or texels.shape[0] == 0 or texels.shape[1] == 0:
        raise ValueError(f"expected an (H, W, 3) map, got {texels.shape}")
    h, w = texels.shape[:2]
    dirs, d_omega = equirect_grid(w, h)
    weight = d_omega if weights_mask is None else d_omega * weights_mask
    basis = eval_sh_basis(dirs.reshape(-1, 3), order, check_unit=False)
    coeffs = transpose_matmul(basis, texels.reshape(-1, 3) * weight.reshape(-1, 1))
    return ShVector(order, coeffs)


def uniform_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.uniform(-1.0, 1.0, n)
    phi = rng.uniform(0.0, 2 * math.pi, n)
    s = np.sqrt(np.maximum(0.0, 1 - z * z))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


def fibonacci_sphere(n: int) -> np.ndarray:
    """Spherical Fibonacci point set; equal-area, deterministic."""
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = i * math.pi * (3 - math.sqrt(5))
    s = np.sqrt(np.maximum(0.0, 1 - z * z))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


def project_fn_to_sh(
    fn: Callable[[np.ndarray], np.ndarray],
    order: int,
    quadrature: str = "equirect",
    resolution: tuple[int, int] | int = (512, 256),
    samples: int = 0,
    seed: int = 0,
) -> ShVector:
    """Project ``fn`` (directions (N,3) -> rgb (N,3)) onto the SH basis.

    ``quadrature="equirect"`` uses a midpoint Riemann sum with texel solid
    angle ``sin(theta) dtheta dphi``; ``"mc"`` uses ``samples`` uniform
    sphere directions drawn from ``seed``.
    """
    _check_order(order)
    if quadrature == "equirect":
        if isinstance(resolution, int):
            resolution = (2 * resolution, resolution)
        w, h = resolution
        if w <= 0 or h <= 0:
            raise ValueError("projection resolution must be positive")
        dirs, _ = equirect_grid(w, h)
        values = np.asarray(fn(dirs.reshape(-1, 3)), dtype=np.float64).reshape(h, w, 3)
        return project_texels(values, order)
    if quadrature == "mc":
        if samples <= 0:
            raise ValueError("Monte-Carlo projection needs samples > 0")
        dirs = uniform_sphere(samples, np.random.default_rng(seed))
        values = np.asarray(fn(dirs), dtype=np.float64).reshape(-1, 3)
        basis = eval_sh_basis(dirs, order, check_unit=False)
        return ShVector(order, transpose_matmul(basis, values) * (4 * math.pi / samples))
    raise ValueError(f"unknown quadrature {quadrature!r}")


# --- rotation ----------------------------------------------------------------

def _rotation_fit_dirs(order: int) -> np.ndarray:
    return fibonacci_sphere(4 * num_coeffs(order))


_ROT_CACHE: dict[int, tuple[np.ndarray, list[np.ndarray]]] = {}


def rotation_matrices(rot: np.ndarray, order: int) -> np.ndarray:
    """Block-diagonal SH rotation: coefficients of ``f(R^T w)`` from those of ``f(w)``.

    ``rot`` has shape (..., 3, 3). Each band block is recovered exactly by
    least squares on a fixed well-spread point set, since the rotated
    band-l functions stay inside band l.
    """
    if order not in _ROT_CACHE:
        pts = _rotation_fit_dirs(order)
        basis = eval_sh_basis(pts, order, check_unit=False)
        pinvs = []
        for l in range(order + 1):
            sl = slice(l * l, (l + 1) ** 2)
            pinvs.append(np.linalg.pinv(basis[:, sl]))
        _ROT_CACHE[order] = (pts, pinvs)
    pts, pinvs = _ROT_CACHE[order]
    rot = np.asarray(rot, dtype=np.float64)
    # g(w) = f(R^T w); sample g at pts: basis evaluated at R^T p
    rotated = np.einsum("...ji,pj->...pi", rot, pts)
    basis_r = eval_sh_basis(rotated, order, check_unit=False)
    n = num_coeffs(order)
    out = np.zeros(rot.shape[:-2] + (n, n))
    for l in range(order + 1):
        sl = slice(l * l, (l + 1) ** 2)
        # g_coeffs = D f_coeffs; g(p) = Y(R^T p) f  =>  D = pinv(Y(p)) Y(R^T p)
        out[..., sl, sl] = np.einsum("ip,...pj->...ij", pinvs[l], basis_r[..., sl])
    return out


# --- serialization -------------------------------------------------------------

def save_sh(path, sh: ShVector) -> None:
    """Text format: ``SH <order> <channels>`` then one line per coefficient."""
    lines = [f"SH {sh.order} 3"]
    lines += [" ".join(repr(float(v)) for v in row) for row in sh.coeffs]
    Path(path).write_text("\n".join(lines) + "\n")


def load_sh(path) -> ShVector:
    text = Path(path).read_text().split()
    if len(text) < 3 or text[0] != "SH":
        raise ValueError(f"{path}: missing 'SH <order> <channels>' header")
    order, channels = int(text[1]), int(text[2])
    if channels != 3:
        raise ValueError(f"{path}: only 3-channel SH files are supported")
    values = np.array([float(v) for v in text[3:]])
    if values.size != num_coeffs(order) * channels:
        raise ValueError(f"{path}: expected {num_coeffs(order) * channels} values, got {values.size}")
    return ShVector(order, values.reshape(-1, channels))
