"""Reverse-mode gradients of the training loss, Adam, the fitting loop, and gradient checks."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .envlight import init_illumination, stitch_environment
from .losses import (IlluminationPrior, LossReport, LossWeights, albedo_loss_grad, chroma_weights,
                     chromaticity_loss_grad, image_loss_grad, total_loss)
from .raster import cached_rasterize, compute_tangent_frames
from .renderer import ViewContext, build_context, forward
from .sampling import LightSampleSet, SamplingConfig
from .scene import SceneDataset
from .sh import ShIllumination, ShVector, transpose_matmul
from .transport import (MaterialTextures, TransportField, init_parameters, load_checkpoint,
                        save_checkpoint, sigmoid)

log = logging.getLogger(__name__)


@dataclass
class ParameterSet:
    textures: MaterialTextures
    field: TransportField
    illumination: ShIllumination

    def arrays(self) -> dict[str, np.ndarray]:
        """Live views of every optimizable block, keyed as in checkpoints."""
        return {
            "rho_d": self.textures.rho_d,
            "rho_s": self.textures.rho_s,
            "diffuse": self.field.diffuse,
            "specular": self.field.specular,
            "illum": self.illumination.current.coeffs,
        }

    def copy(self) -> "ParameterSet":
        tex = MaterialTextures(self.textures.resolution, self.textures.rho_d.copy(), self.textures.rho_s.copy())
        fld = replace(self.field, diffuse=self.field.diffuse.copy(), specular=self.field.specular.copy())
        ill = ShIllumination(self.illumination.current.copy(), self.illumination.initial.copy(),
                             self.illumination.coverage)
        return ParameterSet(tex, fld, ill)


# --- backward ---------------------------------------------------------------------


def _branch_signature(tape, residual, prior_diff, alb_d, alb_s, chroma_valid) -> bytes:
    bits = [residual > 0, residual == 0, alb_d > 0, alb_s > 0, *chroma_valid]
    if tape.clamp_light:
        bits += [tape.light_d > 0, tape.light_s > 0]
    if prior_diff is not None:
        bits.append(prior_diff > 0)
    return np.packbits(np.concatenate([np.ravel(b) for b in bits])).tobytes()


def view_loss_and_grad(ctx: ViewContext, params: ParameterSet, weights: LossWeights,
                       prior: IlluminationPrior | None, chroma_w: np.ndarray | None = None,
                       clamp_light: bool = True, want_signature: bool = False):
    """Total loss for one view and exact gradients for every parameter block.

    Returns ``(report, grads)`` or ``(report, grads, signature)`` where the
    signature encodes every non-smooth branch taken (l1 signs, light clamp,
    chromaticity guard) so gradient checks can avoid kinks.
    """
    tex, fld = params.textures, params.field
    light = params.illumination.current
    tape = forward(ctx, tex, fld, light, clamp_light)
    if ctx.target is None:
        raise ValueError("view context has no target pixels")
    l_im, d_rad = image_loss_grad(tape.radiance, ctx.target)

    if chroma_w is None:
        chroma_w = chroma_weights(ctx.target)
    chr_d, g_td = chromaticity_loss_grad(tape.td.transpose(0, 2, 1), chroma_w)
    chr_s, g_ts = chromaticity_loss_grad(tape.ts.transpose(0, 2, 1), chroma_w)
    l_chr = chr_d + chr_s

    if prior is not None and weights.lambda_illum > 0:
        l_ill, g_ill = prior.loss_grad(light)
        prior_diff = prior.basis @ light.coeffs - prior.reference if want_signature else None
    else:
        l_ill, g_ill, prior_diff = 0.0, np.zeros_like(light.coeffs), None
        if prior is not None:
            l_ill = prior.loss_grad(light)[0]
    l_alb, g_alb_d, g_alb_s = albedo_loss_grad(tex)
    report = total_loss({"im": l_im, "chr": l_chr, "illum": l_ill, "alb": l_alb}, weights,
                        p=prior.p if prior is not None else 0, q=tex.q)

    # image formation
    d_dint = d_rad * tape.rho_d
    d_sint = d_rad * tape.rho_s
    g_rho_d = d_rad * tape.diffuse_int
    g_rho_s = d_rad * tape.specular_int
    if clamp_light:
        ld, ls = np.maximum(tape.light_d, 0.0), np.maximum(tape.light_s, 0.0)
    else:
        ld, ls = tape.light_d, tape.light_s
    d_td = ctx.dw_d * d_dint[:, :, None] * ld + weights.lambda_chr * g_td.transpose(0, 2, 1)
    d_ts = ctx.dw_s * d_sint[:, :, None] * ls + weights.lambda_chr * g_ts.transpose(0, 2, 1)
    d_ld = ctx.dw_d * d_dint[:, :, None] * tape.td
    d_ls = ctx.dw_s * d_sint[:, :, None] * tape.ts
    if clamp_light:
        d_ld = d_ld * (tape.light_d > 0)
        d_ls = d_ls * (tape.light_s > 0)
    if fld.softplus:
        d_td = d_td * sigmoid(tape.td_raw)
        d_ts = d_ts * sigmoid(tape.ts_raw)

    yd = ctx.diffuse_basis
    d_a = d_td @ yd
    d_s = d_ts @ ctx.specular_basis
    d_light = np.concatenate([d_ld, d_ls], axis=2).transpose(0, 2, 1).reshape(-1, 3)
    g_light = transpose_matmul(tape.light_basis, d_light)

    fp = ctx.footprint
    grads = {
        "rho_d": fp.scatter(g_rho_d) + weights.lambda_alb * g_alb_d,
        "rho_s": fp.scatter(g_rho_s) + weights.lambda_alb * g_alb_s,
        "diffuse": fp.scatter(d_a),
        "specular": fp.scatter(d_s),
        "illum": g_light + weights.lambda_illum * g_ill,
    }
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block '{name}'")
    if not want_signature:
        return report, grads
    chroma_valid = [np.linalg.norm(tape.td, axis=1) >= 1e-8, np.linalg.norm(tape.ts, axis=1) >= 1e-8]
    sig = _branch_signature(tape, tape.radiance - ctx.target, prior_diff,
                            tex.rho_d - 0.5, tex.rho_s - 0.5, chroma_valid)
    return report, grads, sig


backward = view_loss_and_grad


# --- Adam -------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, arrays: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()}, **kw)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """Bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if g.shape != params[name].shape or g.shape != state.m[name].shape:
            raise ValueError(f"shape mismatch for '{name}': param {params[name].shape}, grad {g.shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m, v, p = state.m[name], state.v[name], params[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --- fitting ----------------------------------------------------------------------


@dataclass
class FitConfig:
    iterations: int = 2000
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    texture_resolution: int = 256
    diffuse_order: int = 4
    specular_order: int = 8
    diffuse_init_scale: float = 1.0 / math.pi
    softplus_transport: bool = False
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    illum_dir_count: int = 4096
    env_height: int = 32
    checkpoint_interval: int = 0
    target_loss: float | None = None
    quadrature_weight: float | None = None
    cache_light_basis: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        kw = {}
        names = {f for f in cls.__dataclass_fields__}
        for k, v in d.items():
            if k in ("lambda_chr", "lambda_illum", "lambda_alb"):
                continue
            if k in names and k not in ("sampling", "weights"):
                kw[k] = v
        kw["sampling"] = SamplingConfig.from_dict(d)
        kw["weights"] = LossWeights(**{k: float(d[k]) for k in ("lambda_chr", "lambda_illum", "lambda_alb")
                                       if k in d})
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("sampling", "weights")}
        out.update({k: getattr(self.sampling, k) for k in self.sampling.__dataclass_fields__})
        out.update({k: getattr(self.weights, k) for k in self.weights.__dataclass_fields__})
        for k in ("diffuse_half_angles", "specular_half_angles"):
            out[k] = list(out[k])
        return out


@dataclass
class FitResult:
    params: ParameterSet
    history: list[LossReport]
    adam: AdamState
    iterations: int


def prepare_view(dataset: SceneDataset, view_id: str, field_: TransportField, config: FitConfig,
                 tangents=None, with_target: bool = True) -> ViewContext:
    cam = dataset.cameras[view_id]
    gb = cached_rasterize(dataset.mesh, cam, tangents)
    target = None
    if with_target:
        view = dataset.view(view_id)
        gb.mask = gb.mask & view.mask
        target = view.pixels
    samples = LightSampleSet.from_gbuffer(gb, config.sampling)
    ctx = build_context(gb, samples, field_, config.quadrature_weight, target=target)
    ctx.cache_light_basis = config.cache_light_basis
    return ctx


def initial_parameters(dataset: SceneDataset, config: FitConfig,
                       illumination: ShIllumination | None = None) -> ParameterSet:
    tex, fld = init_parameters(config.texture_resolution, config.diffuse_order, config.specular_order,
                               config.diffuse_init_scale, config.softplus_transport)
    if illumination is None:
        env = stitch_environment(dataset, config.env_height, view_ids=dataset.train)
        illumination = init_illumination(env)
    return ParameterSet(tex, fld, illumination)


def fit(dataset: SceneDataset, config: FitConfig, illumination: ShIllumination | None = None,
        out_dir=None, progress: Callable[[int, LossReport], None] | None = None) -> FitResult:
    """Optimize albedo, transport and illumination, one training view per iteration."""
    train = list(dataset.train)
    if not train:
        raise ValueError("dataset has no training views")
    params = initial_parameters(dataset, config, illumination)
    tangents = compute_tangent_frames(dataset.mesh)
    contexts = {vid: prepare_view(dataset, vid, params.field, config, tangents) for vid in train}
    chroma = {vid: chroma_weights(ctx.target) for vid, ctx in contexts.items()}
    prior = IlluminationPrior(params.illumination, dir_count=config.illum_dir_count, seed=config.seed)
    arrays = params.arrays()
    adam = AdamState.for_params(arrays, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    rng = np.random.default_rng(config.seed)

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_file = open(out / "loss.csv", "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(["iteration", "im", "chr", "illum", "alb", "total"])
    history: list[LossReport] = []
    order: list[str] = []
    it = 0
    try:
        while it < config.iterations:
            if not order:
                order = [train[i] for i in rng.permutation(len(train))]
            vid = order.pop(0)
            report, grads = view_loss_and_grad(contexts[vid], params, config.weights, prior, chroma[vid])
            adam_step(adam, arrays, grads)
            it += 1
            history.append(report)
            if writer is not None:
                writer.writerow([it, *(repr(v) for v in report.as_row())])
            if progress is not None:
                progress(it, report)
            if out is not None and config.checkpoint_interval and it % config.checkpoint_interval == 0:
                write_checkpoint(out / f"checkpoint_{it:06d}.bin", params, adam)
            if config.target_loss is not None and report.total <= config.target_loss:
                break
    finally:
        if writer is not None:
            csv_file.close()
    if out is not None:
        write_checkpoint(out / "checkpoint_final.bin", params, adam)
    return FitResult(params, history, adam, it)


def write_checkpoint(path, params: ParameterSet, adam: AdamState | None = None) -> None:
    save_checkpoint(path, params.textures, params.field, params.illumination.current,
                    params.illumination.initial, adam)


def read_checkpoint(path) -> ParameterSet:
    tex, fld, cur, init, _, _ = load_checkpoint(path)
    return ParameterSet(tex, fld, ShIllumination(cur, init))


def render_fitted(dataset: SceneDataset, view_id: str, params: ParameterSet, config: FitConfig,
                  light: ShVector | None = None):
    """Render a fitted scene at one camera; ``light`` substitutes the illumination."""
    from .renderer import RadianceImage
    ctx = prepare_view(dataset, view_id, params.field, config, with_target=False)
    coeffs = params.illumination.current if light is None else light
    tape = forward(ctx, params.textures, params.field, coeffs)
    return RadianceImage.from_packed(tape.radiance, ctx.mask)


def evaluate_psnr(dataset: SceneDataset, params: ParameterSet, config: FitConfig, view_ids,
                  light: ShVector | None = None) -> float:
    """Mean masked PSNR of fitted renders against the dataset's images."""
    from .metrics import psnr
    vals = []
    for vid in view_ids:
        img = render_fitted(dataset, vid, params, config, light)
        view = dataset.view(vid)
        vals.append(psnr(img.image, view.pixels, img.mask, view.mask))
    return float(np.mean(vals))


# --- finite differences ---------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    checked: int
    skipped: int
    worst: list[tuple[str, int, float, float, float]]
    per_block: dict[str, float]
    passed: bool


class GradientCheckError(AssertionError):
    pass


def finite_diff_check(objective: Callable, params: dict[str, np.ndarray], eps: float = 1e-4,
                      tolerance: float = 1e-4, count: int = 200, seed: int = 0,
                      floor: float = 1e-6, raise_on_fail: bool = True) -> GradCheckReport:
    """Compare analytic gradients with central differences on a seeded parameter subset.

    ``objective()`` evaluates at the current contents of ``params`` and
    returns ``(value, grads)`` or ``(value, grads, signature)``. Perturbations
    whose +/- evaluations change the signature straddle a kink and are
    replaced by fresh draws. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(seed)

    def call():
        out = objective()
        return (out[0], out[1], out[2]) if len(out) == 3 else (out[0], out[1], None)

    _, grads, sig0 = call()
    grads = {k: g.copy() for k, g in grads.items()}
    names = list(params)
    per_block_quota = max(1, math.ceil(count / len(names)))
    records, skipped = [], 0
    for name in names:
        arr = params[name]
        flat = arr.reshape(-1)
        taken, attempts = 0, 0
        candidates = rng.permutation(flat.size)
        while taken < min(per_block_quota, flat.size) and attempts < len(candidates):
            idx = int(candidates[attempts])
            attempts += 1
            orig = flat[idx]
            flat[idx] = orig + eps
            fp, _, sp_ = call()
            flat[idx] = orig - eps
            fm, _, sm = call()
            flat[idx] = orig
            if sig0 is not None and (sp_ != sig0 or sm != sig0):
                skipped += 1
                continue
            num = (fp - fm) / (2 * eps)
            ana = float(grads[name].reshape(-1)[idx])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            records.append((name, idx, ana, num, rel))
            taken += 1
    rels = np.array([r[4] for r in records])
    per_block = {n: float(max((r[4] for r in records if r[0] == n), default=0.0)) for n in names}
    worst = sorted(records, key=lambda r: -r[4])[:10]
    report = GradCheckReport(float(rels.max()), float(rels.mean()), len(records), skipped, worst, per_block,
                             bool(rels.max() < tolerance))
    if raise_on_fail and not report.passed:
        detail = ", ".join(f"{n}[{i}] analytic={a:.3e} numeric={m:.3e} rel={r:.2e}" for n, i, a, m, r in worst[:5])
        raise GradientCheckError(f"gradient check failed (max rel {report.max_rel_error:.3e}): {detail}")
    return report


def gradcheck_fixture(seed: int = 0, size: int = 8, texture_resolution: int = 8,
                      diffuse_order: int = 2, specular_order: int = 4, clamp_light: bool = True):
    """Small randomized pipeline instance kept away from l1/clamp kinks.

    Returns ``(objective, params_dict)`` for :func:`finite_diff_check`.
    """
    from .geometry import uv_sphere
    from .scene import Camera

    rng = np.random.default_rng(seed)
    mesh = uv_sphere(1.0, 16, 8)
    cam = Camera.look_at("fd", [0.3, 0.4, 2.6], [0, 0, 0], [0, 1, 0], 48.0, size, size)
    from .raster import rasterize

    gb = rasterize(mesh, cam)
    samples = LightSampleSet.from_gbuffer(gb, SamplingConfig())
    tex, fld = init_parameters(texture_resolution, diffuse_order, specular_order, 1.0 / math.pi)
    q = tex.q
    tex.rho_d[:] = 0.5 + rng.choice([-1, 1], (q, 3)) * rng.uniform(0.1, 0.3, (q, 3))
    tex.rho_s[:] = 0.5 + rng.choice([-1, 1], (q, 3)) * rng.uniform(0.1, 0.3, (q, 3))
    fld.diffuse *= rng.uniform(0.8, 1.2, fld.diffuse.shape[:2])[..., None]
    fld.diffuse += rng.normal(0, 0.02, fld.diffuse.shape)
    fld.specular[:] = rng.uniform(0.02, 0.1, fld.specular.shape)
    coeffs = rng.normal(0, 0.05, (121, 3))
    coeffs[0] = rng.uniform(2.0, 3.0, 3)
    initial = ShVector(10, coeffs.copy())
    shifted = initial.coeffs.copy()
    shifted[0] += 2.5
    illum = ShIllumination(ShVector(10, shifted), ShVector(10, rng.normal(0, 0.01, (121, 3)) + initial.coeffs))
    params = ParameterSet(tex, fld, illum)
    ctx = build_context(gb, samples, fld)
    base = forward(ctx, tex, fld, illum.current, clamp_light).radiance
    ctx.target = base + rng.choice([-1, 1], base.shape) * rng.uniform(0.05, 0.15, base.shape)
    prior = IlluminationPrior(illum, coverage=None, dir_count=512, seed=seed)
    chroma_w = chroma_weights(ctx.target)
    weights = LossWeights()

    def objective():
        rep, grads, sig = view_loss_and_grad(ctx, params, weights, prior, chroma_w,
                                             clamp_light=clamp_light, want_signature=True)
        return rep.total, grads, sig

    return objective, params.arrays()
