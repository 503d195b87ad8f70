"""Acceptance criteria 1-11; each test records one PASS/FAIL line for the terminal summary."""
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from prt_relight import oracle, optim
from prt_relight import transport as tr
from prt_relight.envlight import EnvironmentMap, init_illumination, stitch_environment, texel_directions
from prt_relight.geometry import quad_mesh, uv_sphere
from prt_relight.losses import (IlluminationPrior, LossWeights, albedo_loss, chromaticity_loss_grad,
                                illumination_loss, total_loss)
from prt_relight.raster import rasterize
from prt_relight.renderer import render_closed_form, render_view
from prt_relight.sampling import LightSampleSet
from prt_relight.scene import Camera, SceneDataset, ViewImage
from prt_relight.sh import (ShIllumination, ShVector, eval_sh_basis, eval_sh_radiance, fibonacci_sphere,
                            lambert_factors, num_coeffs, project_texels, sh_index, uniform_sphere)

RESULTS: dict[int, tuple[bool, str]] = {}

E2E_MATERIAL = oracle.AnalyticMaterial("phong", (0.6, 0.5, 0.4), (0.25, 0.25, 0.25), 20.0, 0.3)
E2E_TEXTURE = 32
E2E_BUDGET_S = 15 * 60


def verdict(criterion: int, ok: bool, detail: str) -> None:
    RESULTS[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# --- 1-6: properties ----------------------------------------------------------------


def test_c01_sh_orthonormality():
    t0 = time.perf_counter()
    n, order = 1_000_000, 10
    rng = np.random.default_rng(0)
    k = num_coeffs(order)
    gram = np.zeros((k, k))
    for _ in range(10):
        b = eval_sh_basis(uniform_sphere(n // 10, rng), order)
        gram += b.T @ b
    gram *= 4 * math.pi / n
    err = np.abs(gram - np.eye(k))
    low = num_coeffs(4)
    low_err = err[:low, :low].max()
    pairs = [(sh_index(l, m), sh_index(l2, m2)) for l, m, l2, m2 in
             [(5, 0, 5, 0), (6, -3, 6, -3), (7, 7, 7, 7), (8, 2, 8, -2), (9, -9, 3, 1), (10, 0, 10, 0),
              (10, 10, 10, 10), (10, -5, 9, -5), (10, 1, 2, 1), (6, 6, 10, 6)]]
    spot_err = max(err[i, j] for i, j in pairs)
    diag_err = np.abs(np.diag(gram) - 1).max()
    dt = time.perf_counter() - t0
    verdict(1, low_err < 2e-2 and spot_err < 2e-2 and diag_err < 2e-2 and dt < 30,
            f"l<=4 max {low_err:.2e}, spot max {spot_err:.2e}, diag(l<=10) max {diag_err:.2e}, {dt:.1f}s")


def test_c02_projection_round_trip():
    w, h = 512, 256
    rng = np.random.default_rng(1)
    dirs = texel_directions(w, h)
    worst = 0.0
    for order in (2, 4, 6):
        c = rng.normal(0, 0.3, (num_coeffs(order), 3))
        truth = ShVector(order, c)
        texels = eval_sh_radiance(truth, dirs.reshape(-1, 3)).reshape(h, w, 3)
        rec = project_texels(texels, order)
        probe = uniform_sphere(5000, rng)
        worst = max(worst, np.abs(eval_sh_radiance(rec, probe) - eval_sh_radiance(truth, probe)).max())
    const = project_texels(np.ones((h, w, 3)), 4).coeffs[0]
    c0_err = np.abs(const - 2 * math.sqrt(math.pi)).max()
    verdict(2, worst < 1e-2 and c0_err < 1e-3, f"pointwise max {worst:.2e}, constant c0 error {c0_err:.2e}")


def test_c03_gradient_correctness():
    t0 = time.perf_counter()
    objective, params = optim.gradcheck_fixture(seed=0, size=8, texture_resolution=8,
                                                diffuse_order=2, specular_order=4)
    rep = optim.finite_diff_check(objective, params, eps=1e-4, tolerance=1e-4, count=200, raise_on_fail=False)
    dt = time.perf_counter() - t0
    blocks = ", ".join(f"{k} {v:.1e}" for k, v in rep.per_block.items())
    verdict(3, rep.max_rel_error < 1e-4 and rep.checked >= 200 and dt < 120,
            f"max rel {rep.max_rel_error:.2e} over {rep.checked} params ({blocks}), {dt:.1f}s")


def _quadrature_error(gb, n):
    rng = np.random.default_rng(0)
    tex, field = tr.init_parameters(4, 4, 4)
    tex.rho_d[:] = rng.uniform(0.2, 0.9, tex.rho_d.shape)
    tex.rho_s[:] = rng.uniform(0.2, 0.9, tex.rho_s.shape)
    field.diffuse[:] = rng.normal(0, 0.3, field.diffuse.shape)
    field.specular[:] = rng.normal(0, 0.3, field.specular.shape)
    c = rng.normal(0, 0.3, (num_coeffs(4), 3))
    c[0] = 5.0
    light = ShVector(4, c)
    s = LightSampleSet.from_world(gb, fibonacci_sphere(n))
    quad = render_view(gb, tex, field, light, s, quadrature_weight=4 * math.pi / n, clamp_light=False)
    exact = render_closed_form(gb, tex, field, light)
    m = gb.mask
    return np.linalg.norm(quad.image[m] - exact.image[m]) / np.linalg.norm(exact.image[m])


def test_c04_quadrature_vs_closed_form():
    cam = Camera.look_at("q", [0.5, 0.9, 2.8], [0, 0, 0], [0, 1, 0], 50, 24, 24)
    gb = rasterize(uv_sphere(1.0, 32, 16), cam)
    e256, e4096, e16384 = (_quadrature_error(gb, n) for n in (256, 4096, 16384))
    verdict(4, e4096 < 0.02 and e16384 < e256,
            f"rel error 4096: {e4096:.2e}; 256: {e256:.2e} > 16384: {e16384:.2e}")


def test_c05_analytic_lambert():
    factors = lambert_factors(2)
    expect = np.array([math.pi, 2 * math.pi / 3, math.pi / 4])
    cam = Camera.look_at("l", [0.5, 1.0, 3.0], [0, 0, 0], [0, 1, 0], 45.0, 24, 24)
    surf = oracle.intersect(oracle.AnalyticSphere(), cam)
    white = oracle.AnalyticMaterial("lambert", (1.0, 1.0, 1.0))
    c = np.zeros((9, 3))
    c[0] = (2.0, 1.8, 1.6)
    c[1:4] = [[0.3, 0.1, -0.2], [0.5, 0.4, 0.3], [-0.2, 0.3, 0.1]]
    c[4:] = [[0.1, 0.05, 0.0], [-0.1, 0.0, 0.1], [0.15, 0.1, 0.05], [0.0, -0.05, 0.1], [0.05, 0.1, -0.1]]
    light = ShVector(2, c)
    band = np.array([0, 1, 1, 1, 2, 2, 2, 2, 2])
    conv = eval_sh_basis(surf.normal, 2) @ (c * expect[band, None]) / math.pi
    mc = oracle.mc_radiance(surf, white, light, spp=4096, seed=11)
    mc_err = float(np.mean(np.abs(mc - conv) / conv))
    ana_err = float(np.max(np.abs(oracle.analytic_radiance(surf, white, light) - conv) / conv))
    furnace = oracle.mc_radiance(surf, white, ShVector.constant((0.7, 0.7, 0.7)), spp=256)
    furnace_err = float(np.max(np.abs(furnace - 0.7) / 0.7))
    factor_err = float(np.max(np.abs(factors - expect) / expect))
    verdict(5, mc_err < 0.01 and ana_err < 0.01 and furnace_err < 0.01 and factor_err < 1e-9,
            f"MC@4096spp vs convolution {mc_err:.2e}, analytic {ana_err:.1e}, furnace {furnace_err:.1e}, "
            f"factors {factor_err:.1e}")


def test_c06_stitching_fidelity():
    rng = np.random.default_rng(5)
    c = rng.normal(0, 0.15, (num_coeffs(4), 3))
    c[0] = 3.0
    light = ShVector(4, c)
    pano = oracle.sh_panorama(light, 256)
    cams = oracle.random_cameras(12, 48, seed=2, fov=70)
    views = [ViewImage(cm.id, pano.lookup(cm.pixel_rays()), np.zeros((cm.height, cm.width), bool)) for cm in cams]
    ds = SceneDataset({cm.id: cm for cm in cams}, quad_mesh(), views, tuple(cm.id for cm in cams), ())
    env = stitch_environment(ds, 32)
    truth = eval_sh_radiance(light, texel_directions(64, 32).reshape(-1, 3)).reshape(32, 64, 3)
    mae = float(np.mean(np.abs(env.texels[env.coverage] - truth[env.coverage])))
    h = 256
    up = texel_directions(2 * h, h)[..., 1] > 0
    half = EnvironmentMap(np.where(up[..., None], 1.0, 0.0) * np.ones((h, 2 * h, 3)), up)
    c0 = init_illumination(half).initial.coeffs[0]
    c0_rel = float(np.max(np.abs(c0 - math.sqrt(math.pi)) / math.sqrt(math.pi)))
    verdict(6, mae < 1e-2 and c0_rel < 2e-2,
            f"covered-texel MAE {mae:.2e} ({env.coverage.mean():.0%} covered), half-map c0 rel error {c0_rel:.2e}")


# --- 7-9: end-to-end -----------------------------------------------------------------


@pytest.fixture(scope="module")
def e2e_scene():
    da, db, truth = oracle.generate_scene("sphere", E2E_MATERIAL, oracle.preset_light("warm_key"),
                                          oracle.preset_light("cool_side"), view_count=36, resolution=128,
                                          seed=0, test_count=4)
    assert len(da.train) == 32 and len(da.test) == 4
    return da, db, truth


def _fit_and_score(scene, weights: LossWeights) -> dict:
    da, db, truth = scene
    cfg = optim.FitConfig(iterations=2000, texture_resolution=E2E_TEXTURE, weights=weights)
    assert (cfg.lr, cfg.beta1, cfg.beta2) == (1e-3, 0.9, 0.999)
    t0 = time.perf_counter()
    res = optim.fit(da, cfg)
    seconds = time.perf_counter() - t0
    return {"seconds": seconds, "iterations": res.iterations,
            "train": optim.evaluate_psnr(da, res.params, cfg, da.train),
            "test": optim.evaluate_psnr(da, res.params, cfg, da.test),
            "relight": optim.evaluate_psnr(db, res.params, cfg, db.test, truth.light_b)}


@pytest.fixture(scope="module")
def e2e_fit(e2e_scene):
    return _fit_and_score(e2e_scene, LossWeights(1.0, 1.0, 1.0))


@pytest.fixture(scope="module")
def e2e_fit_unregularized(e2e_scene):
    return _fit_and_score(e2e_scene, LossWeights(lambda_chr=0.0, lambda_illum=0.0, lambda_alb=1.0))


def test_c07_end_to_end_fit(e2e_fit):
    r = e2e_fit
    verdict(7, r["iterations"] == 2000 and r["train"] >= 35 and r["test"] >= 30 and r["seconds"] < E2E_BUDGET_S,
            f"train {r['train']:.2f} dB (>=35), held-out {r['test']:.2f} dB (>=30), fit {r['seconds']:.0f}s")


def test_c08_relighting(e2e_fit):
    r = e2e_fit
    verdict(8, r["relight"] >= 25, f"relit held-out PSNR {r['relight']:.2f} dB (>=25)")


def test_c09_regularizer_necessity(e2e_fit, e2e_fit_unregularized):
    a, b = e2e_fit, e2e_fit_unregularized
    drop = a["relight"] - b["relight"]
    train_gap = abs(a["train"] - b["train"])
    verdict(9, drop >= 3 and train_gap <= 1,
            f"relight {a['relight']:.2f} -> {b['relight']:.2f} dB without chroma/illum terms "
            f"(drop {drop:.2f}, need >=3); train {a['train']:.2f} vs {b['train']:.2f} (gap {train_gap:.2f}, need <=1)")


# --- 10-11 ---------------------------------------------------------------------------


def test_c10_loss_identities():
    tex, _ = tr.init_parameters(16, 2, 4)
    alb = albedo_loss(tex)
    rng = np.random.default_rng(3)
    gray = rng.uniform(0.1, 2.0, (50, 8, 1)) * np.array([0.3, 0.5, 0.9])
    chroma = chromaticity_loss_grad(gray, np.ones(50))[0]
    c = rng.normal(0, 0.1, (121, 3))
    c[0] += 2
    illum = ShIllumination.from_initial(ShVector(10, c))
    ill = illumination_loss(illum)
    parts = dict(zip(("im", "chr", "illum", "alb"), rng.random(4)))
    w = LossWeights(*rng.uniform(0.1, 3, 3))
    total = total_loss(parts, w).total
    expect = parts["im"] + w.lambda_chr * parts["chr"] + w.lambda_illum * parts["illum"] + w.lambda_alb * parts["alb"]
    add_err = abs(total - expect)
    prior_p = IlluminationPrior(illum).p
    verdict(10, alb == 0 and abs(chroma) < 1e-12 and ill == 0 and add_err < 1e-9 and prior_p == 4096,
            f"L_alb {alb:g}, L_chr {chroma:.1e}, L_illum {ill:g}, additivity error {add_err:.1e}")


def test_c11_determinism_across_threads(e2e_scene, tmp_path):
    from prt_relight.scene import load_scene, save_scene
    da, _, _ = e2e_scene
    save_scene(tmp_path / "scene", da)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"texture_resolution": E2E_TEXTURE, "checkpoint_interval": 100, "seed": 7}))
    blobs = {}
    for threads in (1, 4):
        out = tmp_path / f"run_t{threads}"
        proc = subprocess.run([sys.executable, "-m", "prt_relight.cli", "fit", "--scene", str(tmp_path / "scene"),
                               "--out", str(out), "--config", str(cfg), "--iters", "100",
                               "--threads", str(threads)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        blobs[threads] = (out / "checkpoint_000100.bin").read_bytes()
    with threadpool_limits(limits=2):
        res = optim.fit(load_scene(tmp_path / "scene"), optim.FitConfig.from_dict(json.loads(cfg.read_text()) | {"iterations": 100}),
                        out_dir=tmp_path / "inproc")
    blobs[2] = (tmp_path / "inproc" / "checkpoint_000100.bin").read_bytes()
    same = {t: blobs[t] == blobs[1] for t in (2, 4)}
    ok = all(same.values()) and res.iterations == 100
    verdict(11, ok, f"iteration-100 checkpoint of the 1-thread run equals 2 threads: {same[2]}, "
                    f"4 threads: {same[4]} ({len(blobs[1])} bytes)")
