import math

import numpy as np
import pytest

from prt_relight import oracle
from prt_relight.geometry import uv_sphere
from prt_relight.scene import Camera, load_scene
from prt_relight.sh import ShVector, eval_sh_basis, lambert_factors

LAMBERT_WHITE = oracle.AnalyticMaterial("lambert", (1.0, 1.0, 1.0))


@pytest.fixture(scope="module")
def cam():
    return Camera.look_at("o", [0.5, 1.0, 3.0], [0, 0, 0], [0, 1, 0], 45.0, 24, 24)


def _order2_light():
    c = np.zeros((9, 3))
    c[0] = (2.0, 1.8, 1.6)
    c[1:4] = [[0.3, 0.1, -0.2], [0.5, 0.4, 0.3], [-0.2, 0.3, 0.1]]
    c[4:] = [[0.1, 0.05, 0.0], [-0.1, 0.0, 0.1], [0.15, 0.1, 0.05], [0.0, -0.05, 0.1], [0.05, 0.1, -0.1]]
    return ShVector(2, c)


def test_furnace_analytic_and_mc(cam):
    light = ShVector.constant((0.8, 0.8, 0.8), order=0)
    sphere = oracle.AnalyticSphere()
    surf = oracle.intersect(sphere, cam)
    ana = oracle.analytic_radiance(surf, LAMBERT_WHITE, light)
    mc = oracle.mc_radiance(surf, LAMBERT_WHITE, light, spp=64)
    np.testing.assert_allclose(ana, 0.8, rtol=1e-12)
    np.testing.assert_allclose(mc, 0.8, rtol=1e-12)


def test_lambert_factors_values():
    np.testing.assert_allclose(lambert_factors(2), [math.pi, 2 * math.pi / 3, math.pi / 4], rtol=1e-12)


def test_lambert_order2_mc_matches_convolution(cam):
    light = _order2_light()
    surf = oracle.intersect(oracle.AnalyticSphere(), cam)
    ana = oracle.analytic_radiance(surf, LAMBERT_WHITE, light)
    mc = oracle.mc_radiance(surf, LAMBERT_WHITE, light, spp=4096, seed=5)
    rel = np.abs(mc - ana) / ana
    assert rel.mean() < 0.01
    assert np.percentile(rel, 99) < 0.02


def test_analytic_explicit_convolution(cam):
    light = _order2_light()
    surf = oracle.intersect(oracle.AnalyticSphere(), cam)
    band = np.array([0, 1, 1, 1, 2, 2, 2, 2, 2])
    a = np.array([math.pi, 2 * math.pi / 3, math.pi / 4])[band]
    expect = eval_sh_basis(surf.normal, 2) @ (light.coeffs * a[:, None]) / math.pi
    np.testing.assert_allclose(oracle.analytic_radiance(surf, LAMBERT_WHITE, light), expect, rtol=1e-12)


def test_mc_error_scales_with_sqrt_spp(cam):
    light = _order2_light()
    surf = oracle.intersect(oracle.AnalyticSphere(), cam)
    ana = oracle.analytic_radiance(surf, LAMBERT_WHITE, light)
    errs = [np.sqrt(np.mean((oracle.mc_radiance(surf, LAMBERT_WHITE, light, s, seed=2) - ana) ** 2))
            for s in (32, 128)]
    assert 1.5 < errs[0] / errs[1] < 2.6


def test_phong_peak_along_lobe_and_spp_agreement():
    light = oracle.spherical_gaussian_light([((0.0, 0.3, 1.0), 40.0, (1.0, 1.0, 1.0))], (0.05, 0.05, 0.05), order=10)
    axis = np.array([0.0, 0.3, 1.0]) / np.linalg.norm([0.0, 0.3, 1.0])
    mat = oracle.AnalyticMaterial("phong", (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 30.0)
    cam = Camera.look_at("p", 3.0 * axis, [0, 0, 0], [0, 1, 0], 40.0, 8, 8)
    surf = oracle.intersect(oracle.AnalyticSphere(), cam)
    lo = oracle.mc_radiance(surf, mat, light, spp=4096, seed=1)
    hi = oracle.mc_radiance(surf, mat, light, spp=16384, seed=2)
    r = oracle.mirror(surf.normal, surf.view_dir)
    peak = np.argmax(r @ axis)
    assert np.argmax(hi[:, 0]) in np.argsort(-(r @ axis))[:4]
    assert abs(lo[peak, 0] - hi[peak, 0]) / hi[peak, 0] < 0.02
    assert abs(hi.mean() - lo.mean()) / hi.mean() < 0.02


def test_phong_mc_matches_analytic(cam):
    light = oracle.preset_light("warm_key")
    mat = oracle.AnalyticMaterial("phong", (0.5, 0.4, 0.3), (0.3, 0.3, 0.3), 8.0)
    surf = oracle.intersect(oracle.AnalyticSphere(), cam)
    ana = oracle.analytic_radiance(surf, mat, light)
    mc = oracle.mc_radiance(surf, mat, light, spp=2048, seed=4)
    assert np.mean(np.abs(mc - ana) / ana) < 0.01


def test_mc_deterministic(cam):
    light = _order2_light()
    surf = oracle.intersect(oracle.AnalyticSphere(), cam)
    a = oracle.mc_radiance(surf, LAMBERT_WHITE, light, spp=16, seed=7, view_index=2)
    b = oracle.mc_radiance(surf, LAMBERT_WHITE, light, spp=16, seed=7, view_index=2)
    c = oracle.mc_radiance(surf, LAMBERT_WHITE, light, spp=16, seed=7, view_index=3)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_mesh_and_sphere_targets_agree(cam):
    mesh = uv_sphere(1.0, 96, 48)
    light = _order2_light()
    s = oracle.render_reference(oracle.AnalyticSphere(), cam, LAMBERT_WHITE, light)
    m = oracle.render_reference(mesh, cam, LAMBERT_WHITE, light)
    both = s.mask & m.mask
    assert both.sum() > 0.9 * s.mask.sum()
    assert np.mean(np.abs(s.image[both] - m.image[both]) / s.image[both]) < 0.01


def test_occlusion_darkens_concave_mesh():
    # two stacked quads block vertical rays and let horizontal ones through
    from prt_relight.geometry import Mesh
    v = np.array([[-1, 0, -1], [1, 0, -1], [1, 0, 1], [-1, 0, 1],
                  [-3, 0.5, -3], [3, 0.5, -3], [3, 0.5, 3], [-3, 0.5, 3]], float)
    f = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7]])
    mesh = Mesh(v, f, np.zeros((8, 2)), np.tile([0.0, 1.0, 0.0], (8, 1)))
    origins = np.array([[0.0, 0.25, 0.0]])
    assert oracle._occluded(origins, np.array([[0.0, 1.0, 0.0]]), mesh)[0]
    assert oracle._occluded(origins, np.array([[0.0, -1.0, 0.0]]), mesh)[0]
    assert not oracle._occluded(origins, np.array([[1.0, 0.0, 0.0]]), mesh)[0]


def test_analytic_rejects_panorama(cam):
    env = oracle.sh_panorama(_order2_light(), height=16)
    surf = oracle.intersect(oracle.AnalyticSphere(), cam)
    with pytest.raises(TypeError):
        oracle.analytic_radiance(surf, LAMBERT_WHITE, env)
    img = oracle.render_reference(oracle.AnalyticSphere(), cam, LAMBERT_WHITE, env, spp=8)
    assert np.all(np.isfinite(img.image))


@pytest.mark.parametrize("kw", [dict(kind="glass"), dict(diffuse_albedo=(1.2, 0, 0)),
                                dict(phong_exponent=0.5), dict(texture_amplitude=1.0)])
def test_material_validation(kw):
    with pytest.raises(ValueError):
        oracle.AnalyticMaterial(**kw)


def test_presets_positive():
    dirs = np.random.default_rng(0).normal(size=(5000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    for name in oracle.PRESET_LIGHTS:
        sh = oracle.preset_light(name)
        assert sh.order == 10
        assert np.min(eval_sh_basis(dirs, 10) @ sh.coeffs) > 0
    with pytest.raises(KeyError):
        oracle.preset_light("nope")


def test_generate_scene_deterministic_and_valid(tmp_path):
    mat = oracle.AnalyticMaterial("phong", (0.6, 0.5, 0.4), (0.2, 0.2, 0.2), 10.0, 0.2)
    la, lb = oracle.preset_light("warm_key"), oracle.preset_light("cool_side")
    a1, b1, truth = oracle.generate_scene("sphere", mat, la, lb, 6, 16, seed=2, test_count=2, out_dir=tmp_path)
    a2, _, _ = oracle.generate_scene("sphere", mat, la, lb, 6, 16, seed=2, test_count=2)
    assert a1.train == a2.train and a1.test == a2.test and len(a1.test) == 2
    for vid in a1.view_ids:
        assert a1.view(vid).pixels.tobytes() == a2.view(vid).pixels.tobytes()
        assert a1.view(vid).mask.tobytes() == b1.view(vid).mask.tobytes()
    for sub in ("illum_a", "illum_b"):
        back = load_scene(tmp_path / sub)
        assert back.train == a1.train and back.test == a1.test
    for name in ("light_a.sh", "light_b.sh", "truth.json"):
        assert (tmp_path / name).is_file()
    assert truth.to_json()["shape"] == "sphere"


def test_generate_scene_argument_errors():
    mat = oracle.AnalyticMaterial()
    light = oracle.preset_light("warm_key")
    with pytest.raises(ValueError):
        oracle.generate_scene("sphere", mat, light, light, view_count=3, test_count=3)
    with pytest.raises(ValueError):
        oracle.generate_scene("teapot", mat, light, light, view_count=3, test_count=1)


def test_black_background_option():
    mat = oracle.AnalyticMaterial()
    light = oracle.preset_light("warm_key")
    da, _, _ = oracle.generate_scene("sphere", mat, light, light, 3, 16, test_count=1, background="black")
    v = da.view(da.view_ids[0])
    assert np.all(v.pixels[~v.mask] == 0) and np.all(v.pixels[v.mask] > 0)
    with pytest.raises(ValueError):
        oracle.generate_scene("sphere", mat, light, light, 3, 16, test_count=1, background="grey")


def test_panorama_lights_need_mc_and_record_sh():
    mat = oracle.AnalyticMaterial()
    sh = oracle.preset_light("cool_side")
    pano = oracle.sh_panorama(sh, 64)
    with pytest.raises(ValueError, match="spp"):
        oracle.generate_scene("sphere", mat, pano, pano, 3, 8, test_count=1)
    da, _, truth = oracle.generate_scene("sphere", mat, pano, sh, 3, 12, test_count=1, spp=64)
    assert truth.light_a.order == 10
    rel = np.linalg.norm(truth.light_a.coeffs - sh.coeffs) / np.linalg.norm(sh.coeffs)
    assert rel < 0.02
    v = da.view(da.view_ids[0])
    np.testing.assert_allclose(v.pixels[~v.mask], pano.lookup(da.cameras[v.camera_id].pixel_rays()[~v.mask]))
