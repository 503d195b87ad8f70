import json
import subprocess
import sys

import numpy as np
import pytest

from prt_relight import cli, imageio

SMALL_FIT = {"texture_resolution": 8, "diffuse_order": 2, "specular_order": 4, "env_height": 16,
             "illum_dir_count": 256}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> fit -> render -> relight on a tiny scene, shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    synth_cfg = _write(root / "synth.json", {"kind": "phong", "diffuse_albedo": [0.6, 0.5, 0.4],
                                             "specular_albedo": [0.2, 0.2, 0.2], "phong_exponent": 10,
                                             "view_count": 5, "resolution": 16, "test_count": 1})
    fit_cfg = _write(root / "fit.json", SMALL_FIT)
    results = {}
    results["synth"] = cli.main(["synth", "--out", str(root / "data"), "--config", str(synth_cfg), "--seed", "1"])
    scene = root / "data" / "illum_a"
    results["fit"] = cli.main(["fit", "--scene", str(scene), "--out", str(root / "run"), "--config", str(fit_cfg),
                               "--iters", "4", "--threads", "1"])
    ckpt = root / "run" / "checkpoint_final.bin"
    results["render"] = cli.main(["render", "--scene", str(scene), "--out", str(root / "render"),
                                  "--config", str(fit_cfg), "--checkpoint", str(ckpt)])
    results["relight"] = cli.main(["relight", "--scene", str(root / "data" / "illum_b"),
                                   "--out", str(root / "relight"), "--config", str(fit_cfg),
                                   "--checkpoint", str(ckpt), "--sh", str(root / "data" / "light_b.sh")])
    return root, results


def test_pipeline_commands_succeed(pipeline):
    _, results = pipeline
    assert results == {"synth": 0, "fit": 0, "render": 0, "relight": 0}


def test_synth_outputs(pipeline):
    root, _ = pipeline
    for name in ("illum_a", "illum_b", "light_a.sh", "light_b.sh", "truth.json", "config.json"):
        assert (root / "data" / name).exists()
    echoed = json.loads((root / "data" / "config.json").read_text())
    assert echoed["command"] == "synth" and echoed["seed"] == 1 and echoed["view_count"] == 5


def test_fit_outputs(pipeline):
    root, _ = pipeline
    lines = (root / "run" / "loss.csv").read_text().splitlines()
    assert len(lines) == 5
    echoed = json.loads((root / "run" / "config.json").read_text())
    assert echoed["iterations"] == 4 and echoed["texture_resolution"] == 8 and echoed["lr"] == 1e-3


def test_render_writes_every_view(pipeline):
    root, _ = pipeline
    images = sorted(p.stem for p in (root / "render" / "images").glob("*.pfm"))
    assert len(images) == 5
    img = imageio.read_image(root / "render" / "images" / f"{images[0]}.pfm")
    mask = imageio.read_mask(root / "render" / "masks" / f"{images[0]}.png")
    assert img.shape == (16, 16, 3) and mask.any()
    assert np.all(img[~mask] == 0)


def test_relight_differs_from_render(pipeline):
    root, _ = pipeline
    name = next((root / "render" / "images").glob("*.pfm")).name
    a = imageio.read_image(root / "render" / "images" / name)
    b = imageio.read_image(root / "relight" / "images" / name)
    assert not np.allclose(a, b)


def test_metrics_summary(pipeline, capsys):
    root, _ = pipeline
    code, out, _ = run(capsys, "metrics", "--scene", root / "data" / "illum_b", "--pred", root / "relight")
    assert code == 0
    summary = json.loads(out)
    assert set(summary["views"]) and 0 < summary["mean_psnr"] < 99
    assert -1 <= summary["mean_ssim"] <= 1


def test_metrics_identical_images(tmp_path, pipeline, capsys):
    root, _ = pipeline
    scene = root / "data" / "illum_a"
    pred = tmp_path / "pred"
    (pred / "images").mkdir(parents=True)
    from prt_relight.scene import load_scene
    ds = load_scene(scene)
    vid = ds.view_ids[0]
    imageio.write_pfm(pred / "images" / f"{vid}.pfm", ds.view(vid).pixels)
    code, out, _ = run(capsys, "metrics", "--scene", scene, "--pred", pred, "--views", vid)
    assert code == 0
    row = json.loads(out)["views"][vid]
    assert row["psnr"] == 99.0 and row["ssim"] == pytest.approx(1.0, abs=1e-12)


def test_stitch_outputs(pipeline, capsys, tmp_path):
    root, _ = pipeline
    code, out, _ = run(capsys, "stitch", "--scene", root / "data" / "illum_a", "--out", tmp_path,
                       "--config", root / "fit.json")
    assert code == 0
    summary = json.loads(out)
    assert 0 < summary["covered_fraction"] <= 1
    for name in ("env.pfm", "env_coverage.png", "env.sh"):
        assert (tmp_path / name).is_file()


def test_fit_is_idempotent(pipeline, capsys, tmp_path):
    root, _ = pipeline
    code, _, _ = run(capsys, "fit", "--scene", root / "data" / "illum_a", "--out", tmp_path,
                     "--config", root / "fit.json", "--iters", "4", "--threads", "1")
    assert code == 0
    assert (tmp_path / "checkpoint_final.bin").read_bytes() == (root / "run" / "checkpoint_final.bin").read_bytes()


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    assert json.loads(out)["passed"] is True


def test_gradcheck_failure_exit_code(capsys, tmp_path):
    cfg = _write(tmp_path / "g.json", {"tolerance": 1e-30, "count": 10})
    code, _, err = run(capsys, "gradcheck", "--config", cfg)
    assert code == cli.EXIT_GRADCHECK
    assert err.startswith("error: ") and err.count("\n") == 1


def test_missing_scene_is_input_error(capsys, tmp_path):
    code, out, err = run(capsys, "fit", "--scene", tmp_path / "nope", "--out", tmp_path / "o")
    assert code == cli.EXIT_INPUT and out == ""
    assert err.startswith("error: ") and err.count("\n") == 1


def test_corrupt_scene_is_input_error(capsys, tmp_path):
    from pathlib import Path
    corrupt = Path(__file__).parent / "data" / "corrupt_scenes" / "camera_bad_json"
    code, _, err = run(capsys, "fit", "--scene", corrupt, "--out", tmp_path)
    assert code == cli.EXIT_INPUT and err.count("\n") == 1


def test_bad_config_json(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    code, _, err = run(capsys, "gradcheck", "--config", bad)
    assert code == cli.EXIT_INPUT and "not valid JSON" in err


def test_bad_threads(capsys):
    code, _, err = run(capsys, "gradcheck", "--threads", "0")
    assert code == cli.EXIT_INPUT and err.startswith("error: ")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_fit_is_numeric_error(pipeline, capsys, tmp_path):
    root, _ = pipeline
    cfg = _write(tmp_path / "diverge.json", {**SMALL_FIT, "lr": 1e300})
    code, _, err = run(capsys, "fit", "--scene", root / "data" / "illum_a", "--out", tmp_path / "o",
                       "--config", cfg, "--iters", "6")
    assert code == cli.EXIT_NUMERIC
    assert err.startswith("error: numeric") and err.count("\n") == 1


def test_relight_requires_light(pipeline, capsys, tmp_path):
    root, _ = pipeline
    code, _, err = run(capsys, "relight", "--scene", root / "data" / "illum_b", "--out", tmp_path,
                       "--checkpoint", root / "run" / "checkpoint_final.bin")
    assert code == cli.EXIT_INPUT and "--sh or --env" in err


def test_unknown_view_id(pipeline, capsys, tmp_path):
    root, _ = pipeline
    code, _, err = run(capsys, "render", "--scene", root / "data" / "illum_a", "--out", tmp_path,
                       "--checkpoint", root / "run" / "checkpoint_final.bin", "--views", "ghost")
    assert code == cli.EXIT_INPUT and "ghost" in err


def test_console_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "prt_relight.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in cli.COMMANDS:
        assert name in proc.stdout
