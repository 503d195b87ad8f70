"""``prt-relight`` command line: synth, stitch, fit, render, relight, metrics, gradcheck.

Every command prints one JSON summary object on stdout and exits 0, or
prints a single ``error: ...`` line on stderr and exits nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import imageio, oracle
from .envlight import NoBackgroundError, init_illumination, load_environment, save_environment, stitch_environment
from .geometry import MeshError
from .metrics import psnr, ssim
from .optim import FitConfig, GradientCheckError, finite_diff_check, fit, gradcheck_fixture, read_checkpoint
from .raster import cached_rasterize, compute_tangent_frames
from .renderer import build_context, forward
from .sampling import LightSampleSet
from .scene import SceneError, load_scene
from .sh import ShIllumination, ShVector, load_sh, save_sh

log = logging.getLogger("prt_relight")

EXIT_INPUT = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5
EXIT_OTHER = 1


class CliError(Exception):
    code = EXIT_INPUT


def _load_config(args) -> dict:
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file {path} not found")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise CliError(f"config file {path} must hold a flat JSON object")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "iters", None) is not None:
        cfg["iterations"] = args.iters
    return cfg


def _need_dir(path, what: str) -> Path:
    if path is None:
        raise CliError(f"--{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{what} directory {p} not found")
    return p


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} file {p} not found")
    return p


def _out_dir(args) -> Path:
    if not args.out:
        raise CliError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, command: str, cfg: dict) -> None:
    (out / "config.json").write_text(json.dumps({"command": command, **cfg}, indent=1, default=str))


def _light_arg(spec):
    if isinstance(spec, str) and spec in oracle.PRESET_LIGHTS:
        return oracle.preset_light(spec)
    return load_sh(_need_file(spec, "SH"))


def _illumination_from_args(args) -> ShVector | None:
    if args.sh and args.env:
        raise CliError("give either --sh or --env, not both")
    if args.sh:
        return load_sh(_need_file(args.sh, "SH")).resized(10)
    if args.env:
        env = load_environment(_need_file(args.env, "environment"), srgb=args.srgb)
        return init_illumination(env).initial
    return None


def _view_ids(args, dataset, default) -> list[str]:
    if not args.views:
        return list(default)
    ids = [v for v in args.views.split(",") if v]
    missing = [v for v in ids if v not in dataset.cameras]
    if missing:
        raise CliError(f"unknown view ids: {', '.join(missing)}")
    return ids


# --- commands ----------------------------------------------------------------------


def cmd_synth(args) -> dict:
    cfg = _load_config(args)
    out = _out_dir(args)
    mat_keys = ("kind", "diffuse_albedo", "specular_albedo", "phong_exponent", "texture_amplitude")
    material = oracle.AnalyticMaterial(**{k: cfg[k] for k in mat_keys if k in cfg})
    cfg.setdefault("light_a", "warm_key")
    cfg.setdefault("light_b", "cool_side")
    eff = {"shape": cfg.get("shape", "sphere"), "view_count": int(cfg.get("view_count", 36)),
           "resolution": int(cfg.get("resolution", 128)), "seed": int(cfg.get("seed", 0)),
           "test_count": int(cfg.get("test_count", 4)), "spp": int(cfg.get("spp", 0)),
           "camera_distance": float(cfg.get("camera_distance", oracle.CAMERA_DISTANCE)),
           "camera_fov": float(cfg.get("camera_fov", oracle.CAMERA_FOV)),
           "occlusion": bool(cfg.get("occlusion", False)),
           "light_a": cfg["light_a"], "light_b": cfg["light_b"], **{k: getattr(material, k) for k in mat_keys}}
    ds_a, ds_b, _ = oracle.generate_scene(eff["shape"], material, _light_arg(cfg["light_a"]),
                                          _light_arg(cfg["light_b"]), eff["view_count"], eff["resolution"],
                                          eff["seed"], eff["test_count"], eff["spp"], out_dir=out,
                                          camera_distance=eff["camera_distance"], camera_fov=eff["camera_fov"],
                                          occlusion=eff["occlusion"])
    _echo_config(out, "synth", eff)
    return {"command": "synth", "out": str(out), "views": len(ds_a.views), "train": len(ds_a.train),
            "test": len(ds_a.test), "scenes": [str(out / "illum_a"), str(out / "illum_b")]}


def cmd_stitch(args) -> dict:
    cfg = _load_config(args)
    scene = load_scene(_need_dir(args.scene, "scene"), srgb=args.srgb)
    out = _out_dir(args)
    height = int(cfg.get("env_height", 32))
    ids = _view_ids(args, scene, scene.train or scene.view_ids)
    env = stitch_environment(scene, height, view_ids=ids)
    illum = init_illumination(env)
    save_environment(out / "env.pfm", env)
    save_sh(out / "env.sh", illum.initial)
    _echo_config(out, "stitch", {"env_height": height, "views": ids})
    return {"command": "stitch", "env": str(out / "env.pfm"), "coverage": str(out / "env_coverage.png"),
            "sh": str(out / "env.sh"), "covered_fraction": float(env.coverage.mean())}


def cmd_fit(args) -> dict:
    cfg = _load_config(args)
    scene = load_scene(_need_dir(args.scene, "scene"), srgb=args.srgb)
    init = _illumination_from_args(args)
    out = _out_dir(args)
    config = FitConfig.from_dict(cfg)
    _echo_config(out, "fit", config.to_dict())
    illum = ShIllumination.from_initial(init) if init is not None else None
    res = fit(scene, config, illumination=illum, out_dir=out)
    first, last = res.history[0], res.history[-1]
    return {"command": "fit", "iterations": res.iterations, "initial_loss": first.total,
            "final_loss": last.total, "final": dict(zip(("im", "chr", "illum", "alb", "total"), last.as_row())),
            "checkpoint": str(out / "checkpoint_final.bin"), "loss_csv": str(out / "loss.csv")}


def _render_views(args, command: str, light: ShVector | None) -> dict:
    cfg = _load_config(args)
    scene = load_scene(_need_dir(args.scene, "scene"), srgb=args.srgb)
    if not args.checkpoint:
        raise CliError("--checkpoint is required")
    params = read_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    out = _out_dir(args)
    config = FitConfig.from_dict(cfg)
    ids = _view_ids(args, scene, scene.view_ids)
    coeffs = light if light is not None else params.illumination.current
    tangents = compute_tangent_frames(scene.mesh)
    (out / "images").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    for vid in ids:
        gb = cached_rasterize(scene.mesh, scene.cameras[vid], tangents)
        samples = LightSampleSet.from_gbuffer(gb, config.sampling)
        ctx = build_context(gb, samples, params.field, config.quadrature_weight)
        tape = forward(ctx, params.textures, params.field, coeffs)
        img = np.zeros(gb.mask.shape + (3,))
        img[gb.mask] = tape.radiance
        imageio.write_pfm(out / "images" / f"{vid}.pfm", img)
        imageio.write_mask(out / "masks" / f"{vid}.png", gb.mask)
    _echo_config(out, command, {**config.to_dict(), "views": ids, "checkpoint": args.checkpoint,
                                "sh": args.sh, "env": args.env})
    return {"command": command, "views": ids, "out": str(out / "images")}


def cmd_render(args) -> dict:
    return _render_views(args, "render", None)


def cmd_relight(args) -> dict:
    light = _illumination_from_args(args)
    if light is None:
        raise CliError("relight needs --sh or --env")
    return _render_views(args, "relight", light)


def cmd_metrics(args) -> dict:
    _load_config(args)
    pred = _need_dir(args.pred, "pred")
    scene = load_scene(_need_dir(args.scene, "scene"), srgb=args.srgb)
    ids = _view_ids(args, scene, scene.view_ids)
    rows = {}
    for vid in ids:
        img = imageio.read_image(_need_file(pred / "images" / f"{vid}.pfm", "prediction"))
        mpath = pred / "masks" / f"{vid}.png"
        mask = imageio.read_mask(mpath) if mpath.is_file() else None
        ref = scene.view(vid)
        rows[vid] = {"psnr": psnr(img, ref.pixels, mask, ref.mask), "ssim": ssim(img, ref.pixels, mask, ref.mask)}
    return {"command": "metrics", "views": rows,
            "mean_psnr": float(np.mean([r["psnr"] for r in rows.values()])),
            "mean_ssim": float(np.mean([r["ssim"] for r in rows.values()]))}


def cmd_gradcheck(args) -> dict:
    cfg = _load_config(args)
    eps, tol = float(cfg.get("eps", 1e-4)), float(cfg.get("tolerance", 1e-4))
    objective, params = gradcheck_fixture(seed=int(cfg.get("seed", 0)))
    rep = finite_diff_check(objective, params, eps, tol, int(cfg.get("count", 200)), int(cfg.get("seed", 0)),
                            raise_on_fail=False)
    summary = {"command": "gradcheck", "passed": rep.passed, "max_rel_error": rep.max_rel_error,
               "mean_rel_error": rep.mean_rel_error, "checked": rep.checked, "skipped": rep.skipped,
               "per_block": rep.per_block}
    if not rep.passed:
        worst = ", ".join(f"{n}[{i}] rel={r:.2e}" for n, i, _, _, r in rep.worst[:5])
        print(json.dumps(summary))
        raise GradientCheckError(f"max relative error {rep.max_rel_error:.3e} exceeds {tol:g}: {worst}")
    return summary


COMMANDS = {"synth": cmd_synth, "stitch": cmd_stitch, "fit": cmd_fit, "render": cmd_render,
            "relight": cmd_relight, "metrics": cmd_metrics, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prt-relight", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scene", help="scene directory")
        p.add_argument("--out", help="output directory")
        p.add_argument("--config", help="flat JSON config; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
        p.add_argument("--srgb", action="store_true", help="decode 8-bit inputs from sRGB")
        p.add_argument("--env", help="equirect environment map (PFM/PNG)")
        p.add_argument("--sh", help="SH coefficient file")
        p.add_argument("--views", help="comma-separated camera ids")
        if name == "fit":
            p.add_argument("--iters", type=int)
        if name in ("render", "relight"):
            p.add_argument("--checkpoint", help="checkpoint written by fit")
        if name == "metrics":
            p.add_argument("--pred", help="directory with images/<id>.pfm and masks/<id>.png")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            summary = COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (SceneError, MeshError, NoBackgroundError, FileNotFoundError) as exc:
        print(f"error: input: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_INPUT
    except GradientCheckError as exc:
        print(f"error: gradcheck: {exc}", file=sys.stderr)
        return EXIT_GRADCHECK
    except FloatingPointError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: invalid input: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_INPUT
    print(json.dumps(summary, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
