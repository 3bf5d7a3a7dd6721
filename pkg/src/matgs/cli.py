"""Command-line entry points: render, fit, relight, eval, synth, decode-toy."""
from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import io as aio
from .core import Camera, ValidationError, validate_scene
from .objectives import LossConfig, ViewTarget, psnr, ssim

DEFAULT_SIZE = 512
GBUFFER_CHANNELS = ("albedo", "roughness", "metallic", "depth", "normal", "alpha")
MATERIAL = ("albedo", "roughness", "metallic")
GEOMETRY = ("depth", "normal", "alpha")
MIN_GEOMETRY_VIEWS = 4


class CommandError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _versions() -> dict:
    import numba
    import scipy
    out = {"matgs": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__, "numba": numba.__version__}
    if "torch" in sys.modules:
        out["torch"] = sys.modules["torch"].__version__
    return out


def _digest(path: Path) -> str:
    if path.is_dir():
        h = hashlib.sha256()
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
        return h.hexdigest()
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, args: argparse.Namespace, inputs: dict, extra: Optional[dict] = None) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    doc = {"command": args.command, "argv": sys.argv[1:], "config": config, "seed": getattr(args, "seed", None),
           "inputs": {k: {"path": str(p), "sha256": _digest(Path(p))} for k, p in inputs.items()},
           "versions": _versions()}
    if extra:
        doc.update(extra)
    aio.write_json(out_dir / "manifest.json", doc)


def _configure_threads(args) -> None:
    import numba
    n = 1 if args.deterministic else args.threads
    if n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
        if "torch" in sys.modules:
            sys.modules["torch"].set_num_threads(max(1, int(n)))


def _readable(path: Path, what: str) -> Path:
    if not path.exists():
        raise CommandError(f"{what} not found: {path}")
    return path


def _save_gbuffer(out: Path, name: str, gb) -> list[str]:
    from .shading import tonemap
    files = []
    for ch in GBUFFER_CHANNELS:
        img = np.asarray(getattr(gb, ch))
        if ch == "normal":
            n = np.linalg.norm(img, axis=-1, keepdims=True)
            cover = np.asarray(gb.alpha).reshape(n.shape) > 1e-4
            img = np.where(cover & (n > 0), img / np.where(n > 0, n, 1), 0.0)
        aio.write_floatmap(out / f"{name}_{ch}.pfm", img)
        files.append(f"{name}_{ch}.pfm")
    aio.write_png(out / f"{name}_albedo.png", tonemap(np.asarray(gb.albedo)))
    files.append(f"{name}_albedo.png")
    return files


def load_supervision(images: Path, cameras: Sequence[tuple[str, Camera]], require_geometry: bool = True):
    """Gather per-view material (and, where present, geometry) maps named <view>_<channel>.pfm."""
    views, missing, geo_missing = [], [], []
    for name, cam in cameras:
        maps = {}
        for ch in MATERIAL + GEOMETRY:
            p = images / f"{name}_{ch}.pfm"
            if p.exists():
                img = aio.read_floatmap(p).astype(np.float64)
                maps[ch] = img if img.ndim == 3 else img[..., None]
            elif ch in MATERIAL:
                missing.append(f"{name}:{ch}")
        have_geo = [ch for ch in GEOMETRY if ch in maps]
        if 0 < len(have_geo) < len(GEOMETRY):
            geo_missing.append(f"{name}:" + "+".join(ch for ch in GEOMETRY if ch not in maps))
        for ch, img in maps.items():
            if img.shape[:2] != (cam.height, cam.width):
                raise CommandError(f"{name}_{ch}.pfm is {img.shape[1]}x{img.shape[0]}, camera is "
                                   f"{cam.width}x{cam.height}")
        geo = len(have_geo) == len(GEOMETRY)
        views.append(ViewTarget(cam, maps.get("albedo"), maps.get("roughness"), maps.get("metallic"),
                                maps.get("depth") if geo else None, maps.get("normal") if geo else None,
                                maps.get("alpha") if geo else None, name))
    if missing:
        raise CommandError("missing channels: " + ", ".join(missing))
    if geo_missing:
        raise CommandError("incomplete geometry maps: " + ", ".join(geo_missing))
    n_geo = sum(v.has_geometry for v in views)
    if require_geometry and n_geo < MIN_GEOMETRY_VIEWS:
        lacking = [v.name for v in views if not v.has_geometry]
        raise CommandError(f"need depth/normal/alpha for at least {MIN_GEOMETRY_VIEWS} views, found {n_geo}; "
                           f"missing for: {', '.join(lacking)}")
    return views


# --------------------------------------------------------------- commands

def cmd_render(args) -> None:
    from .rasterizer import render
    scene = aio.read_scene(_readable(args.scene, "scene"))
    cams = aio.read_cameras_named(_readable(args.cameras, "cameras"))
    out = aio.ensure_dir(args.out)
    files = []
    for name, cam in cams:
        files += _save_gbuffer(out, name, render(scene, cam.with_size(args.size, args.size)))
    _write_manifest(out, args, {"scene": args.scene, "cameras": args.cameras}, {"outputs": files})


def cmd_fit(args) -> None:
    from .fitter import FitConfig, fit
    cams = aio.read_cameras_named(_readable(args.cameras, "cameras"))
    views = load_supervision(_readable(args.images, "images directory"), cams)
    holdout = []
    if args.holdout_cameras:
        hc = aio.read_cameras_named(_readable(args.holdout_cameras, "holdout cameras"))
        holdout = load_supervision(args.holdout_images or args.images, hc, require_geometry=False)
    it1 = args.iterations // 2
    cfg = FitConfig(n_gaussians=args.n_gaussians, iterations_stage1=it1, iterations_stage2=args.iterations - it1,
                    seed=args.seed, stages=args.stages,
                    loss=LossConfig(gamma_d=args.gamma_d, gamma_n=args.gamma_n))
    result = fit(views, cfg, holdout=holdout)
    args.out_scene.parent.mkdir(parents=True, exist_ok=True)
    aio.write_scene(result.scene, args.out_scene)
    trace = args.trace or args.out_scene.with_suffix(".trace.csv")
    result.write_trace(trace)
    report = {"stages": [asdict(s) for s in result.stages]}
    aio.write_json(args.out_scene.with_suffix(".psnr.json"), report)
    inputs = {"images": args.images, "cameras": args.cameras}
    if args.holdout_cameras:
        inputs["holdout_cameras"] = args.holdout_cameras
    _write_manifest(args.out_scene.parent, args, inputs,
                    {"fit_config": {**asdict(cfg), "loss": asdict(cfg.loss)}, "report": report})
    for s in result.stages:
        if s.psnr:
            print(f"stage {s.stage}: " + " ".join(f"{k}={v:.2f}dB" for k, v in s.psnr.items()))


def cmd_relight(args) -> None:
    from .rasterizer import render
    from .shading import BRDFConfig, EnvironmentMap, relight
    scene = aio.read_scene(_readable(args.scene, "scene"))
    cams = aio.read_cameras_named(_readable(args.cameras, "cameras"))
    env_img = aio.read_floatmap(_readable(args.env, "environment map"))
    if env_img.ndim != 3:
        raise CommandError("environment map must have 3 channels")
    env = EnvironmentMap(env_img.astype(np.float64))
    if args.view is not None:
        if not 0 <= args.view < len(cams):
            raise CommandError(f"--view {args.view} out of range for {len(cams)} cameras")
        cams = [cams[args.view]]
    out = aio.ensure_dir(args.out)
    cfg = BRDFConfig(diffuse_only=args.diffuse_only)
    files = []
    for name, cam in cams:
        cam = cam.with_size(args.size, args.size)
        res = relight(render(scene, cam), cam, env, cfg, env_res=args.env_res)
        aio.write_floatmap(out / f"{name}_relit.pfm", res.linear)
        aio.write_png(out / f"{name}_relit.png", res.display)
        files += [f"{name}_relit.pfm", f"{name}_relit.png"]
    _write_manifest(out, args, {"scene": args.scene, "cameras": args.cameras, "env": args.env},
                    {"outputs": files})


def evaluate_dirs(pred: Path, gt: Path) -> list[dict]:
    p_files = sorted(f.name for f in pred.glob("*.pfm"))
    g_files = sorted(f.name for f in gt.glob("*.pfm"))
    if not g_files:
        raise CommandError(f"no float maps in {gt}")
    if len(p_files) != len(g_files):
        raise CommandError(f"file count mismatch: {len(p_files)} predicted vs {len(g_files)} ground truth")
    missing = sorted(set(g_files) - set(p_files))
    if missing:
        raise CommandError("missing predictions for: " + ", ".join(missing))
    rows = []
    for name in g_files:
        a = aio.read_floatmap(pred / name).astype(np.float64)
        b = aio.read_floatmap(gt / name).astype(np.float64)
        if a.shape != b.shape:
            raise CommandError(f"{name}: shape {a.shape} vs {b.shape}")
        rows.append({"image": name, "psnr": psnr(a, b), "ssim": ssim(a, b)})
    return rows


def _fmt(x: float) -> str:
    return "inf" if np.isinf(x) else f"{x:.4f}"


def cmd_eval(args) -> None:
    rows = evaluate_dirs(_readable(args.pred, "prediction directory"), _readable(args.gt, "ground-truth directory"))
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_ssim = float(np.mean([r["ssim"] for r in rows]))
    lines = ["image,psnr,ssim"] + [f"{r['image']},{_fmt(r['psnr'])},{_fmt(r['ssim'])}" for r in rows]
    lines.append(f"mean,{_fmt(mean_psnr)},{_fmt(mean_ssim)}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)


def cmd_synth(args) -> None:
    from .rasterizer import render
    from .synth import synth_cameras, synthetic_scene
    out = aio.ensure_dir(args.out)
    scene = synthetic_scene(args.seed)
    aio.write_scene(scene, out / "scene.json")
    sup, hold = synth_cameras(args.size)
    aio.write_cameras([c for _, c in sup], out / "cameras.json", [n for n, _ in sup])
    aio.write_cameras([c for _, c in hold], out / "holdout_cameras.json", [n for n, _ in hold])
    for sub, cams in (("images", sup), ("holdout", hold)):
        d = aio.ensure_dir(out / sub)
        for name, cam in cams:
            gb = render(scene, cam)
            channels = MATERIAL + GEOMETRY if name.startswith("input") else MATERIAL
            for ch in channels:
                aio.write_floatmap(d / f"{name}_{ch}.pfm", np.asarray(getattr(gb, ch)))
    _write_manifest(out, args, {})


def cmd_decode_toy(args) -> None:
    import torch
    from .decoder import DecoderConfig, DecoderToy, ring_cameras, save_weights, voxel_centers
    from .rasterizer import render
    from .synth import synthetic_scene
    _configure_threads(args)
    cfg = DecoderConfig(seed=args.seed)
    cams = ring_cameras(cfg.image_size)
    gt = synthetic_scene(args.seed)
    images = [np.asarray(render(gt, c).albedo) for c in cams]
    model = DecoderToy(cfg)
    if args.zero_residuals:
        model.zero_residuals()
    out = model(images, cams)
    violations = validate_scene(out.fine)
    centers = np.repeat(voxel_centers(out.gaussian_volume.shape[0]).reshape(-1, 3), cfg.primitives_per_voxel, 0)
    max_offset = float(np.max(np.linalg.norm(out.coarse.positions - centers, axis=1)))
    report = {"shapes": out.shapes(), "primitives_per_voxel": cfg.primitives_per_voxel,
              "max_offset": max_offset, "offset_bound": cfg.offset_radius, "violations": len(violations),
              "torch": torch.__version__}
    print(json.dumps(report))
    if args.out:
        d = aio.ensure_dir(args.out)
        aio.write_json(d / "report.json", report)
        if args.save_weights:
            save_weights(model, d / "weights.bin")
        _write_manifest(d, args, {}, {"decoder_config": asdict(cfg)})
    if violations:
        raise CommandError(f"decoded scene violates invariants: {violations[0]}")


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matgs", description=__doc__, allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=0, help="worker threads (0 = all cores)")
        sp.add_argument("--deterministic", action="store_true", help="single-threaded reductions")
        return sp

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, allow_abbrev=False)
        sp.set_defaults(func=func)
        return sp

    r = common(add("render", cmd_render, "render G-buffers for every camera"), seed=False)
    r.add_argument("--scene", type=Path, required=True)
    r.add_argument("--cameras", type=Path, required=True)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--size", type=int, default=DEFAULT_SIZE)

    f = common(add("fit", cmd_fit, "fit surfels to multiview supervision"))
    f.add_argument("--images", type=Path, required=True)
    f.add_argument("--cameras", type=Path, required=True)
    f.add_argument("--out-scene", type=Path, required=True)
    f.add_argument("--trace", type=Path)
    f.add_argument("--holdout-cameras", type=Path)
    f.add_argument("--holdout-images", type=Path)
    f.add_argument("--stages", choices=("one", "two"), default="two")
    f.add_argument("--n-gaussians", type=int, default=4096)
    f.add_argument("--iterations", type=int, default=3000)
    from .fitter import FIT_GAMMA_D
    f.add_argument("--gamma-d", type=float, default=FIT_GAMMA_D)
    f.add_argument("--gamma-n", type=float, default=LossConfig().gamma_n)

    rl = common(add("relight", cmd_relight, "relight a scene under an environment map"), seed=False)
    rl.add_argument("--scene", type=Path, required=True)
    rl.add_argument("--cameras", type=Path, required=True)
    rl.add_argument("--env", type=Path, required=True)
    rl.add_argument("--out", type=Path, required=True)
    rl.add_argument("--view", type=int)
    rl.add_argument("--size", type=int, default=DEFAULT_SIZE)
    rl.add_argument("--env-res", type=int, default=128, help="quadrature height in texels")
    rl.add_argument("--diffuse-only", action="store_true")

    e = common(add("eval", cmd_eval, "PSNR/SSIM between two directories of float maps"), seed=False)
    e.add_argument("--pred", type=Path, required=True)
    e.add_argument("--gt", type=Path, required=True)
    e.add_argument("--out", type=Path)

    s = common(add("synth", cmd_synth, "write the bundled synthetic scene and its renders"))
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--size", type=int, default=DEFAULT_SIZE)

    d = common(add("decode-toy", cmd_decode_toy, "run the untrained decoder forward pass"))
    d.add_argument("--out", type=Path)
    d.add_argument("--zero-residuals", action="store_true")
    d.add_argument("--save-weights", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command != "decode-toy":
            _configure_threads(args)
        if getattr(args, "size", 1) <= 0:
            raise CommandError("--size must be positive")
        args.func(args)
    except (CommandError, ValidationError, ValueError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
