"""Command-line entry point.

Exit codes: 0 success, 1 usage or parameter error, 2 data or I/O error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, imio
from .baseline import woodham_robust
from .core import Camera, Light
from .errors import DataError, GSPSError, ParameterError
from .ingest import (SHAPES, SYNTH_FRAME, SYNTH_CAMERA_Z, ImageStack, default_lights, load_diligent,
                     save_diligent, surfels_from_geometry, synth_scene)
from .metrics import (angular_error_map, decode_normal_png, encode_normal_png, error_colormap, error_stats,
                      write_metrics)
from .optimizer import OptimConfig, load_checkpoint, normal_map, reconstruct
from .rasterizer import render

log = logging.getLogger("gsps")

CONFIG_HELP = """\
--config FILE reads flat "key = value" lines ('#' starts a comment). Keys are
long option names with dashes or underscores (e.g. "lr_center = 1e-4" or
"iters = 3000"). Precedence: command-line flags > config file > defaults."""


class UsageError(ParameterError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value file (see top-level help)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads (default: all cores)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_optim(p: argparse.ArgumentParser) -> None:
    d = OptimConfig()
    p.add_argument("--iters", type=int, default=d.iterations)
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam, help="normal-consistency weight")
    p.add_argument("--lr-center", type=float, default=d.lr_center)
    p.add_argument("--lr-tangent", type=float, default=d.lr_tangent)
    p.add_argument("--lr-scale", type=float, default=d.lr_scale, help="step on log(scale)")
    p.add_argument("--lr-opacity", type=float, default=d.lr_opacity)
    p.add_argument("--lr-albedo", type=float, default=d.lr_albedo)
    p.add_argument("--densify-interval", type=int, default=d.densify_interval)
    p.add_argument("--densify-start", type=int, default=None, help="default: min(500, densify-stop)")
    p.add_argument("--densify-stop", type=int, default=None, help="default: iters / 2")
    p.add_argument("--grad-threshold", type=float, default=d.grad_threshold)
    p.add_argument("--prune-opacity", type=float, default=d.prune_opacity)
    p.add_argument("--prune-scale", type=float, default=None, help="default: 10 pixel pitches")
    p.add_argument("--tile-size", type=int, default=d.tile_size)
    p.add_argument("--checkpoint-every", type=int, default=d.checkpoint_every)


def build_parser() -> Parser:
    parser = Parser(prog="gsps", description="Photometric stereo with surfel splatting.", epilog=CONFIG_HELP,
                    formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"gsps {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset in the DiliGenT layout")
    p.add_argument("--shape", choices=SHAPES, default="sphere")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--lights", type=int, default=8, help="number of generated lights")
    g.add_argument("--light-file", type=Path, help="text file, one light direction (x y z) per row")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--albedo", type=float, nargs="+", default=[1.0], help="scalar or r g b")
    p.add_argument("--bits", type=int, choices=(8, 16), default=16)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)

    p = sub.add_parser("reconstruct", help="fit surfels to a dataset and write normal/depth/albedo maps")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_optim(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="default: OUT/checkpoint.npz")
    p.add_argument("--resume", type=Path, default=None)
    p.add_argument("--srgb", action="store_true", help="decode images as sRGB")
    _add_common(p)

    p = sub.add_parser("baseline", help="least-squares photometric stereo")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--trim", type=float, default=0.0, help="fraction discarded at each end per pixel")
    p.add_argument("--srgb", action="store_true")
    _add_common(p)

    p = sub.add_parser("eval", help="compare two normal-map PNGs")
    p.add_argument("--est", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--mask", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--max-degrees", type=float, default=30.0)
    _add_common(p)

    p = sub.add_parser("shadow", help="cast-shadow mask by shadow mapping")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path)
    src.add_argument("--scene", type=Path, help="checkpoint written by reconstruct")
    p.add_argument("--lights-from", type=Path, default=None, help="dataset supplying lights for --scene")
    p.add_argument("--light-index", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--bias", type=float, default=None, help="default: 1.5 pixel pitches")
    p.add_argument("--light-resolution", type=int, default=None, help="default: 2x camera resolution")
    p.add_argument("--debug-panels", action="store_true", help="write the four intermediate depth maps")
    p.add_argument("--iters", type=int, default=OptimConfig().iterations,
                   help="reconstruction iterations when --data has no analytic geometry")
    _add_common(p)
    return parser


def read_config(path: Path) -> dict[str, str]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    aliases = {"lambda": "lam"}
    defaults = {}
    for key, raw in read_config(args.config).items():
        dest = aliases.get(key, key)
        if dest not in actions or dest in ("config", "help"):
            raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
        a = actions[dest]
        if isinstance(a, argparse._StoreTrueAction):
            defaults[dest] = raw.lower() in ("1", "true", "yes", "on")
        elif a.nargs in ("+", "*"):
            defaults[dest] = [a.type(x) for x in raw.split()]
        else:
            try:
                defaults[dest] = a.type(raw) if a.type else raw
            except ValueError as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {raw}") from exc
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_run(out: Path, args: argparse.Namespace, **resolved) -> None:
    payload = {"version": __version__, "command": args.command,
               "args": _jsonable({k: v for k, v in vars(args).items() if k != "verbose"})}
    payload.update(_jsonable(resolved))
    write_metrics(out / "run.json", payload)


def _camera_for(stack: ImageStack) -> Camera:
    synth = stack.meta.get("synth", stack.meta)
    if "camera" in synth:
        return Camera.from_dict(synth["camera"])
    H, W = stack.mask.shape
    return Camera.orthographic(W, H, SYNTH_FRAME / max(H, W), position=(0.0, 0.0, SYNTH_CAMERA_Z))


def _write_normals(out: Path, normals: np.ndarray, mask: np.ndarray) -> None:
    encode_normal_png(out / "normal.png", normals, mask, bits=8)
    encode_normal_png(out / "normal16.png", normals, mask, bits=16)


def _write_albedo(out: Path, albedo: np.ndarray, mask: np.ndarray) -> None:
    if albedo.ndim == 2:
        albedo = albedo[..., None]
    top = max(float(albedo[mask].max()) if mask.any() else 0.0, 1e-12)
    imio.write_png(out / "albedo.png", np.where(mask[..., None], albedo / top, 0.0), bits=8)


def _evaluate(out: Path, normals: np.ndarray, stack: ImageStack, extra: dict) -> dict:
    payload = dict(extra)
    if stack.gt_normals is not None:
        err = angular_error_map(normals, stack.gt_normals, stack.mask)
        imio.write_pfm(out / "error.pfm", np.nan_to_num(err, nan=0.0))
        imio.write_png(out / "error.png", error_colormap(err))
        payload.update(error_stats(err, stack.mask))
    write_metrics(out / "metrics.json", payload)
    return payload


def _optim_config(args) -> OptimConfig:
    return OptimConfig(iterations=args.iters, lr_center=args.lr_center, lr_tangent=args.lr_tangent,
                       lr_scale=args.lr_scale, lr_opacity=args.lr_opacity, lr_albedo=args.lr_albedo, lam=args.lam,
                       densify_interval=args.densify_interval, densify_start=args.densify_start,
                       densify_stop=args.densify_stop, grad_threshold=args.grad_threshold,
                       prune_opacity=args.prune_opacity, prune_scale=args.prune_scale, seed=args.seed,
                       tile_size=args.tile_size, threads=args.threads, checkpoint_every=args.checkpoint_every)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    if args.light_file is not None:
        try:
            dirs = np.atleast_2d(np.loadtxt(args.light_file, dtype=np.float64))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read light file {args.light_file}: {exc}") from exc
        if dirs.shape[1] != 3:
            raise DataError(f"{args.light_file}: expected 3 columns")
        lights = [Light.from_vector(v) for v in dirs]
    else:
        if args.lights < 1:
            raise UsageError("--lights must be at least 1")
        lights = default_lights(args.lights)
    albedo = args.albedo[0] if len(args.albedo) == 1 else args.albedo
    if len(args.albedo) not in (1, 3):
        raise UsageError("--albedo takes one or three values")
    stack = synth_scene(args.shape, lights, args.resolution, albedo)
    save_diligent(stack, args.out, bits=args.bits)
    write_run(args.out, args, lights=stack.light_matrix().tolist())
    log.info("wrote %d images to %s", len(stack), args.out)
    return 0


def cmd_reconstruct(args) -> int:
    stack = load_diligent(args.data, srgb=args.srgb)
    camera = _camera_for(stack)
    cfg = _optim_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = args.checkpoint if args.checkpoint is not None else args.out / "checkpoint.npz"
    write_run(args.out, args, config=cfg.to_dict(), camera=camera.to_dict(), checkpoint=ckpt)
    scene, buffers, history = reconstruct(stack, camera, cfg, checkpoint=ckpt, resume=args.resume,
                                          log_path=args.out / "train_log.jsonl")
    normals = np.where(stack.mask[..., None], normal_map(buffers, camera), 0.0)
    _write_normals(args.out, normals, stack.mask)
    imio.write_pfm(args.out / "depth.pfm", buffers.depth)
    _write_albedo(args.out, buffers.albedo, stack.mask)
    final = history[-1] if history else None
    payload = _evaluate(args.out, normals, stack, {"gaussians": len(scene), "iterations": cfg.iterations,
                                                  "final_loss": final})
    if "mean_angular_error" in payload:
        log.info("mean angular error %.3f deg", payload["mean_angular_error"])
    return 0


def cmd_baseline(args) -> int:
    stack = load_diligent(args.data, srgb=args.srgb)
    normals, albedo = woodham_robust(stack, args.trim)
    args.out.mkdir(parents=True, exist_ok=True)
    write_run(args.out, args)
    _write_normals(args.out, normals, stack.mask)
    _write_albedo(args.out, albedo, stack.mask)
    payload = _evaluate(args.out, normals, stack, {"method": "woodham", "trim": args.trim})
    if "mean_angular_error" in payload:
        log.info("mean angular error %.6f deg", payload["mean_angular_error"])
    return 0


def cmd_eval(args) -> int:
    est = decode_normal_png(args.est)
    gt = decode_normal_png(args.gt)
    if est.shape != gt.shape:
        raise DataError(f"resolution mismatch: {args.est} is {est.shape[1]}x{est.shape[0]}, "
                        f"{args.gt} is {gt.shape[1]}x{gt.shape[0]}")
    notes = []
    if args.mask is not None:
        m = imio.read_png(args.mask)
        mask = m.reshape(m.shape[:2] + (-1,)).max(axis=-1) > 0
        if mask.shape != gt.shape[:2]:
            raise DataError(f"resolution mismatch: mask {args.mask} differs from {args.gt}")
    else:
        mask = np.linalg.norm(gt, axis=-1) > 0
        notes.append("no mask given; evaluated on pixels with a valid ground-truth normal")
    args.out.mkdir(parents=True, exist_ok=True)
    write_run(args.out, args)
    err = angular_error_map(est, gt, mask)
    imio.write_pfm(args.out / "error.pfm", np.nan_to_num(err, nan=0.0))
    imio.write_png(args.out / "error.png", error_colormap(err, args.max_degrees))
    payload = error_stats(err, mask)
    if notes:
        payload["notes"] = notes
    write_metrics(args.out / "metrics.json", payload)
    log.info("mean angular error %.3f deg", payload["mean_angular_error"])
    return 0


def cmd_shadow(args) -> int:
    from .shadow import iou, shadow_map

    if args.data is not None:
        stack = load_diligent(args.data)
    elif args.lights_from is not None:
        stack = load_diligent(args.lights_from)
    else:
        stack = None
    if args.scene is not None:
        scene = load_checkpoint(args.scene)[0]
        if stack is None:
            raise UsageError("--scene needs --lights-from DATASET to supply light directions")
    synth = stack.meta.get("synth", {})
    if not 0 <= args.light_index < len(stack.lights):
        raise UsageError(f"--light-index {args.light_index} out of range (dataset has {len(stack.lights)} lights)")
    light = stack.lights[args.light_index]
    source = "checkpoint"
    if args.scene is None:
        if synth.get("shape") in SHAPES:
            scene = surfels_from_geometry(synth["shape"], stack.width)
            source = "analytic surfels"
        else:
            scene, _, _ = reconstruct(stack, _camera_for(stack), OptimConfig(iterations=args.iters, seed=args.seed,
                                                                          threads=args.threads))
            source = "reconstruction"
    if scene.camera.resolution != (stack.width, stack.height):
        raise DataError("scene camera resolution differs from the dataset")
    args.out.mkdir(parents=True, exist_ok=True)
    write_run(args.out, args, light=light.direction.tolist(), scene_source=source)
    buffers = render(scene, threads=args.threads)
    res = shadow_map(scene, light, buffers, args.bias, light_resolution=args.light_resolution,
                     threads=args.threads)
    imio.write_png(args.out / "shadow_mask.png", res.mask.astype(np.uint8) * 255)
    payload = {"light_index": args.light_index, "shadow_pixels": int(res.mask.sum()), "scene_source": source}
    oracle = Path(stack.meta["source"]) / f"shadow_{args.light_index + 1:03d}.png"
    if oracle.is_file() and stack.gt_normals is not None:
        truth = imio.read_png(oracle).reshape(res.mask.shape + (-1,)).max(axis=-1) > 0.5
        lit = stack.mask & (stack.gt_normals @ light.direction > 0)
        payload["iou"] = iou(res.mask, truth, lit)
        payload["oracle_pixels"] = int((truth & lit).sum())
    write_metrics(args.out / "metrics.json", payload)
    if args.debug_panels:
        for name in ("camera_depth", "camera_in_light", "light_depth", "light_in_camera"):
            imio.write_pfm(args.out / f"{name}.pfm", getattr(res, name))
    return 0


COMMANDS = {"synth": cmd_synth, "reconstruct": cmd_reconstruct, "baseline": cmd_baseline, "eval": cmd_eval,
            "shadow": cmd_shadow}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = parse_args(argv)
        logging.getLogger().setLevel(logging.DEBUG if args.verbose else logging.INFO)
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args)
    except GSPSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except json.JSONDecodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
