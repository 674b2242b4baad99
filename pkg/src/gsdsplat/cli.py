"""Command-line entry point: synth, train, eval, ablate, invert-demo."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from ._validation import TrainingAbort, ValidationError
from .training import TrainConfig

log = logging.getLogger("gsdsplat")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ABORT = 3

SCENE_FLAGS = {
    "seed": ("--seed", int),
    "n_gaussians": ("--gaussians", int),
    "resolution": ("--resolution", int),
    "views": ("--views", int),
    "total_views": ("--total-views", int),
    "n_init": ("--n-init", int),
    "out": ("--out", str),
}


def _add_train_flags(p):
    for f in fields(TrainConfig):
        if f.name == "seed":
            continue
        kind = type(f.default) if f.default is not None else int
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)


def _add_scene_flags(p, out_default="runs"):
    for key, (flag, kind) in SCENE_FLAGS.items():
        p.add_argument(flag, dest=key, type=kind, default=out_default if key == "out" else None)
    p.add_argument("--config", type=Path, help="key = value file; flags override it")


def _experiment_dict(args):
    from .io import read_config

    d = read_config(args.config) if getattr(args, "config", None) else {}
    for key in SCENE_FLAGS:
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name != "seed":
            d[f.name] = v
    return d


def cmd_synth(args):
    from .experiment import write_scene
    from .synthetic import make_synthetic_scene

    scene = make_synthetic_scene(args.seed or 0, args.n_gaussians or 200, args.total_views or 16,
                                 args.resolution or 64)
    write_scene(args.out, scene)
    print(f"wrote {scene.n_views} views of a {len(scene.gt_cloud)}-Gaussian scene to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .experiment import run_experiment

    report = run_experiment(_experiment_dict(args))
    print(report["summary"], end="")
    if any(r["status"] == "aborted" for r in report["rows"]):
        for r in report["rows"]:
            if r["status"] == "aborted":
                print(f"aborted: {r['reason']}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def cmd_eval(args):
    from .io import read_cameras, read_cloud, read_config, read_gsdf
    from .metrics import psnr, ssim
    from .rasterizer import render

    cloud = read_cloud(args.cloud)
    scene = Path(args.scene)
    cams = read_cameras(scene / "cameras.txt")
    split = read_config(scene / "split.txt")
    test = [int(v) for v in str(split["test"]).split()]
    rows = []
    for v in test:
        gt = read_gsdf(scene / f"view_{v:03d}_rgb.gsdf").astype(np.float64)
        pred = render(cloud, cams[v]).rgb
        rows.append({"view": v, "psnr": psnr(pred, gt), "ssim": ssim(pred, gt)})
    out = {"views": rows, "psnr": float(np.mean([r["psnr"] for r in rows])),
           "ssim": float(np.mean([r["ssim"] for r in rows]))}
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_ablate(args):
    from .experiment import run_ablation

    d = _experiment_dict(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    report = run_ablation(d, args.grid, seeds, args.workers)
    print(report["summary"], end="")
    return EXIT_ABORT if any(r["status"] == "aborted" for r in report["rows"]) else EXIT_OK


def cmd_invert_demo(args):
    from .diffusion import AnalyticGaussianDenoiser, ddim_invert, make_schedule
    from .io import write_ppm
    from .synthetic import make_synthetic_scene

    scene = make_synthetic_scene(args.seed or 0, args.n_gaussians or 200, 4, args.resolution or 64)
    sched = make_schedule()
    x0 = scene.gt_images[0]
    den = AnalyticGaussianDenoiser(scene.gt_images[1], args.data_var, sched)
    inv = ddim_invert(x0, args.t, args.tau, den, sched, stride=args.stride, return_trajectory=True)
    picks = np.unique(np.linspace(0, len(inv.states) - 1, min(args.frames, len(inv.states))).round().astype(int))
    strip = np.concatenate([np.clip(inv.states[i], 0.0, 1.0) for i in picks], axis=1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "inversion_strip.ppm", strip)
    print(f"timesteps {[inv.timesteps[i] for i in picks]} -> {out / 'inversion_strip.ppm'}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="gsdsplat", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene")
    _add_scene_flags(s, "scene")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one arm on a synthetic scene")
    _add_scene_flags(t)
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a cloud on a scene's held-out views")
    e.add_argument("--cloud", required=True, type=Path)
    e.add_argument("--scene", required=True, type=Path)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid")
    _add_scene_flags(a)
    _add_train_flags(a)
    a.add_argument("--grid", default="guidance", help="guidance, trajectory, methods, or a '+' join")
    a.add_argument("--seeds", default="0")
    a.add_argument("--workers", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("invert-demo", help="image strip of a DDIM inversion trajectory")
    _add_scene_flags(d, "invert_demo")
    d.add_argument("--t", type=int, default=600)
    d.add_argument("--tau", type=int, default=100)
    d.add_argument("--stride", type=int, default=25)
    d.add_argument("--frames", type=int, default=8)
    d.add_argument("--data-var", type=float, default=0.05)
    d.set_defaults(func=cmd_invert_demo)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
