"""Command-line entry point.

Subcommands: decompose, lfmap, synth, train, render, eval, benchmark.
Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags or
missing input files).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .bench import CONFIG_PRESETS, BenchmarkPlan, preset_config, run_benchmark
from .config import TrainConfig
from .image_io import load_image, save_image
from .losses import lf_energy_map
from .metrics import evaluate, metrics_markdown_table, write_metrics_csv
from .renderer import load_checkpoint, rasterize
from .scene import (
    SyntheticSpec,
    generate_synthetic_scene,
    load_scene,
    save_scene,
    select_train_views,
)
from .trainer import train
from .wavelet import dwt2_multi


class UsageError(Exception):
    pass


def _affine_to_unit(plane: np.ndarray) -> tuple[np.ndarray, float, float]:
    vmin, vmax = float(plane.min()), float(plane.max())
    if vmax - vmin < 1e-12:
        return np.full_like(plane, 0.5), vmin, vmax
    return (plane - vmin) / (vmax - vmin), vmin, vmax


def cmd_decompose(args) -> int:
    image = load_image(args.image)
    pyramid = dwt2_multi(image, args.levels)
    os.makedirs(args.out, exist_ok=True)
    sidecar = {"levels": args.levels, "source": os.path.basename(str(args.image)),
               "files": {}}
    for li, sub in enumerate(pyramid.levels, start=1):
        prefix = f"l{li}_" if args.levels > 1 else ""
        for name, plane in sub.bands().items():
            fname = f"{prefix}{name}.png"
            unit, vmin, vmax = _affine_to_unit(plane)
            save_image(unit, os.path.join(args.out, fname))
            sidecar["files"][fname] = {"min": vmin, "max": vmax}
    with open(os.path.join(args.out, "decompose.json"), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(sidecar['files'])} sub-band images to {args.out}")
    return 0


def cmd_lfmap(args) -> int:
    image = load_image(args.image)
    lf = lf_energy_map(image)
    os.makedirs(args.out, exist_ok=True)
    v = lf.values
    heat = np.stack([1.0 - v, np.zeros_like(v), v], axis=-1)  # red = low
    save_image(heat, os.path.join(args.out, "lfmap.png"))
    v.astype("<f4").tofile(os.path.join(args.out, "lfmap.bin"))
    header = {"height": int(v.shape[0]), "width": int(v.shape[1]), "dtype": "f32"}
    with open(os.path.join(args.out, "lfmap.json"), "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"E_LF map {v.shape[0]}x{v.shape[1]} written to {args.out}")
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n_gaussians=args.gaussians, n_views=args.views,
                         image_size=args.size, seed=args.seed,
                         multispectral=args.multispectral)
    cloud, scene = generate_synthetic_scene(spec)
    save_scene(scene, args.out)
    from .renderer import save_checkpoint
    save_checkpoint(cloud, os.path.join(args.out, "gt_cloud.wspl"))
    print(f"synthetic scene: {scene.n_views} views, {cloud.n} gaussians -> {args.out}")
    return 0


def _load_config(args) -> TrainConfig:
    if getattr(args, "config", None):
        if not os.path.isfile(args.config):
            raise FileNotFoundError(f"no such config file: {args.config}")
        with open(args.config) as f:
            config = TrainConfig.from_json_dict(json.load(f))
    elif getattr(args, "preset", None):
        config = preset_config(
            args.preset,
            args.iterations if args.iterations is not None else 3000,
            args.seed if args.seed is not None else 0)
    else:
        config = TrainConfig()
    overrides = {}
    if getattr(args, "iterations", None) is not None:
        overrides["iterations"] = args.iterations
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        config = config.with_overrides(**overrides)
    return config


def _split_scene(scene, args):
    if getattr(args, "n_train", None):
        return select_train_views(scene, args.n_train, args.split_protocol,
                                  args.split_seed)
    return scene


def cmd_train(args) -> int:
    config = _load_config(args)
    scene = load_scene(args.scene, multispectral=config.multispectral)
    scene = _split_scene(scene, args)
    ckpt, rows = train(scene, config, args.out)
    last = rows[-1] if rows else None
    tail = (f", final total {last['total']:.5f}, train psnr "
            f"{last['train_psnr']:.2f} dB" if last else "")
    print(f"checkpoint {ckpt} ({config.iterations} iterations{tail})")
    return 0


def cmd_render(args) -> int:
    if not os.path.isfile(args.checkpoint):
        raise FileNotFoundError(f"no such checkpoint: {args.checkpoint}")
    cloud = load_checkpoint(args.checkpoint)
    scene = load_scene(args.scene)
    k = scene.view_index(args.view)
    out = rasterize(cloud, scene.cameras[k], args.modality,
                    background=args.background)
    save_image(np.clip(out.color, 0.0, 1.0), args.out)
    print(f"rendered view {args.view} ({args.modality}) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    if not os.path.isfile(args.checkpoint):
        raise FileNotFoundError(f"no such checkpoint: {args.checkpoint}")
    scene = load_scene(args.scene, multispectral=args.multispectral)
    scene = _split_scene(scene, args)
    if not scene.test_ids:
        raise UsageError("empty test split; pass --n-train below the view count")
    rows = evaluate(args.checkpoint, scene, label=args.label,
                    seed=args.split_seed, background=args.background)
    if args.format == "markdown":
        text = metrics_markdown_table(rows)
        if args.out:
            with open(args.out, "w") as f:
                f.write(text)
        else:
            print(text, end="")
    else:
        write_metrics_csv(rows, args.out or "metrics.csv")
    for r in rows:
        print(f"{r.scene} [{r.label}] {r.modality}: psnr {r.psnr:.2f} dB, "
              f"ssim {r.ssim:.4f}")
    return 0


def cmd_benchmark(args) -> int:
    plan = BenchmarkPlan(scene_dirs=tuple(args.scenes),
                         configs=tuple(args.configs),
                         seeds=tuple(args.seeds),
                         n_train_views=args.n_train,
                         output_dir=args.out,
                         iterations=args.iterations,
                         workers=args.workers)
    result = run_benchmark(plan)
    n_fail = sum(1 for s in result.statuses.values() if s != "ok")
    print(f"benchmark: {len(result.statuses)} cells, {n_fail} failed")
    print(f"results: {result.csv_path}")
    print(f"table:   {result.markdown_path}")
    for key, status in sorted(result.statuses.items()):
        if status != "ok":
            print(f"  {key}: {status}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="wsplat",
        description="Wavelet-supervised Gaussian splatting toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("decompose", help="dump Haar sub-band images")
    d.add_argument("image")
    d.add_argument("--levels", type=int, choices=(1, 2), default=1)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decompose)

    lf = sub.add_parser("lfmap", help="low-frequency energy heat map")
    lf.add_argument("image")
    lf.add_argument("--out", required=True)
    lf.set_defaults(func=cmd_lfmap)

    sy = sub.add_parser("synth", help="generate a synthetic oracle scene")
    sy.add_argument("--out", required=True)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--views", type=int, default=10)
    sy.add_argument("--gaussians", type=int, default=20)
    sy.add_argument("--size", type=int, default=64)
    sy.add_argument("--multispectral", action="store_true")
    sy.set_defaults(func=cmd_synth)

    tr = sub.add_parser("train", help="optimize a scene")
    tr.add_argument("--scene", required=True)
    tr.add_argument("--config", help="TrainConfig JSON file")
    tr.add_argument("--preset", choices=CONFIG_PRESETS)
    tr.add_argument("--iterations", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--n-train", type=int, dest="n_train")
    tr.add_argument("--split-protocol", default="uniform",
                    choices=("uniform", "seeded-random"), dest="split_protocol")
    tr.add_argument("--split-seed", type=int, default=0, dest="split_seed")
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    re = sub.add_parser("render", help="render one view from a checkpoint")
    re.add_argument("--checkpoint", required=True)
    re.add_argument("--scene", required=True)
    re.add_argument("--view", type=int, required=True)
    re.add_argument("--modality", choices=("rgb", "nir"), default="rgb")
    re.add_argument("--background", type=float, default=0.0)
    re.add_argument("--out", required=True)
    re.set_defaults(func=cmd_render)

    ev = sub.add_parser("eval", help="held-out metrics for a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--scene", required=True)
    ev.add_argument("--multispectral", action="store_true")
    ev.add_argument("--n-train", type=int, dest="n_train")
    ev.add_argument("--split-protocol", default="uniform",
                    choices=("uniform", "seeded-random"), dest="split_protocol")
    ev.add_argument("--split-seed", type=int, default=0, dest="split_seed")
    ev.add_argument("--label", default="eval")
    ev.add_argument("--background", type=float, default=0.0)
    ev.add_argument("--format", choices=("csv", "markdown"), default="csv")
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    be = sub.add_parser("benchmark", help="four-configuration protocol")
    be.add_argument("--scenes", nargs="+", required=True)
    be.add_argument("--configs", nargs="+", default=list(CONFIG_PRESETS),
                    choices=CONFIG_PRESETS)
    be.add_argument("--seeds", nargs="+", type=int, default=[0])
    be.add_argument("--n-train", type=int, default=3, dest="n_train")
    be.add_argument("--iterations", type=int, default=3000)
    be.add_argument("--workers", type=int, default=1)
    be.add_argument("--out", required=True)
    be.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
