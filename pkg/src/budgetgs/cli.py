"""Command-line entry point: ``budgetgs {train,render,eval,bench,make-scene}``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig, load_config, load_score_weights, save_config
from .io import (DataError, ModelFormatError, SyntheticSpec, load_colmap, load_model, make_synthetic_scene,
                 quadrant_mask, save_image, save_model, write_scene)
from .train import bench_backward, evaluate, render_image, train

log = logging.getLogger("budgetgs")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3


def _fit_window(config: TrainConfig) -> None:
    # keep the densification window inside a shortened run so the budget is reached
    if config.densify_end <= config.total_iterations:
        return
    half = config.total_iterations // 2
    steps = (half - config.densify_start) // config.densify_interval
    if steps < 1:
        raise ConfigError(f"{config.total_iterations} iterations leave no room for densification; "
                          "set --densify-interval/--densify-start explicitly")
    config.densify_end = config.densify_start + steps * config.densify_interval
    log.warning("densification window shortened to end at iteration %d", config.densify_end)


def build_config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig()
    explicit_end = args.densify_end is not None
    if args.iterations is not None:
        config.total_iterations = args.iterations
    if args.densify_interval is not None:
        config.densify_interval = args.densify_interval
    if args.densify_start is not None:
        config.densify_start = args.densify_start
    if explicit_end:
        config.densify_end = args.densify_end
    if args.budget is not None and args.budget_multiplier is not None:
        raise ConfigError("--budget and --budget-multiplier are mutually exclusive")
    if args.budget is not None:
        config.budget, config.budget_multiplier = args.budget, None
    if args.budget_multiplier is not None:
        config.budget, config.budget_multiplier = None, args.budget_multiplier
    if args.backward is not None:
        config.backward = args.backward
    if args.schedule is not None:
        config.schedule = args.schedule
    if args.score_weights is not None:
        try:
            config.score_weights = load_score_weights(args.score_weights)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read score weights: {exc}") from exc
    if args.seed is not None:
        config.seed = args.seed
    if args.no_high_opacity:
        config.high_opacity = False
    if args.background is not None:
        config.background = tuple(args.background)
    if not explicit_end:
        if args.iterations is not None and not args.config:
            _fit_window(config)
        # a changed interval may no longer divide the default window; trim its end
        config.densify_end -= (config.densify_end - config.densify_start) % config.densify_interval
    return config.validate()


def cmd_train(args) -> int:
    config = build_config(args)
    bundle = load_colmap(args.scene, image_dir=args.images, mask_dir=args.roi_mask_dir)
    missing = [c.name for c in bundle.train_cameras if c.image is None]
    if missing:
        raise DataError(f"missing training images: {', '.join(missing[:5])}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    gaussians, report = train(bundle, config, metrics_path=out / "metrics.jsonl")
    save_model(out / "model.ply", gaussians)
    report.save(out / "report.json")
    train_psnr = report.metrics["train"]["mean_psnr"]
    print(f"final Gaussians {report.final_count} (budget {report.budget}, peak {report.peak_count}); "
          f"train PSNR {train_psnr if train_psnr is None else round(train_psnr, 3)} dB; "
          f"{report.total_seconds:.1f} s")
    return EXIT_OK


def _cameras(bundle, split: str):
    if split == "train":
        return bundle.train_cameras
    if split == "test":
        return bundle.test_cameras
    return bundle.cameras


def cmd_render(args) -> int:
    gaussians = load_model(args.model)
    bundle = load_colmap(args.scene, load_images=False)
    out = Path(args.out)
    for cam in _cameras(bundle, args.split):
        img = render_image(gaussians, cam, tuple(args.background or (0.0, 0.0, 0.0)), args.sh_degree)
        save_image(out / (Path(cam.name).stem + ".png"), img)
    print(f"rendered {len(_cameras(bundle, args.split))} views to {out}")
    return EXIT_OK


def write_metrics_csv(path, rows) -> None:
    """One row per view plus a final ``mean`` row; infinite PSNR is written as ``inf``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["view", "psnr", "ssim"])
        for r in rows:
            w.writerow([r["view"], repr(float(r["psnr"])), repr(float(r["ssim"]))])
        w.writerow(["mean", repr(float(np.mean([r["psnr"] for r in rows]))),
                    repr(float(np.mean([r["ssim"] for r in rows])))])


def cmd_eval(args) -> int:
    gaussians = load_model(args.model)
    bundle = load_colmap(args.scene, image_dir=args.images)
    cams = _cameras(bundle, args.split)
    if not cams:
        raise DataError(f"scene has an empty {args.split} split")
    rows = evaluate(gaussians, cams, tuple(args.background or (0.0, 0.0, 0.0)), args.sh_degree)
    for r in rows:
        print(f"{r['view']}\tPSNR {r['psnr']:.3f}\tSSIM {r['ssim']:.4f}")
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    print(f"mean\tPSNR {mean_psnr:.3f}\tSSIM {np.mean([r['ssim'] for r in rows]):.4f}")
    write_metrics_csv(args.csv, rows)
    return EXIT_OK


def _spec_from_args(args) -> SyntheticSpec:
    return SyntheticSpec(num_gaussians=args.gaussians, num_cameras=args.cameras, width=args.width,
                         height=args.height, num_test_cameras=getattr(args, "test_cameras", 0),
                         jitter=getattr(args, "jitter", SyntheticSpec.jitter))


def cmd_bench(args) -> int:
    bundle, gt = make_synthetic_scene(_spec_from_args(args), np.random.default_rng(args.seed))
    result = bench_backward(bundle, gt, repeats=args.repeats)
    print(f"engines agree: max relative error {result['max_relative_error']:.2e} over {result['splats']} splats")
    print("engine\tmean_s\tstd_s")
    for r in result["rows"]:
        print(f"{r['engine']}\t{r['mean_seconds']:.6f}\t{r['std_seconds']:.6f}")
    if args.json:
        Path(args.json).write_text(json.dumps(result, indent=2) + "\n")
    return EXIT_OK


def cmd_make_scene(args) -> int:
    bundle, gt = make_synthetic_scene(_spec_from_args(args), np.random.default_rng(args.seed))
    if args.roi_quadrant is not None:
        for cam in bundle.train_cameras:
            cam.mask = quadrant_mask(cam.width, cam.height, args.roi_quadrant)
    out = write_scene(bundle, args.out, binary=args.binary)
    save_model(out / "gt.ply", gt)
    print(f"wrote {len(bundle.cameras)} views and {len(bundle.points)} SfM points to {out}")
    return EXIT_OK


def _add_train_flags(p) -> None:
    p.add_argument("--config", help="JSON run configuration (see TrainConfig)")
    p.add_argument("--budget", type=int, help="exact final Gaussian count")
    p.add_argument("--budget-multiplier", type=float, help="budget as a multiple of the SfM point count")
    p.add_argument("--iterations", type=int)
    p.add_argument("--densify-interval", type=int)
    p.add_argument("--densify-start", type=int)
    p.add_argument("--densify-end", type=int)
    p.add_argument("--backward", choices=("per-pixel", "per-splat"))
    p.add_argument("--schedule", choices=("vertex", "paper-eq2"))
    p.add_argument("--score-weights", help="JSON file with score component weights")
    p.add_argument("--roi-mask-dir", help="directory of single-channel PNG masks named like the images")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-high-opacity", action="store_true", help="keep sigmoid opacities for the whole run")
    p.add_argument("--background", type=float, nargs=3)


def _add_synthetic_flags(p) -> None:
    p.add_argument("--gaussians", type=int, default=20)
    p.add_argument("--cameras", type=int, default=8)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="budgetgs", description="Budget-constrained Gaussian splatting.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a scene")
    p.add_argument("scene", help="scene directory with sparse reconstruction tables and images/")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--images", help="image directory (default: SCENE/images)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a model from the scene cameras")
    p.add_argument("model")
    p.add_argument("scene")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="all")
    p.add_argument("--sh-degree", type=int, default=3)
    p.add_argument("--background", type=float, nargs=3)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM of a model on the test views")
    p.add_argument("model")
    p.add_argument("scene")
    p.add_argument("--csv", required=True)
    p.add_argument("--images")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--sh-degree", type=int, default=3)
    p.add_argument("--background", type=float, nargs=3)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time the two backward engines on a synthetic workload")
    _add_synthetic_flags(p)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--json", help="also write the timing table as JSON")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("make-scene", help="write a synthetic scene to disk")
    p.add_argument("out")
    _add_synthetic_flags(p)
    p.add_argument("--test-cameras", type=int, default=1)
    p.add_argument("--jitter", type=float, default=SyntheticSpec.jitter)
    p.add_argument("--roi-quadrant", type=int, choices=(0, 1, 2, 3), help="attach a one-quadrant ROI mask")
    p.add_argument("--binary", action="store_true", help="binary reconstruction tables")
    p.set_defaults(func=cmd_make_scene)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ModelFormatError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
