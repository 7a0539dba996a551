"""Command-line entry point ``fourd``.

Every subcommand accepts the global ``--config`` (a JSON file with a
``schema_version`` field, see ``docs/config.md``) and ``--seed``.  Failures
caused by bad input exit with status 2 and print one JSON object on stderr::

    {"error": "InputError", "command": "fit-4dgs", "message": "..."}
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .errors import InputError

SCHEMA_VERSION = 1
CONFIG_SECTIONS = ("scene", "bench", "fit", "prior", "toy", "mask")


class CLIError(InputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print usage and exit(2)
        raise CLIError(message)


# ------------------------------------------------------------------ config
def load_config(path) -> dict:
    if path is None:
        return {"schema_version": SCHEMA_VERSION}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: config must be a JSON object")
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise InputError(f"{path}: unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    unknown = set(cfg) - set(CONFIG_SECTIONS) - {"schema_version"}
    if unknown:
        raise InputError(f"{path}: unknown config sections {sorted(unknown)}")
    for k in CONFIG_SECTIONS:
        if not isinstance(cfg.get(k, {}), dict):
            raise InputError(f"{path}: section {k!r} must be an object")
    return cfg


def _json_arg(text: str, what: str) -> dict:
    """Inline JSON or a path to a JSON file."""
    p = Path(text)
    try:
        raw = p.read_text() if p.is_file() else text
        val = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise InputError(f"{what}: invalid JSON ({exc})") from None
    if not isinstance(val, dict):
        raise InputError(f"{what}: expected a JSON object")
    return val


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _non_negative(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


# ---------------------------------------------------------------- commands
def cmd_synth_scene(args, cfg) -> int:
    from .io import export_frames
    from .pipeline.synth import synth_scene

    bundle = synth_scene(args.seed, cfg.get("scene", {}))
    out = Path(args.out)
    bundle.save(out)
    for v in range(bundle.n_views):
        export_frames(bundle.frames[v], out / "frames" / f"view_{v}", args.format)
    print(json.dumps({"out": str(out), "views": bundle.n_views, "frames": bundle.n_frames, "checksums": bundle.checksums()}))
    return 0


def cmd_build_mask(args, cfg) -> int:
    from .attention import GridIndex, build_mask, mask_report, write_pbm

    section = dict(cfg.get("mask", {}))
    views = args.views if args.views is not None else section.get("views")
    frames = args.frames if args.frames is not None else section.get("frames")
    spatial = args.spatial if args.spatial is not None else section.get("spatial", 1)
    if views is None or frames is None:
        raise InputError("build-mask needs --views and --frames (or a 'mask' config section)")
    try:
        views, frames, spatial = (_positive(str(v)) for v in (views, frames, spatial))
    except argparse.ArgumentTypeError as exc:
        raise InputError(f"mask config: {exc}") from None
    mask = build_mask(views, frames)
    grid = GridIndex(views, 2 * frames, spatial)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pbm(out / "mask.pbm", mask.pair_mask)
    report = mask_report(mask)
    report["spatial"] = spatial
    report["n_tokens"] = grid.n_tokens
    (out / "mask.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return 0


def _scatter_png(path, samples: np.ndarray, data: np.ndarray, size: int = 256) -> None:
    from .io import write_png

    pts = np.concatenate([samples, data])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    for arr, color in ((data, (60, 120, 220)), (samples, (220, 60, 40))):
        ij = ((arr - lo) / span * (size - 1)).round().astype(int)
        img[size - 1 - ij[:, 1], ij[:, 0]] = color
    write_png(path, img)


def cmd_train_flow(args, cfg) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    if args.dataset == "scenes":
        from .pipeline.prior import PriorConfig, train_prior

        pcfg = PriorConfig.from_dict(dict(cfg.get("prior", {})))
        if not pcfg.scene:
            pcfg.scene = dict(cfg.get("scene", {}))
        pcfg.steps = args.epochs * pcfg.n_scenes * pcfg.samples_per_scene
        model, losses = train_prior(pcfg, args.seed)
        model.save(out)
    else:
        from .flow import euler_sample, toy_dataset, train_toy

        toy = dict(cfg.get("toy", {}))
        data = toy_dataset(args.dataset, int(toy.get("n", 8192)), args.seed)
        model, losses = train_toy(
            data,
            args.epochs,
            args.seed,
            lr=float(toy.get("lr", 1e-2)),
            batch_size=int(toy.get("batch_size", 64)),
            hidden=int(toy.get("hidden", 128)),
            depth=int(toy.get("depth", 2)),
        )
        model.save(out)
        samples = euler_sample(model, None, int(toy.get("sample_steps", 50)), args.seed + 1, shape=(int(toy.get("n_samples", 2000)), 2))
        _scatter_png(out.with_suffix(".png"), samples, data[:2000])
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, l in enumerate(losses):
            w.writerow([i, f"{l:.8g}"])
    print(json.dumps({"checkpoint": str(out), "steps": len(losses), "final_loss": losses[-1] if losses else None}))
    return 0


def _load_scene_dir(path):
    from .geometry import load_cameras
    from .io import import_frames
    from .pipeline.synth import SceneBundle

    d = Path(path)
    if not d.is_dir():
        raise InputError(f"{d}: scene directory not found")
    if (d / "bundle.bin").exists():
        return SceneBundle.load(d)
    cams = load_cameras(d / "cameras.json")
    views = []
    for v in range(len(cams)):
        fmt = "png" if list((d / "frames" / f"view_{v}").glob("*.png")) else "ppm"
        frames = import_frames(d / "frames" / f"view_{v}", fmt)
        if len(frames) == 0:
            raise InputError(f"{d}: no frames for view {v}")
        views.append(frames.astype(np.float64) / 255.0)
    if len({f.shape for f in views}) != 1:
        raise InputError(f"{d}: frame counts or sizes differ between views")
    return SceneBundle(np.stack(views), np.zeros(np.stack(views).shape[:-1]), cams, {})


def _random_init(bundle, seed: int, n: int = 2000):
    from .splat.gaussians import DeformationField, Gaussians, SceneState
    from .splat.init import scene_extent

    rng = np.random.default_rng(seed)
    centers = np.stack([c.center for c in bundle.cams])
    radius = 0.5 * float(np.min(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    pts = rng.uniform(-1, 1, (n, 3)) * radius / np.sqrt(3) + centers.mean(axis=0)
    extent = scene_extent(pts, bundle.cams)
    g = Gaussians.isotropic(pts, radius / 50, rng.uniform(0, 1, (n, 3)), 0.1)
    return SceneState(g, DeformationField(bundle.n_frames, scale=extent, center=pts.mean(axis=0), seed=seed), extent)


def cmd_fit(args, cfg) -> int:
    from .geometry import interpolate_trajectory
    from .model import VelocityField
    from .pipeline.bench import BenchConfig, fmd_context
    from .splat.init import init_from_depth
    from .splat.optimize import LossWeights, OptimizeConfig, optimize

    bundle = _load_scene_dir(args.scene_dir)
    fit = dict(cfg.get("fit", {}))
    weights = LossWeights.from_dict({**fit.get("weights", {}), **(_json_arg(args.weights, "--weights") if args.weights else {})})
    opt_cfg = OptimizeConfig.from_dict(dict(fit.get("optimizer", {})))
    if args.init == "depth":
        if not np.any(bundle.depths > 0):
            raise InputError("--init depth needs depth maps in the scene directory")
        scene = init_from_depth(bundle.frames, bundle.depths, bundle.cams, seed=args.seed)
    else:
        scene = _random_init(bundle, args.seed)
    ctx, traj = None, None
    if args.model:
        if not np.any(bundle.depths > 0):
            raise InputError("FMD conditioning needs depth maps in the scene directory")
        model = VelocityField.load(args.model)
        bcfg = BenchConfig.from_dict({"scene": {"width": bundle.frames.shape[3], "height": bundle.frames.shape[2], "n_frames": bundle.n_frames, "n_views": bundle.n_views}, "prior": cfg.get("prior", {})})
        ctx = fmd_context(bundle, model, bcfg)
        traj = interpolate_trajectory(bundle.cams, 120)
    hist = optimize(scene, bundle.frames, bundle.cams, traj, None, weights, args.iters, args.seed, config=opt_cfg, fmd=ctx)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scene.save(out)
    print(json.dumps({"scene": str(out), "gaussians": len(scene), "iterations": args.iters, "final_loss": hist.loss[-1] if hist.loss else None}))
    return 0


def _parse_timestamps(text: str, n_frames: int) -> list[int]:
    if text == "all":
        return list(range(1, n_frames + 1))
    try:
        ts = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"--timestamps: expected 'all' or comma-separated integers, got {text!r}") from None
    bad = [t for t in ts if not 1 <= t <= n_frames]
    if bad or not ts:
        raise InputError(f"--timestamps must lie in 1..{n_frames}, got {text!r}")
    return ts


def cmd_render(args, cfg) -> int:
    from .geometry import interpolate_trajectory, load_cameras
    from .io import export_frames
    from .splat.gaussians import SceneState
    from .splat.render import render

    if not Path(args.scene).is_file():
        raise InputError(f"{args.scene}: scene checkpoint not found")
    scene = SceneState.load(args.scene)
    cams = load_cameras(args.trajectory)
    if args.interpolate:
        cams = interpolate_trajectory(cams, args.interpolate).poses
    ts = _parse_timestamps(args.timestamps, scene.n_frames)
    frames = [render(scene, cam, t) for cam in cams for t in ts]
    paths = export_frames(frames, args.out_dir, args.format)
    print(json.dumps({"frames": len(paths), "out_dir": str(args.out_dir)}))
    return 0


def cmd_metrics(args, cfg) -> int:
    from .io import import_frames
    from .pipeline.metrics import CSV_COLUMNS, format_number, video_psnr, video_ssim

    def views(root: Path) -> dict[str, Path]:
        if not root.is_dir():
            raise InputError(f"{root}: not a directory")
        subs = sorted(p for p in root.iterdir() if p.is_dir())
        return {p.name: p for p in subs} if subs else {"0": root}

    pred, gt = views(Path(args.pred)), views(Path(args.gt))
    if set(pred) != set(gt):
        raise InputError(f"view directories differ: {sorted(pred)} vs {sorted(gt)}")
    rows = []
    for name in sorted(pred):
        start = time.perf_counter()
        a = import_frames(pred[name], args.format).astype(np.float64) / 255.0
        b = import_frames(gt[name], args.format).astype(np.float64) / 255.0
        if a.shape != b.shape or len(a) == 0:
            raise InputError(f"view {name}: frame stacks differ in shape ({a.shape} vs {b.shape}) or are empty")
        p, s = video_psnr(a, b), video_ssim(a, b)
        rows.append([name, format_number(p), format_number(s), format_number(time.perf_counter() - start, 3)])
    out = sys.stdout if args.out is None else open(args.out, "w", newline="")
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(rows)
    finally:
        if args.out is not None:
            out.close()
    return 0


def cmd_bench(args, cfg) -> int:
    from .pipeline.bench import BenchConfig, run_benchmark

    bench = dict(cfg.get("bench", {}))
    bench.setdefault("scene", cfg.get("scene", {}))
    if "prior" in cfg:
        bench.setdefault("prior", cfg["prior"])
    if args.iters is not None:
        bench["iters"] = args.iters
    if args.ablate_fmd:
        bench["ablate_fmd"] = True
    if args.fmd:
        bench["fmd"] = True
    if args.prior:
        bench["prior_checkpoint"] = args.prior
    if args.timing:
        bench["record_timing"] = True
    report = run_benchmark(args.seed, BenchConfig.from_dict(bench), args.out)
    summary = {run: report.to_json()["runs"][run]["mean_ssim"] for run in report.runs}
    print(json.dumps({"out": str(args.out), "mean_ssim": summary}, sort_keys=True))
    return 0


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    # the options are accepted before and after the subcommand; the copy on
    # the subparsers suppresses defaults so it does not clobber the global one
    parser = _Parser(prog="fourd", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON config file with a schema_version field")
    parser.add_argument("--seed", type=int, default=7, help="random seed (default 7)")
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-scene", parents=[common], help="render a synthetic multi-view scene bundle")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.set_defaults(func=cmd_synth_scene)

    p = sub.add_parser("build-mask", parents=[common], help="emit the fused time-view mask and its density report")
    p.add_argument("--views", type=_positive, help="number of views (default: mask.views from the config)")
    p.add_argument("--frames", type=_positive, help="frames per half, f (default: mask.frames from the config)")
    p.add_argument("--spatial", type=_positive, help="tokens per frame (sets n_tokens in the report, default 1)")
    p.add_argument("--out", default=".", help="output directory for mask.pbm and mask.json")
    p.set_defaults(func=cmd_build_mask)

    p = sub.add_parser("train-flow", parents=[common], help="train a velocity field")
    p.add_argument("--dataset", choices=("point", "gauss", "mixture", "scenes"), required=True)
    p.add_argument("--epochs", type=_positive, required=True)
    p.add_argument("--out", required=True, help="checkpoint path; .csv and .png siblings are written next to it")
    p.set_defaults(func=cmd_train_flow)

    p = sub.add_parser("fit-4dgs", parents=[common], help="fit a dynamic Gaussian scene")
    p.add_argument("--scene-dir", required=True)
    p.add_argument("--init", choices=("depth", "random"), default="depth")
    p.add_argument("--iters", type=_non_negative, default=2000)
    p.add_argument("--weights", help="LossWeights as inline JSON or a JSON file")
    p.add_argument("--model", help="velocity-field checkpoint enabling the distillation term")
    p.add_argument("--out", required=True, help="scene checkpoint path")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", parents=[common], help="render a fitted scene along cameras")
    p.add_argument("--scene", required=True)
    p.add_argument("--trajectory", required=True, help="cameras JSON file")
    p.add_argument("--interpolate", type=_positive, help="resample the cameras into a closed loop of N poses")
    p.add_argument("--timestamps", default="all", help="'all' or comma-separated 1-based indices")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("metrics", parents=[common], help="PSNR/SSIM between two frame directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("bench", parents=[common], help="end-to-end synthetic benchmark")
    p.add_argument("--out", default="bench_out")
    p.add_argument("--iters", type=_non_negative)
    p.add_argument("--fmd", action="store_true", help="enable the distillation term")
    p.add_argument("--ablate-fmd", action="store_true", help="run with and without the distillation term")
    p.add_argument("--prior", help="velocity-field checkpoint (skips prior training)")
    p.add_argument("--timing", action="store_true", help="record wall-clock seconds (reports are then not reproducible)")
    p.set_defaults(func=cmd_bench)
    return parser


def _fail(kind: str, command: str | None, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "command": command, "message": message}) + "\n")
    return 2


def main(argv=None) -> int:
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except InputError as exc:
        return _fail(type(exc).__name__ if not isinstance(exc, CLIError) else "UsageError", command, str(exc))
    except (OSError, KeyError, ValueError) as exc:
        return _fail(type(exc).__name__, command, str(exc))
    except Exception as exc:  # stage errors and anything unexpected
        cause = getattr(exc, "cause", None)
        if isinstance(cause, (InputError, OSError, ValueError)):
            return _fail(type(cause).__name__, command, str(exc))
        return _fail(type(exc).__name__, command, str(exc))


if __name__ == "__main__":
    sys.exit(main())
