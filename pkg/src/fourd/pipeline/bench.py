"""End-to-end benchmark: synthesize, initialize, fit, evaluate held-out views."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InputError
from ..flow import FMDConfig
from ..geometry import CameraPose, trajectory_at, interpolate_trajectory
from ..io import export_frames
from ..model import VelocityField
from ..splat.gaussians import SceneState
from ..splat.init import init_from_depth
from ..splat.optimize import FMDContext, LossWeights, OptimizeConfig, optimize
from ..splat.render import render
from .metrics import MetricReport, ViewMetrics, psnr, video_psnr, video_ssim
from .prior import PriorConfig, train_prior
from .synth import SceneBundle, SynthConfig, synth_scene

HELD_OUT_TIMES = (0.5, 1.5, 3.5, 4.5)


class StageError(RuntimeError):
    """A benchmark stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class BenchConfig:
    """Benchmark settings; every field is exposed through the JSON config file.

    ``fmd`` turns on the distillation term; ``ablate_fmd`` runs both variants
    from the same initialization and seed.  ``prior_checkpoint`` skips the
    prior training stage.
    """

    scene: dict = field(default_factory=dict)
    iters: int = 2000
    weights: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    fmd: bool = False
    ablate_fmd: bool = False
    prior: dict = field(default_factory=dict)
    prior_checkpoint: str | None = None
    fmd_tau_range: tuple[float, float] = (0.0, 1.0)
    fmd_stop_gradient: bool = False
    reference_view: int = 0
    held_out_times: tuple[float, ...] = HELD_OUT_TIMES
    trajectory_samples: int = 120
    frame_format: str = "png"
    record_timing: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown benchmark settings: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) and k in ("fmd_tau_range", "held_out_times") else v for k, v in d.items()}
        cfg = cls(**d)
        if cfg.iters < 0:
            raise InputError("iters must be non-negative")
        if cfg.frame_format not in ("png", "ppm"):
            raise InputError("frame_format must be png or ppm")
        return cfg

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # re-raised with the stage attached
        raise StageError(name, exc) from exc


def held_out_poses(cams: list[CameraPose], times=HELD_OUT_TIMES) -> list[CameraPose]:
    return trajectory_at(cams, list(times)).poses


def training_psnr(scene: SceneState, bundle: SceneBundle) -> float:
    vals = []
    for v, cam in enumerate(bundle.cams):
        for t in range(1, bundle.n_frames + 1):
            vals.append(psnr(render(scene, cam, t), bundle.frames[v, t - 1]))
    finite = [x for x in vals if np.isfinite(x)]
    return float(np.mean(finite)) if finite else float("inf")


def render_video(scene: SceneState, cam: CameraPose) -> np.ndarray:
    return np.stack([render(scene, cam, t) for t in range(1, scene.n_frames + 1)])


def ground_truth_video(bundle: SceneBundle, cam: CameraPose) -> np.ndarray:
    if bundle.scene is None:
        raise InputError("bundle carries no scene content; held-out views need it")
    return np.stack([bundle.scene.render(cam, t)[0] for t in range(1, bundle.n_frames + 1)])


def evaluate_held_out(scene: SceneState, bundle: SceneBundle, poses, *, frames_dir=None, fmt="png") -> list[ViewMetrics]:
    rows = []
    for i, cam in enumerate(poses):
        start = time.perf_counter()
        pred = render_video(scene, cam)
        gt = ground_truth_video(bundle, cam)
        m = ViewMetrics(f"heldout_{i}", video_psnr(pred, gt), video_ssim(pred, gt))
        m.wall_seconds = time.perf_counter() - start
        if frames_dir is not None:
            export_frames(pred, Path(frames_dir) / f"heldout_{i}", fmt)
        rows.append(m)
    return rows


def load_or_train_prior(cfg: BenchConfig, seed: int):
    if cfg.prior_checkpoint:
        return VelocityField.load(cfg.prior_checkpoint)
    pcfg = PriorConfig.from_dict(dict(cfg.prior))
    if not pcfg.scene:
        pcfg.scene = dict(cfg.scene)
    model, _ = train_prior(pcfg, seed)
    return model


def fmd_context(bundle: SceneBundle, model, cfg: BenchConfig) -> FMDContext:
    ref = cfg.reference_view
    k = bundle.frames.shape[2] // _model_resolution(cfg)
    return FMDContext(
        model,
        bundle.frames[ref],
        bundle.depth_maps(ref),
        bundle.cams[ref],
        downsample=k,
        config=FMDConfig(tau_range=tuple(cfg.fmd_tau_range), stop_gradient=cfg.fmd_stop_gradient),
    )


def _model_resolution(cfg: BenchConfig) -> int:
    pcfg = PriorConfig.from_dict(dict(cfg.prior))
    size = SynthConfig.from_dict(dict(cfg.scene)).height
    return size // pcfg.downsample


def run_benchmark(seed: int = 7, config: BenchConfig | dict | None = None, out_dir=None) -> MetricReport:
    """Fit the synthetic scene of ``seed`` and score interpolated held-out views.

    When ``out_dir`` is given the report (``metrics.csv``, ``report.json``),
    the held-out frames and the fitted scene checkpoints are written there.
    """
    cfg = config if isinstance(config, BenchConfig) else BenchConfig.from_dict(config or {})
    bundle = _stage("synth", synth_scene, seed, dict(cfg.scene))
    base = _stage("init", init_from_depth, bundle.frames, bundle.depths, bundle.cams, seed=seed)
    weights = _stage("config", LossWeights.from_dict, dict(cfg.weights))
    opt_cfg = _stage("config", OptimizeConfig.from_dict, dict(cfg.optimizer))
    trajectory = _stage("trajectory", interpolate_trajectory, bundle.cams, cfg.trajectory_samples)
    poses = _stage("trajectory", held_out_poses, bundle.cams, cfg.held_out_times)

    variants = []
    if cfg.ablate_fmd:
        variants = [("no_fmd", False), ("fmd", True)]
    else:
        variants = [("fmd" if cfg.fmd else "no_fmd", cfg.fmd)]
    ctx = None
    if any(use for _, use in variants):
        model = _stage("prior", load_or_train_prior, cfg, seed)
        ctx = fmd_context(bundle, model, cfg)

    report = MetricReport(record_timing=cfg.record_timing)
    report.meta = {
        "seed": int(seed),
        "config_hash": cfg.digest(),
        "scene_hash": bundle.meta["config_hash"],
        "iterations": cfg.iters,
        "held_out_times": list(cfg.held_out_times),
        "initial_gaussians": len(base),
    }
    out = Path(out_dir) if out_dir is not None else None
    for name, use in variants:
        scene = base.copy()
        w = weights if use else LossWeights(**{**asdict(weights), "fmd": 0.0})
        hist = _stage(
            f"optimize:{name}",
            optimize,
            scene,
            bundle.frames,
            bundle.cams,
            trajectory if use else None,
            None,
            w,
            cfg.iters,
            seed,
            config=opt_cfg,
            fmd=ctx if use else None,
        )
        frames_dir = None if out is None else out / "frames" / name
        rows = _stage("evaluate", evaluate_held_out, scene, bundle, poses, frames_dir=frames_dir, fmt=cfg.frame_format)
        report.runs[name] = rows
        report.train_psnr[name] = _stage("evaluate", training_psnr, scene, bundle)
        report.counts[name] = [c for i, c in enumerate(hist.count) if i % 100 == 0 or i == len(hist.count) - 1]
        report.runtime_seconds[name] = hist.seconds
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            scene.save(out / f"scene_{name}.bin")
    if out is not None:
        report.write(out)
    return report
