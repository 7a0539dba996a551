"""Fitting a dynamic Gaussian scene to multi-view videos."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import autodiff as ad
from ..errors import InputError
from ..flow import FMDConfig, fmd_loss
from ..geometry import CameraPose, DepthMap, Trajectory
from ..model import area_downsample, build_conditioning, encode_frames
from ..optim import Adam
from .densify import densify_prune
from .losses import arap_loss_tensor, knn_edges, recon_loss_tensor, rot_loss_tensor
from .render import render_frame, scene_tensors
from .gaussians import SceneState


@dataclass
class LossWeights:
    ssim: float = 0.2
    fmd: float = 0.05
    arap: float = 0.01
    rot: float = 0.01

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise InputError(f"loss weight {k} must be a finite non-negative number, got {v!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        aliases = {"lambda_ssim": "ssim", "lambda_fmd": "fmd", "lambda_arap": "arap", "lambda_rot": "rot"}
        out = {}
        for k, v in d.items():
            key = aliases.get(k, k)
            if key not in cls.__dataclass_fields__:
                raise InputError(f"unknown loss weight {k!r}")
            out[key] = float(v)
        return cls(**out)


@dataclass
class OptimizeConfig:
    """Learning rates, schedules and regularizer settings.

    ``lr_means`` is multiplied by the scene extent.  Adam's ``eps`` is the
    usual 1e-8 so that exactly-zero losses stay put.
    """

    lr_means: float = 1.6e-4
    lr_colors: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_deform: float = 1e-3
    adam_eps: float = 1e-8
    densify_from: int = 500
    densify_every: int = 200
    densify_until: int | None = None
    grad_threshold: float = 2e-4
    p_fmd: float = 0.1
    arap_k: int = 8
    background: tuple[float, float, float] | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizeConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown optimizer settings: {sorted(unknown)}")
        return cls(**d)

    def learning_rates(self, extent: float) -> dict[str, float]:
        return {
            "means": self.lr_means * extent,
            "colors": self.lr_colors,
            "opacity_logits": self.lr_opacity,
            "log_scales": self.lr_scales,
            "quats": self.lr_rotations,
            "deform": self.lr_deform,
        }


@dataclass
class FMDContext:
    """What the distillation term needs besides the frozen velocity model.

    The conditioning for an interpolated pose is the reference video plus the
    point-cloud projection of its depth into that pose, pooled by
    ``downsample`` to the model's resolution.
    """

    model: object
    reference_frames: np.ndarray
    reference_depths: Sequence[DepthMap]
    reference_cam: CameraPose
    downsample: int = 1
    config: FMDConfig = field(default_factory=FMDConfig)
    _cache: dict = field(default_factory=dict, repr=False)

    def conditioning(self, index: int, cam: CameraPose):
        if index not in self._cache:
            self._cache[index] = build_conditioning(
                self.reference_frames, self.reference_depths, self.reference_cam, [cam], downsample=self.downsample
            )
        return self._cache[index]

    def reference_latent(self) -> np.ndarray:
        return encode_frames(area_downsample(self.reference_frames, self.downsample))


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)
    fmd: list[tuple[int, float]] = field(default_factory=list)
    count: list[int] = field(default_factory=list)
    densify: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def _fmd_term(scene, P, ctx: FMDContext, trajectory: Trajectory, rng, cfg: OptimizeConfig):
    """Render the full clip at a random trajectory pose; returns (images, per-frame grads, loss)."""
    j = int(rng.integers(len(trajectory)))
    cam = trajectory[j]
    cond = ctx.conditioning(j, cam)
    renders = [render_frame(scene, P, cam, t, background=cfg.background) for t in range(1, scene.n_frames + 1)]
    frames = np.stack([r.image.data for r in renders])
    k = ctx.downsample
    target_latent = encode_frames(area_downsample(frames, k))
    grid = np.stack([ctx.reference_latent(), target_latent])
    res = fmd_loss(grid, ctx.model, cond, ctx.config, seed=int(rng.integers(2**31)))
    n = target_latent.size
    g_lat = res.grad[1] / n  # (f, 3, h, w); only the rendered view is trainable
    g_small = 2.0 * np.moveaxis(g_lat, -3, -1)
    g_full = np.repeat(np.repeat(g_small, k, axis=-3), k, axis=-2) / (k * k)
    return renders, g_full, res.loss / n


def optimize(
    scene: SceneState,
    videos: np.ndarray,
    cams: Sequence[CameraPose],
    trajectory: Trajectory | None = None,
    model=None,
    weights: LossWeights | None = None,
    iters: int = 2000,
    seed: int = 0,
    *,
    config: OptimizeConfig | None = None,
    fmd: FMDContext | None = None,
    callback: Callable[[int, SceneState, float], None] | None = None,
) -> History:
    """Fit ``scene`` in place to ``videos`` (``(V, f, H, W, 3)``) seen by ``cams``.

    ``fmd`` (or a bare ``model``, which then needs ``fmd`` for its reference
    data) enables the distillation term on poses drawn from ``trajectory``.
    """
    weights = weights or LossWeights()
    cfg = config or OptimizeConfig()
    videos = np.asarray(videos, dtype=np.float64)
    if videos.ndim != 5 or videos.shape[0] != len(cams):
        raise InputError("videos must be (views, frames, H, W, 3) with one camera per view")
    if videos.shape[1] != scene.n_frames:
        raise InputError(f"scene has {scene.n_frames} frames but the videos have {videos.shape[1]}")
    if model is not None and fmd is None:
        raise InputError("an FMD model needs an FMDContext with the reference video and depth")
    use_fmd = fmd is not None and weights.fmd > 0 and trajectory is not None and len(trajectory) > 0
    rng = np.random.default_rng(seed)
    # a separate stream keeps the view/time schedule identical with and without distillation
    fmd_rng = np.random.default_rng([seed, 1])
    if scene.optimizer is None:
        scene.optimizer = Adam(cfg.learning_rates(scene.extent), eps=cfg.adam_eps)
    hist = History()
    start = time.perf_counter()
    V, f = videos.shape[:2]
    neighbors = None

    for it in range(iters):
        v = int(rng.integers(V))
        t = int(rng.integers(1, f + 1))
        P = scene_tensors(scene)
        cam = cams[v]
        r = render_frame(scene, P, cam, t, background=cfg.background)
        recon = recon_loss_tensor(r.image, videos[v, t - 1], weights.ssim)
        loss = recon
        if weights.arap > 0 and len(scene) > cfg.arap_k:
            if neighbors is None or len(neighbors) != len(scene):
                neighbors = knn_edges(scene.gaussians.means, cfg.arap_k)
            m_t = P["means"] + r.offsets[:, 0:3]
            loss = loss + weights.arap * arap_loss_tensor(scene.gaussians.means, m_t, neighbors)
        if weights.rot > 0 and f > 1:
            t2 = t + 1 if t < f else t - 1
            dq_a = r.offsets[:, 3:7]
            dq_b = scene.deformation.forward(P["means"], t2, P)[:, 3:7]
            loss = loss + weights.rot * rot_loss_tensor([dq_a, dq_b])
        value = float(loss.data)
        if use_fmd and fmd_rng.random() < cfg.p_fmd:
            # the distillation gradient is injected through a linear surrogate
            renders, g_full, fmd_value = _fmd_term(scene, P, fmd, trajectory, fmd_rng, cfg)
            for i, rr in enumerate(renders):
                loss = loss + (rr.image * (weights.fmd * g_full[i])).sum()
            value += weights.fmd * fmd_value
            hist.fmd.append((it, fmd_value))
        loss.backward()

        g2 = r.means2d.grad
        if g2 is not None and len(r.index):
            ndc = g2 * np.array([0.5 * cam.width, 0.5 * cam.height])
            scene.grad_accum[r.index] += np.linalg.norm(ndc, axis=1)
            scene.grad_count[r.index] += 1
        params = scene.parameters()
        grads = {k: P[k].grad for k in params if P[k].grad is not None}
        scene.optimizer.step(params, grads)
        np.clip(scene.gaussians.colors, 0.0, 1.0, out=scene.gaussians.colors)

        hist.loss.append(value)
        hist.recon.append(float(recon.data))
        hist.count.append(len(scene))

        step = it + 1
        until = cfg.densify_until if cfg.densify_until is not None else iters
        if step >= cfg.densify_from and step < until and step % cfg.densify_every == 0:
            stats = densify_prune(scene, cfg.grad_threshold, rng=rng)
            hist.densify.append({"iteration": step, **asdict(stats)})
            neighbors = None
        if callback is not None:
            callback(it, scene, value)
    hist.seconds = time.perf_counter() - start
    return hist
