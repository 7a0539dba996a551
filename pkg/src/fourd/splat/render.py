"""Rendering a :class:`SceneState` at a timestamp through a camera."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..geometry import CameraPose
from .gaussians import Gaussians, SceneState, apply_offsets
from .raster import Splats2D, project_gaussians, rasterize, rasterize_op


@dataclass
class Render:
    image: ad.Tensor
    means2d: ad.Tensor
    index: np.ndarray
    offsets: ad.Tensor


def scene_tensors(scene: SceneState, requires_grad: bool = True) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in scene.parameters().items()}


def deformed_tensors(scene: SceneState, P: dict[str, ad.Tensor], t: int):
    out = scene.deformation.forward(P["means"], t, P)
    m, q, s = apply_offsets(P["means"], P["quats"], P["log_scales"], out)
    return m, q, s, out


def render_frame(scene: SceneState, P: dict[str, ad.Tensor], cam: CameraPose, t: int, *, background=None) -> Render:
    """Differentiable render; ``means2d`` keeps its gradient for densification stats."""
    m, q, s, out = deformed_tensors(scene, P, t)
    proj = project_gaussians(m, q, s, cam)
    proj.means2d.retain_grad()
    opacity = ad.take_rows(ad.sigmoid(P["opacity_logits"]), proj.index)
    colors = ad.take_rows(P["colors"], proj.index)
    img = rasterize_op(proj.means2d, proj.cov2d, opacity, colors, proj.depth, cam.height, cam.width, background=background)
    return Render(img, proj.means2d, proj.index, out)


def project_scene(scene: SceneState, cam: CameraPose, t: int, colors: np.ndarray | None = None) -> Splats2D:
    P = scene_tensors(scene, requires_grad=False)
    m, q, s, _ = deformed_tensors(scene, P, t)
    proj = project_gaussians(m, q, s, cam)
    g = scene.gaussians
    c = g.colors if colors is None else colors
    return Splats2D(proj.means2d.data, proj.cov2d.data, g.opacity[proj.index], c[proj.index], proj.depth)


def render(scene: SceneState, cam: CameraPose, t: int, *, background=None) -> np.ndarray:
    """``(H, W, 3)`` float64 image of ``scene`` at timestamp ``t``."""
    return rasterize(project_scene(scene, cam, t), cam.height, cam.width, background=background)


def render_depth(scene: SceneState, cam: CameraPose, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Alpha-normalized expected view depth and accumulated opacity."""
    P = scene_tensors(scene, requires_grad=False)
    m, q, s, _ = deformed_tensors(scene, P, t)
    proj = project_gaussians(m, q, s, cam)
    g = scene.gaussians
    sp = Splats2D(proj.means2d.data, proj.cov2d.data, g.opacity[proj.index], proj.depth[:, None], proj.depth)
    acc, alpha = rasterize(sp, cam.height, cam.width, return_alpha=True)
    depth = np.where(alpha > 0, acc[..., 0] / np.maximum(alpha, 1e-12), 0.0)
    return depth, alpha


def splats_of(g: Gaussians, cam: CameraPose, colors: np.ndarray | None = None) -> Splats2D:
    """Screen-space splats for a fixed (undeformed) Gaussian set."""
    proj = project_gaussians(g.means, g.quats, g.log_scales, cam)
    c = g.colors if colors is None else colors
    return Splats2D(proj.means2d.data, proj.cov2d.data, g.opacity[proj.index], c[proj.index], proj.depth)


def render_gaussians(g: Gaussians, cam: CameraPose, *, background=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Image, expected depth and accumulated opacity of a fixed Gaussian set."""
    sp = splats_of(g, cam)
    img = rasterize(sp, cam.height, cam.width, background=background)
    sp.colors = sp.depth[:, None]
    acc, alpha = rasterize(sp, cam.height, cam.width, return_alpha=True)
    depth = np.where(alpha > 0, acc[..., 0] / np.maximum(alpha, 1e-12), 0.0)
    return img, depth, alpha
