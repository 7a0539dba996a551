"""Dynamic Gaussian splatting: representation, rendering, losses and fitting."""

from .densify import densify_prune
from .gaussians import MAX_GAUSSIANS, DeformationField, Gaussians, SceneState, deform
from .init import init_from_depth
from .losses import arap_loss, recon_loss, rot_loss, ssim
from .optimize import FMDContext, LossWeights, OptimizeConfig, optimize
from .raster import Splats2D, project_gaussians, rasterize, rasterize_grad
from .render import render, render_depth

__all__ = [
    "MAX_GAUSSIANS",
    "DeformationField",
    "FMDContext",
    "Gaussians",
    "LossWeights",
    "OptimizeConfig",
    "SceneState",
    "Splats2D",
    "arap_loss",
    "deform",
    "densify_prune",
    "init_from_depth",
    "optimize",
    "project_gaussians",
    "rasterize",
    "rasterize_grad",
    "recon_loss",
    "render",
    "render_depth",
    "rot_loss",
    "ssim",
]
