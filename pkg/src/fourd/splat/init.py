"""Seeding canonical Gaussians from multi-view depth."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from ..errors import InputError
from ..geometry import CameraPose, DepthMap, PointCloud, back_project
from .gaussians import DeformationField, Gaussians, SceneState

INIT_OPACITY = 0.1


def voxel_downsample(pc: PointCloud, voxel: float) -> PointCloud:
    """Average positions and colors of the points falling in each occupied voxel.

    Output voxels are ordered by their integer coordinates, so the result does
    not depend on the order of the input points.
    """
    if len(pc) == 0 or voxel <= 0:
        return pc
    keys = np.floor(pc.positions / voxel).astype(np.int64)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    pos = np.zeros((len(uniq), 3))
    col = np.zeros((len(uniq), 3))
    np.add.at(pos, inverse, pc.positions)
    np.add.at(col, inverse, pc.colors)
    return PointCloud(pos / counts[:, None], col / counts[:, None])


def scene_extent(points: np.ndarray, cams: Sequence[CameraPose] = ()) -> float:
    """Radius of the camera rig, or of the point cloud when the rig has no spread."""
    if len(cams):
        centers = np.stack([c.center for c in cams])
        radius = float(1.1 * np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
        if radius > 0:
            return radius
    # a single camera (or coincident ones) has no rig radius
    return float(np.max(np.linalg.norm(points - points.mean(axis=0), axis=1))) or 1.0


def init_from_depth(
    videos,
    depths,
    cams: Sequence[CameraPose],
    *,
    voxel_size: float | None = None,
    n_frames: int | None = None,
    deformation_kwargs: dict | None = None,
    seed: int = 0,
) -> SceneState:
    """Gaussians from the frame-0 depth of every view.

    ``videos`` is ``(V, f, H, W, 3)`` and ``depths`` either a nested sequence
    of :class:`DepthMap` or a ``(V, f, H, W)`` array where non-positive values
    mark invalid pixels.  ``voxel_size`` defaults to 1/200 of the scene extent.
    """
    videos = np.asarray(videos, dtype=np.float64)
    if videos.ndim != 5 or len(videos) != len(cams):
        raise InputError("videos must be (views, frames, H, W, 3) with one camera per view")
    clouds = []
    for v, cam in enumerate(cams):
        d = depths[v][0]
        if not isinstance(d, DepthMap):
            arr = np.asarray(d, dtype=np.float64)
            d = DepthMap(np.where(arr > 0, arr, 1.0), arr > 0)
        if d.values.shape != videos.shape[2:4]:
            raise InputError("depth and frame sizes differ")
        clouds.append(back_project(d, videos[v, 0], cam))
    cloud = PointCloud.merge(clouds)
    if len(cloud) == 0:
        raise InputError("no valid depth pixels to initialize from")
    extent = scene_extent(cloud.positions, cams)
    voxel = extent / 200.0 if voxel_size is None else float(voxel_size)
    cloud = voxel_downsample(cloud, voxel)

    pts = cloud.positions
    if len(pts) > 1:
        k = min(4, len(pts))
        dist, _ = cKDTree(pts).query(pts, k=k)
        nn = np.sqrt(np.mean(dist[:, 1:] ** 2, axis=1))
        nn = np.maximum(nn, 1e-3 * voxel)
    else:
        nn = np.full(len(pts), voxel)
    g = Gaussians.isotropic(pts, nn, np.clip(cloud.colors, 0.0, 1.0), INIT_OPACITY)
    f = int(n_frames if n_frames is not None else videos.shape[1])
    center = pts.mean(axis=0)
    kwargs = {"scale": extent, "center": center, "seed": seed}
    kwargs.update(deformation_kwargs or {})
    return SceneState(g, DeformationField(f, **kwargs), extent)
