"""Pinhole cameras, depth lifting, point-cloud splatting and camera trajectories.

Conventions used throughout the package:

* quaternions are ``[w, x, y, z]`` and rotate world coordinates into the camera
  frame (``x_cam = R @ x_world + t``);
* camera axes follow OpenCV (x right, y down, z forward);
* pixel ``(col, row)`` covers ``[col, col+1) x [row, row+1)`` and its center is
  at ``(col + 0.5, row + 0.5)``;
* the horizontal plane of the world is x-z, so azimuths are measured there.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import solve_banded

from .errors import InputError

__all__ = [
    "CameraPose",
    "DepthMap",
    "PointCloud",
    "RenderedGuide",
    "Trajectory",
    "quat_to_matrix",
    "matrix_to_quat",
    "quat_multiply",
    "look_at",
    "relative_pose",
    "back_project",
    "render_point_cloud",
    "sort_by_azimuth",
    "natural_cubic_spline",
    "spline_positions",
    "slerp",
    "interpolate_trajectory",
    "trajectory_at",
    "save_cameras",
    "load_cameras",
]


# ------------------------------------------------------------------ rotations
def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Rotation matrix to a unit quaternion with non-negative w (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


# ---------------------------------------------------------------- data types
@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise InputError(f"camera quaternion is not unit-norm (|q|={np.linalg.norm(q)!r})")
        if not (self.fx > 0 and self.fy > 0):
            raise InputError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InputError("image size must be at least 1x1")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def extrinsic(self) -> np.ndarray:
        """3x4 world-to-camera matrix ``[R | t]``."""
        return np.hstack([self.R, self.translation[:, None]])

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.translation

    def scaled(self, factor: float) -> "CameraPose":
        """Same extrinsics, intrinsics and image size scaled by ``factor``."""
        return CameraPose(
            self.rotation,
            self.translation,
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            max(1, int(round(self.width * factor))),
            max(1, int(round(self.height * factor))),
        )

    def to_dict(self) -> dict:
        return {
            "quaternion": [float(v) for v in self.rotation],
            "translation": [float(v) for v in self.translation],
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        try:
            return cls(
                np.asarray(d["quaternion"], dtype=np.float64),
                np.asarray(d["translation"], dtype=np.float64),
                float(d["fx"]),
                float(d["fy"]),
                float(d["cx"]),
                float(d["cy"]),
                int(d["width"]),
                int(d["height"]),
            )
        except KeyError as exc:
            raise InputError(f"camera record missing field {exc}") from None

    @classmethod
    def from_extrinsic(cls, R, t, fx, fy, cx, cy, width, height) -> "CameraPose":
        return cls(matrix_to_quat(R), np.asarray(t, dtype=np.float64), fx, fy, cx, cy, width, height)


@dataclass
class DepthMap:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise InputError("depth values and validity mask differ in shape")
        if np.any(self.values[self.valid] <= 0):
            raise InputError("valid depths must be positive")


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.colors):
            raise InputError("point positions and colors differ in length")

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    @classmethod
    def merge(cls, clouds: Sequence["PointCloud"]) -> "PointCloud":
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
        )


@dataclass
class RenderedGuide:
    image: np.ndarray
    coverage: np.ndarray


@dataclass
class Trajectory:
    poses: list[CameraPose]
    knot_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.knot_times = np.asarray(self.knot_times, dtype=np.float64)
        if len(self.knot_times) != len(self.poses):
            raise InputError("one sample time per trajectory pose is required")
        if np.any(np.diff(self.knot_times) <= 0):
            raise InputError("trajectory sample times must increase strictly")

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i) -> CameraPose:
        return self.poses[i]


def look_at(eye, target, up=(0.0, -1.0, 0.0), *, fx, fy, cx, cy, width, height) -> CameraPose:
    """Camera at ``eye`` whose optical axis points at ``target``.

    ``up`` is the world direction that should appear upward in the image; with
    OpenCV axes that is the negative camera y axis.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, -np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-12:
        raise InputError("look_at: viewing direction is parallel to up")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])  # rows are the camera axes in world coordinates
    return CameraPose.from_extrinsic(R, -R @ eye, fx, fy, cx, cy, width, height)


# ----------------------------------------------------------------- relative
def relative_pose(reference: CameraPose, target: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Rigid transform taking reference-camera coordinates to target-camera coordinates.

    Composing it with the reference extrinsic gives the target extrinsic:
    ``R_rel @ R_ref = R_tgt`` and ``R_rel @ t_ref + t_rel = t_tgt``.
    """
    R_ref, R_tgt = reference.R, target.R
    R = R_tgt @ R_ref.T
    t = target.translation - R @ reference.translation
    return R, t


# --------------------------------------------------------- depth and splats
def _pixel_rays(pose: CameraPose, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    x = (cols + 0.5 - pose.cx) / pose.fx
    y = (rows + 0.5 - pose.cy) / pose.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def back_project(depth: DepthMap, image: np.ndarray, pose: CameraPose) -> PointCloud:
    """Lift every valid depth pixel to a colored world-space point."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != depth.values.shape:
        raise InputError(f"image {image.shape[:2]} and depth {depth.values.shape} differ in size")
    rows, cols = np.nonzero(depth.valid)
    if len(rows) == 0:
        return PointCloud.empty()
    cam_pts = _pixel_rays(pose, rows.astype(np.float64), cols.astype(np.float64))
    cam_pts *= depth.values[rows, cols][:, None]
    world = (cam_pts - pose.translation) @ pose.R
    return PointCloud(world, image[rows, cols].reshape(-1, 3))


def render_point_cloud(pc: PointCloud, cam: CameraPose) -> RenderedGuide:
    """Perspective-splat points into ``cam`` with a nearest-depth z-buffer.

    Each point lands on exactly one pixel; points behind the camera are culled.
    Depth ties go to the lowest point index.
    """
    H, W = cam.height, cam.width
    image = np.zeros((H, W, 3))
    coverage = np.zeros((H, W), dtype=bool)
    if len(pc) == 0:
        return RenderedGuide(image, coverage)
    p = cam.world_to_camera(pc.positions)
    z = p[:, 2]
    front = z > 0
    idx = np.flatnonzero(front)
    z = z[front]
    u = cam.fx * p[front, 0] / z + cam.cx
    v = cam.fy * p[front, 1] / z + cam.cy
    col = np.floor(u)
    row = np.floor(v)
    inside = (col >= 0) & (col < W) & (row >= 0) & (row < H)
    idx, z = idx[inside], z[inside]
    pix = row[inside].astype(np.int64) * W + col[inside].astype(np.int64)
    if len(pix) == 0:
        return RenderedGuide(image, coverage)
    order = np.lexsort((idx, z, pix))
    pix_sorted = pix[order]
    first = np.flatnonzero(np.r_[True, pix_sorted[1:] != pix_sorted[:-1]])
    winners = idx[order[first]]
    hit = pix_sorted[first]
    image.reshape(-1, 3)[hit] = pc.colors[winners]
    coverage.reshape(-1)[hit] = True
    return RenderedGuide(image, coverage)


# ----------------------------------------------------------- trajectories
def sort_by_azimuth(poses: Sequence[CameraPose]) -> list[CameraPose]:
    """Order cameras by ascending azimuth of their centers around the rig center."""
    if len(poses) < 2:
        raise InputError("azimuth sorting needs at least two cameras")
    centers = np.array([p.center for p in poses])
    c = centers.mean(axis=0)
    dx = centers[:, 0] - c[0]
    dz = centers[:, 2] - c[2]
    scale = max(1.0, float(np.abs(centers).max()))
    if np.any(np.hypot(dx, dz) <= 1e-12 * scale):
        raise InputError("a camera sits on the scene center; its azimuth is undefined")
    phi = np.arctan2(dz, dx)
    return [poses[i] for i in np.argsort(phi, kind="stable")]


def natural_cubic_spline(values: np.ndarray):
    """C2 interpolant through ``values[k]`` at ``t = k`` with zero end curvature.

    Returns a function evaluating the spline (and its derivatives up to 2) at
    arbitrary ``t`` in ``[0, K]``.
    """
    y = np.asarray(values, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    K = len(y) - 1
    if K < 1:
        raise InputError("a spline needs at least two knots")
    M = np.zeros_like(y)
    if K >= 2:
        n = K - 1
        ab = np.zeros((3, n))
        ab[0, 1:] = 1.0
        ab[1, :] = 4.0
        ab[2, :-1] = 1.0
        rhs = 6.0 * (y[2:] - 2.0 * y[1:-1] + y[:-2])
        M[1:-1] = solve_banded((1, 1), ab, rhs)

    def evaluate(t, derivative: int = 0) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        i = np.clip(np.floor(t).astype(np.int64), 0, K - 1)
        u = (t - i)[..., None]
        a, b = y[i], y[i + 1]
        ma, mb = M[i], M[i + 1]
        if derivative == 0:
            return (1 - u) * a + u * b + (((1 - u) ** 3 - (1 - u)) * ma + (u**3 - u) * mb) / 6.0
        if derivative == 1:
            return b - a + ((1 - 3 * (1 - u) ** 2) * ma + (3 * u**2 - 1) * mb) / 6.0
        if derivative == 2:
            return (1 - u) * ma + u * mb
        raise ValueError("derivative must be 0, 1 or 2")

    return evaluate


def _closed_loop(values: np.ndarray) -> np.ndarray:
    return np.concatenate([values, values[:1]], axis=0)


def spline_positions(sorted_centers, n_samples: int) -> np.ndarray:
    """Sample the closed natural cubic spline through ``sorted_centers``.

    The first center is appended to close the loop; samples are uniform on
    ``[0, K]`` with ``K = len(sorted_centers)``.
    """
    centers = np.asarray(sorted_centers, dtype=np.float64).reshape(-1, 3)
    if len(centers) < 2:
        raise InputError("need at least two centers")
    if n_samples < 2:
        raise InputError("n_samples must be at least 2")
    K = len(centers)
    t = K * np.arange(n_samples) / (n_samples - 1)
    return natural_cubic_spline(_closed_loop(centers))(t)


def slerp(qa, qb, alpha: float) -> np.ndarray:
    qa = np.asarray(qa, dtype=np.float64)
    qb = np.asarray(qb, dtype=np.float64)
    dot = float(qa @ qb)
    if dot < 0.0:
        qb = -qb
        dot = -dot
    theta = math.acos(min(1.0, dot))
    if theta < 1e-6:
        q = (1.0 - alpha) * qa + alpha * qb
    else:
        s = math.sin(theta)
        q = math.sin((1.0 - alpha) * theta) / s * qa + math.sin(alpha * theta) / s * qb
    return q / np.linalg.norm(q)


def trajectory_at(poses: Sequence[CameraPose], times) -> Trajectory:
    """Evaluate the closed camera loop through ``poses`` at loop parameters ``times``.

    Knot ``k`` (``k = 0..K-1``) is the k-th camera after azimuth sorting and
    ``t = K`` closes the loop back onto knot 0.
    """
    centers0 = np.array([p.center for p in poses])
    if len(poses) >= 2 and np.allclose(centers0, centers0[0], rtol=0.0, atol=1e-12):
        # every camera at one spot: the azimuth is undefined but the loop is a point
        ordered = list(poses)
    else:
        ordered = sort_by_azimuth(poses)
    K = len(ordered)
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    if np.any(times < 0) or np.any(times > K):
        raise InputError(f"trajectory parameters must lie in [0, {K}]")
    spline = natural_cubic_spline(_closed_loop(np.array([p.center for p in ordered])))
    centers = spline(times)
    quats = [p.rotation for p in ordered]
    quats.append(quats[0])
    out = []
    for t, c in zip(times, centers):
        i = min(int(math.floor(t)), K - 1)
        q = slerp(quats[i], quats[i + 1], t - i)
        src = ordered[int(math.floor(t + 0.5)) % K]
        R = quat_to_matrix(q)
        out.append(CameraPose(q, -R @ c, src.fx, src.fy, src.cx, src.cy, src.width, src.height))
    return Trajectory(out, times)


def interpolate_trajectory(poses: Sequence[CameraPose], n_samples: int = 120) -> Trajectory:
    """``n_samples`` poses spaced uniformly along the closed camera loop."""
    if n_samples < 2:
        raise InputError("n_samples must be at least 2")
    K = len(poses)
    if K < 2:
        raise InputError("need at least two poses")
    return trajectory_at(poses, K * np.arange(n_samples) / (n_samples - 1))


# ------------------------------------------------------------------- files
def save_cameras(path, poses: Sequence[CameraPose]) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in poses], indent=1))


def load_cameras(path) -> list[CameraPose]:
    try:
        records = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(records, list):
        raise InputError(f"{path}: expected a JSON array of cameras")
    return [CameraPose.from_dict(r) for r in records]
