"""Closed-loop synthetic multi-view scenes rendered with the splat rasterizer."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InputError
from ..geometry import CameraPose, DepthMap, load_cameras, look_at, save_cameras
from ..io import load_arrays, save_arrays
from ..splat.gaussians import Gaussians, logit
from ..splat.render import render_gaussians

DEPTH_VALID_ALPHA = 0.5


@dataclass
class SynthConfig:
    """Knobs of the synthetic scene generator.

    ``motion`` scales the per-cluster displacement over the whole clip (world
    units); ``motion = 0`` gives a static scene.
    """

    n_views: int = 6
    width: int = 64
    height: int = 64
    n_frames: int = 8
    n_clusters: tuple[int, int] = (2, 5)
    n_gaussians: tuple[int, int] = (50, 500)
    rig_radius: float = 4.0
    rig_height: float = 1.2
    azimuth_jitter_deg: float = 10.0
    radius_jitter: float = 0.1
    focal: float = 72.0
    content_radius: float = 0.7
    cluster_spread: float = 0.22
    gaussian_scale: tuple[float, float] = (0.04, 0.09)
    opacity: tuple[float, float] = (0.75, 0.95)
    motion: float = 0.3

    def validate(self) -> None:
        if self.n_views < 2:
            raise InputError("a rig needs at least two views")
        if not (8 <= self.width <= 128 and 8 <= self.height <= 128):
            raise InputError("resolution must lie between 8 and 128 pixels")
        if not 1 <= self.n_frames <= 16:
            raise InputError("n_frames must lie in 1..16")
        lo, hi = self.n_clusters
        if not 1 <= lo <= hi:
            raise InputError("invalid cluster count range")
        lo, hi = self.n_gaussians
        if not 1 <= lo <= hi:
            raise InputError("invalid Gaussian count range")
        if self.motion < 0 or self.focal <= 0 or self.rig_radius <= 0:
            raise InputError("motion, focal length and rig radius must be non-negative/positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown scene config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SyntheticScene:
    """Camera rig plus Gaussian content whose clusters translate at constant speed."""

    rig: list[CameraPose]
    gaussians: Gaussians
    cluster: np.ndarray
    velocity: np.ndarray  # (n_clusters, 3), world units per frame
    n_frames: int

    def gaussians_at(self, t: int) -> Gaussians:
        """Content at 1-based timestamp ``t``."""
        if not 1 <= t <= self.n_frames:
            raise InputError(f"timestamp must lie in 1..{self.n_frames}")
        g = self.gaussians.subset(slice(None))
        g.means = g.means + (t - 1) * self.velocity[self.cluster]
        return g

    def render(self, cam: CameraPose, t: int):
        return render_gaussians(self.gaussians_at(t), cam)


def make_rig(rng: np.random.Generator, cfg: SynthConfig) -> list[CameraPose]:
    cams = []
    base = rng.uniform(0, 2 * math.pi)
    for v in range(cfg.n_views):
        az = base + 2 * math.pi * v / cfg.n_views + math.radians(rng.uniform(-cfg.azimuth_jitter_deg, cfg.azimuth_jitter_deg))
        r = cfg.rig_radius * (1 + rng.uniform(-cfg.radius_jitter, cfg.radius_jitter))
        h = cfg.rig_height * (1 + rng.uniform(-cfg.radius_jitter, cfg.radius_jitter))
        eye = np.array([r * math.cos(az), -h, r * math.sin(az)])
        cams.append(
            look_at(eye, np.zeros(3), fx=cfg.focal, fy=cfg.focal, cx=cfg.width / 2, cy=cfg.height / 2, width=cfg.width, height=cfg.height)
        )
    return cams


def make_content(rng: np.random.Generator, cfg: SynthConfig) -> tuple[Gaussians, np.ndarray, np.ndarray]:
    k = int(rng.integers(cfg.n_clusters[0], cfg.n_clusters[1] + 1))
    n = int(rng.integers(max(cfg.n_gaussians[0], k), cfg.n_gaussians[1] + 1))
    cluster = np.sort(rng.integers(0, k, n))
    cluster[:k] = np.arange(k)  # every cluster gets at least one Gaussian
    cluster = np.sort(cluster)
    centers = rng.standard_normal((k, 3))
    centers *= cfg.content_radius * rng.uniform(0.3, 1.0, (k, 1)) / np.linalg.norm(centers, axis=1, keepdims=True)
    palette = rng.uniform(0.15, 0.95, (k, 3))
    means = centers[cluster] + cfg.cluster_spread * rng.standard_normal((n, 3))
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    scales = np.log(rng.uniform(*cfg.gaussian_scale, (n, 3)))
    opacity = rng.uniform(*cfg.opacity, n)
    colors = np.clip(palette[cluster] + 0.04 * rng.standard_normal((n, 3)), 0.0, 1.0)
    direction = rng.standard_normal((k, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    steps = max(cfg.n_frames - 1, 1)
    velocity = direction * cfg.motion / steps
    return Gaussians(means, q, scales, logit(opacity), colors), cluster, velocity


def build_scene(seed: int, cfg: SynthConfig) -> SyntheticScene:
    cfg.validate()
    rng = np.random.default_rng(seed)
    rig = make_rig(rng, cfg)
    g, cluster, velocity = make_content(rng, cfg)
    return SyntheticScene(rig, g, cluster, velocity, cfg.n_frames)


@dataclass
class SceneBundle:
    """Ground-truth videos, depths and cameras for one synthetic scene.

    ``depths`` is ``(V, f, H, W)`` with zeros where the accumulated opacity is
    below one half (no reliable surface).
    """

    frames: np.ndarray
    depths: np.ndarray
    cams: list[CameraPose]
    meta: dict = field(default_factory=dict)
    scene: SyntheticScene | None = None

    @property
    def n_views(self) -> int:
        return self.frames.shape[0]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]

    def depth_map(self, v: int, t: int) -> DepthMap:
        d = self.depths[v, t]
        return DepthMap(np.where(d > 0, d, 1.0), d > 0)

    def depth_maps(self, v: int) -> list[DepthMap]:
        return [self.depth_map(v, t) for t in range(self.n_frames)]

    def checksums(self) -> dict[str, str]:
        return {
            "frames": hashlib.sha256(np.ascontiguousarray(self.frames).tobytes()).hexdigest(),
            "depths": hashlib.sha256(np.ascontiguousarray(self.depths).tobytes()).hexdigest(),
        }

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        arrays = {"frames": self.frames, "depths": self.depths}
        if self.scene is not None:
            g = self.scene.gaussians
            arrays.update({f"content.{k}": v for k, v in g.arrays().items()})
            arrays["content.cluster"] = self.scene.cluster.astype(np.float64)
            arrays["content.velocity"] = self.scene.velocity
        save_arrays(d / "bundle.bin", arrays, {"kind": "scene_bundle", **self.meta})
        save_cameras(d / "cameras.json", self.cams)
        (d / "meta.json").write_text(json.dumps({**self.meta, "checksums": self.checksums()}, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "SceneBundle":
        d = Path(directory)
        if not (d / "bundle.bin").exists():
            raise InputError(f"{d}: no bundle.bin found")
        arrays, meta = load_arrays(d / "bundle.bin")
        if meta.get("kind") != "scene_bundle":
            raise InputError(f"{d}: not a scene bundle")
        meta.pop("kind")
        cams = load_cameras(d / "cameras.json")
        scene = None
        if "content.means" in arrays:
            g = Gaussians(**{k: arrays[f"content.{k}"] for k in ("means", "quats", "log_scales", "opacity_logits", "colors")})
            scene = SyntheticScene(cams, g, arrays["content.cluster"].astype(np.int64), arrays["content.velocity"], arrays["frames"].shape[1])
        return cls(arrays["frames"], arrays["depths"], cams, meta, scene)


def synth_scene(seed: int = 7, config: SynthConfig | dict | None = None) -> SceneBundle:
    """Render ground-truth frames and depths of every rig view at every timestamp."""
    cfg = config if isinstance(config, SynthConfig) else SynthConfig.from_dict(config or {})
    cfg.validate()
    scene = build_scene(seed, cfg)
    V, f = cfg.n_views, cfg.n_frames
    frames = np.zeros((V, f, cfg.height, cfg.width, 3))
    depths = np.zeros((V, f, cfg.height, cfg.width))
    for t in range(1, f + 1):
        g = scene.gaussians_at(t)
        for v, cam in enumerate(scene.rig):
            img, depth, alpha = render_gaussians(g, cam)
            frames[v, t - 1] = img
            depths[v, t - 1] = np.where(alpha >= DEPTH_VALID_ALPHA, depth, 0.0)
    meta = {"seed": int(seed), "config": cfg.to_dict(), "config_hash": cfg.digest(), "n_gaussians": len(scene.gaussians)}
    return SceneBundle(frames, depths, scene.rig, meta, scene)
