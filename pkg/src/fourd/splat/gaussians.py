"""Canonical Gaussians, the time-conditioned deformation field and scene state."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..errors import InputError
from ..optim import Adam

MAX_GAUSSIANS = 120_000
PARAM_KEYS = ("means", "quats", "log_scales", "opacity_logits", "colors")


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class Gaussians:
    """Structure-of-arrays storage for ``n`` canonical Gaussians.

    ``quats`` are ``[w, x, y, z]`` (normalized only when a covariance is
    built), ``log_scales`` are per-axis log standard deviations and colors are
    flat RGB.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if np.any(np.linalg.norm(self.quats, axis=1) == 0):
            raise InputError("zero quaternion")

    def __len__(self) -> int:
        return len(self.means)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_KEYS}

    def subset(self, rows) -> "Gaussians":
        return Gaussians(**{k: v[rows] for k, v in self.arrays().items()})

    @classmethod
    def concat(cls, parts) -> "Gaussians":
        return cls(**{k: np.concatenate([getattr(p, k) for p in parts]) for k in PARAM_KEYS})

    @classmethod
    def isotropic(cls, means, sigma, colors, opacity=0.1) -> "Gaussians":
        means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = len(means)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
        quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        return cls(means, quats, np.repeat(np.log(sigma)[:, None], 3, axis=1), np.full(n, float(logit(opacity))), colors)


# ------------------------------------------------------------- deformation
def _frequency_features(x: ad.Tensor, n_freq: int) -> ad.Tensor:
    parts = [x]
    for k in range(n_freq):
        arg = x * (math.pi * 2.0**k)
        parts += [_sin(arg), _cos(arg)]
    return ad.concat(parts, axis=-1)


def _sin(x: ad.Tensor) -> ad.Tensor:
    xd = x.data
    return ad.custom(np.sin(xd), (x,), lambda g: (g * np.cos(xd),))


def _cos(x: ad.Tensor) -> ad.Tensor:
    xd = x.data
    return ad.custom(np.cos(xd), (x,), lambda g: (-g * np.sin(xd),))


def time_encoding(t: int, n_frames: int, n_freq: int = 4) -> np.ndarray:
    """Sinusoidal features of ``t / n_frames``."""
    x = np.array([t / n_frames])
    feats = [x]
    for k in range(n_freq):
        feats += [np.sin(math.pi * 2.0**k * x), np.cos(math.pi * 2.0**k * x)]
    return np.concatenate(feats)


class DeformationField:
    """MLP ``(PE(mu), PE(t / f)) -> (d_mu, d_q, d_s)``.

    Positions are divided by ``scale`` before encoding so the frequencies are
    relative to the scene size.  The output layer starts at zero, so a new
    field is the identity deformation.
    """

    OUT = 10

    def __init__(self, n_frames: int, *, hidden: int = 64, depth: int = 2, pos_freq: int = 4, time_freq: int = 4, scale: float = 1.0, center=(0.0, 0.0, 0.0), seed: int = 0):
        if n_frames < 1:
            raise InputError("n_frames must be positive")
        self.n_frames = int(n_frames)
        self.hidden, self.depth = hidden, depth
        self.pos_freq, self.time_freq = pos_freq, time_freq
        self.scale = float(scale)
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        rng = np.random.default_rng(seed)
        n_in = 3 * (1 + 2 * pos_freq) + (1 + 2 * time_freq)
        sizes = [n_in] + [hidden] * depth + [self.OUT]
        self.params: dict[str, np.ndarray] = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            s = math.sqrt(6.0 / (a + b))
            self.params[f"deform.l{i}.w"] = np.zeros((a, b)) if last else rng.uniform(-s, s, (a, b))
            self.params[f"deform.l{i}.b"] = np.zeros(b)
        self.n_layers = len(sizes) - 1

    def config(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "hidden": self.hidden,
            "depth": self.depth,
            "pos_freq": self.pos_freq,
            "time_freq": self.time_freq,
            "scale": self.scale,
            "center": [float(c) for c in self.center],
        }

    def check_time(self, t) -> int:
        if isinstance(t, (bool, np.bool_)) or int(t) != t or not 1 <= int(t) <= self.n_frames:
            raise InputError(f"timestamp must be an integer in 1..{self.n_frames}, got {t!r}")
        return int(t)

    def forward(self, means: ad.Tensor, t: int, P: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
        """``(n, 10)`` offsets ``[d_mu(3), d_q(4), d_s(3)]`` at integer time ``t``."""
        t = self.check_time(t)
        P = P or {k: ad.Tensor(v) for k, v in self.params.items()}
        means = ad.as_tensor(means)
        n = means.shape[0]
        x = (means - self.center) * (1.0 / self.scale)
        te = np.broadcast_to(time_encoding(t, self.n_frames, self.time_freq), (n, 1 + 2 * self.time_freq))
        h = ad.concat([_frequency_features(x, self.pos_freq), ad.Tensor(np.array(te))], axis=1)
        for i in range(self.n_layers):
            h = h @ P[f"deform.l{i}.w"] + P[f"deform.l{i}.b"]
            if i < self.n_layers - 1:
                h = ad.silu(h)
        return h

    def offsets(self, means: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        out = self.forward(ad.Tensor(np.asarray(means, dtype=np.float64)), t).data
        return out[:, :3], out[:, 3:7], out[:, 7:]


def apply_offsets(means, quats, log_scales, out):
    """Additive update of canonical parameters with network output columns."""
    return means + out[:, 0:3], quats + out[:, 3:7], log_scales + out[:, 7:10]


# --------------------------------------------------------------- scene state
@dataclass
class SceneState:
    """Canonical Gaussians, their deformation field and optimization bookkeeping.

    ``grad_accum``/``grad_count`` hold, per Gaussian, the summed norm of the
    screen-space mean gradient and the number of renders it was visible in.
    """

    gaussians: Gaussians
    deformation: DeformationField
    extent: float = 1.0
    grad_accum: np.ndarray = field(default=None)  # type: ignore[assignment]
    grad_count: np.ndarray = field(default=None)  # type: ignore[assignment]
    optimizer: Adam | None = None

    def __post_init__(self):
        n = len(self.gaussians)
        if n > MAX_GAUSSIANS:
            raise InputError(f"{n} Gaussians exceeds the cap of {MAX_GAUSSIANS}")
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_count is None:
            self.grad_count = np.zeros(n)

    def __len__(self) -> int:
        return len(self.gaussians)

    @property
    def n_frames(self) -> int:
        return self.deformation.n_frames

    def parameters(self) -> dict[str, np.ndarray]:
        """All trainable arrays by name (views, so in-place updates stick)."""
        out = dict(self.gaussians.arrays())
        out.update(self.deformation.params)
        return out

    def reset_accumulators(self) -> None:
        self.grad_accum = np.zeros(len(self))
        self.grad_count = np.zeros(len(self))

    def reindex(self, rows: np.ndarray, fresh: np.ndarray | None = None) -> None:
        """Rebuild per-Gaussian optimizer rows after the Gaussian set was resized.

        ``rows[i]`` is the old row that new row ``i`` derives from; rows flagged
        in ``fresh`` start with zero moments.
        """
        if self.optimizer is None:
            return
        for k in PARAM_KEYS:
            self.optimizer.select_rows(k, rows)
            if fresh is not None and k in self.optimizer.m:
                self.optimizer.m[k][fresh] = 0.0
                self.optimizer.v[k][fresh] = 0.0

    def copy(self) -> "SceneState":
        d = DeformationField.__new__(DeformationField)
        d.__dict__.update(self.deformation.__dict__)
        d.params = {k: v.copy() for k, v in self.deformation.params.items()}
        g = Gaussians(**{k: v.copy() for k, v in self.gaussians.arrays().items()})
        return SceneState(g, d, self.extent, self.grad_accum.copy(), self.grad_count.copy(), None)

    def save(self, path) -> None:
        from ..io import save_arrays

        arrays = {f"gauss.{k}": v for k, v in self.gaussians.arrays().items()}
        arrays.update(self.deformation.params)
        save_arrays(path, arrays, {"kind": "scene_state", "extent": self.extent, "deformation": self.deformation.config()})

    @classmethod
    def load(cls, path) -> "SceneState":
        from ..io import load_arrays

        arrays, meta = load_arrays(path)
        if meta.get("kind") != "scene_state":
            raise InputError(f"{path}: not a scene checkpoint")
        cfg = dict(meta["deformation"])
        d = DeformationField(cfg.pop("n_frames"), **cfg)
        for k in d.params:
            d.params[k] = arrays[k]
        g = Gaussians(**{k: arrays[f"gauss.{k}"] for k in PARAM_KEYS})
        return cls(g, d, float(meta["extent"]))


@dataclass
class DeformedGaussians:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray


def deform(scene: SceneState, t: int) -> DeformedGaussians:
    """Canonical Gaussians moved to timestamp ``t`` (1-based); quaternions renormalized."""
    g = scene.gaussians
    out = scene.deformation.forward(ad.Tensor(g.means), t).data
    m, q, s = apply_offsets(g.means, g.quats, g.log_scales, out)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    return DeformedGaussians(m, q, s, g.opacity, g.colors.copy())
