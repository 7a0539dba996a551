"""Training a multi-view velocity field on synthetic scenes.

Each example pairs one rig camera (the reference) with a random pose on the
interpolated camera loop.  The clean latent stacks the two ground-truth
videos; the conditioning is the reference video plus the projection of its
depth into the target pose, all pooled to the model resolution.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import InputError
from ..flow import forward_interpolate, target_velocity
from ..geometry import interpolate_trajectory
from ..model import Conditioning, VelocityField, area_downsample, build_conditioning, encode_frames
from ..optim import Adam
from .synth import SynthConfig, synth_scene

BENCHMARK_SEED = 7


@dataclass
class PriorConfig:
    n_scenes: int = 16
    samples_per_scene: int = 6
    downsample: int = 4
    d: int = 48
    n_blocks: int = 2
    n_heads: int = 4
    patch_size: int = 4
    steps: int = 1500
    lr: float = 1e-3
    first_seed: int = 1000
    trajectory_samples: int = 120
    scene: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown prior settings: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PriorExample:
    z0: np.ndarray
    cond: Conditioning


def scene_seeds(cfg: PriorConfig, exclude=(BENCHMARK_SEED,)) -> list[int]:
    seeds = []
    s = cfg.first_seed
    while len(seeds) < cfg.n_scenes:
        if s not in exclude:
            seeds.append(s)
        s += 1
    return seeds


def make_examples(cfg: PriorConfig, seed: int = 0, exclude=(BENCHMARK_SEED,)) -> list[PriorExample]:
    rng = np.random.default_rng(seed)
    k = cfg.downsample
    out = []
    for s in scene_seeds(cfg, exclude):
        bundle = synth_scene(s, SynthConfig.from_dict(cfg.scene))
        traj = interpolate_trajectory(bundle.cams, cfg.trajectory_samples)
        for _ in range(cfg.samples_per_scene):
            ref = int(rng.integers(bundle.n_views))
            cam = traj[int(rng.integers(len(traj)))]
            target = np.stack([bundle.scene.render(cam, t)[0] for t in range(1, bundle.n_frames + 1)])
            ref_frames = bundle.frames[ref]
            cond = build_conditioning(ref_frames, bundle.depth_maps(ref), bundle.cams[ref], [cam], downsample=k)
            z0 = np.stack([encode_frames(area_downsample(ref_frames, k)), encode_frames(area_downsample(target, k))])
            out.append(PriorExample(z0, cond))
    return out


def train_prior(cfg: PriorConfig | None = None, seed: int = 0, *, examples: list[PriorExample] | None = None, callback=None):
    """Flow-matching training with Adam on synthetic examples; returns ``(model, losses)``.

    The losses are per-element mean squared velocity errors, one per step.
    """
    cfg = cfg or PriorConfig()
    examples = examples if examples is not None else make_examples(cfg, seed)
    if not examples:
        raise InputError("no training examples")
    model = VelocityField(d=cfg.d, n_blocks=cfg.n_blocks, n_heads=cfg.n_heads, patch_size=cfg.patch_size, seed=seed)
    opt = Adam(cfg.lr, eps=1e-8)
    rng = np.random.default_rng(seed + 1)
    losses = []
    start = time.perf_counter()
    for step in range(cfg.steps):
        ex = examples[int(rng.integers(len(examples)))]
        tau = float(rng.uniform())
        eps = rng.standard_normal(ex.z0.shape)
        z = forward_interpolate(ex.z0, eps, tau)
        v = model.forward(z, tau, ex.cond)
        resid = v.data - target_velocity(ex.z0, eps)
        n = resid.size
        grads, _ = model.backward(2.0 * resid / n)
        opt.step(model.params, grads)
        losses.append(float(np.sum(resid * resid) / n))
        if callback is not None:
            callback(step, losses[-1])
    model.train_seconds = time.perf_counter() - start
    return model, losses
