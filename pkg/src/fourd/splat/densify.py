"""Adaptive density control: clone, split and prune canonical Gaussians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import MAX_GAUSSIANS, Gaussians, SceneState, sigmoid

PRUNE_TRIGGER = 80_000
MIN_OPACITY = 0.015


@dataclass
class DensifyStats:
    cloned: int
    split: int
    pruned: int
    count: int


def _rotation_matrices(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=1,
    ).reshape(-1, 3, 3)  # fmt: skip


def densify_prune(
    scene: SceneState,
    grad_threshold: float = 2e-4,
    *,
    rng: np.random.Generator | None = None,
    max_gaussians: int = MAX_GAUSSIANS,
    prune_trigger: int = PRUNE_TRIGGER,
    min_opacity: float = MIN_OPACITY,
    percent_dense: float = 0.01,
) -> DensifyStats:
    """Grow where the average screen-space gradient is large, then prune faint Gaussians.

    Small Gaussians (largest scale at most ``percent_dense * extent``) are
    cloned in place; larger ones are replaced by two samples drawn from their
    own distribution with scales divided by 1.6.  Growth stops at
    ``max_gaussians``; when several candidates compete for the remaining room
    the ones with the largest gradient win.  Pruning only happens when the
    count exceeds ``prune_trigger``.  The scene is modified in place.
    """
    rng = rng or np.random.default_rng(0)
    g = scene.gaussians
    n = len(g)
    avg = scene.grad_accum / np.maximum(scene.grad_count, 1.0)
    cand = np.flatnonzero(avg >= grad_threshold)
    room = max(0, max_gaussians - n)
    if len(cand) > room:
        keep = np.argsort(-avg[cand], kind="stable")[:room]
        cand = np.sort(cand[keep])

    big = np.max(g.log_scales[cand], axis=1) > np.log(percent_dense * scene.extent) if len(cand) else np.zeros(0, bool)
    clone_idx = cand[~big]
    split_idx = cand[big]

    # splits: two samples from the parent's distribution replace the parent
    parents = np.repeat(split_idx, 2)
    samples = g.subset(parents)
    if len(parents):
        R = _rotation_matrices(samples.quats)
        local = rng.standard_normal((len(parents), 3)) * np.exp(samples.log_scales)
        samples.means = samples.means + np.einsum("nij,nj->ni", R, local)
        samples.log_scales = samples.log_scales - np.log(1.6)

    survivors = np.setdiff1d(np.arange(n), split_idx)
    rows = np.concatenate([survivors, clone_idx, parents]).astype(np.int64)
    fresh = np.zeros(len(rows), dtype=bool)
    fresh[len(survivors) :] = True
    scene.gaussians = Gaussians.concat([g.subset(survivors), g.subset(clone_idx), samples])

    pruned = 0
    if len(scene.gaussians) > prune_trigger:
        alive = sigmoid(scene.gaussians.opacity_logits) >= min_opacity
        pruned = int(np.sum(~alive))
        if pruned:
            scene.gaussians = scene.gaussians.subset(alive)
            rows, fresh = rows[alive], fresh[alive]

    scene.reindex(rows, fresh)
    scene.reset_accumulators()
    return DensifyStats(len(clone_idx), len(split_idx), pruned, len(scene.gaussians))
