"""Fused time-view sparse attention.

Tokens live on an ``n_views x n_time x n_spatial`` grid (``n_time = 2f``: the
first ``f`` slots of every view hold target frames, the last ``f`` hold the
condition frames).  The mask is decided per (view, time) pair and every
spatial token of an allowed pair sees every spatial token of the other, so it
is stored as a ``(n_views*2f) x (n_views*2f)`` boolean matrix.

View indices are 0-based and view 0 is the reference (input) view.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .errors import InputError

NEG_FILL = -1e9


@dataclass(frozen=True)
class GridIndex:
    """Row-major token indexing: view slowest, then time, then spatial row, column."""

    n_views: int
    n_time: int
    n_spatial: int
    width: int = 1

    def __post_init__(self):
        if min(self.n_views, self.n_time, self.n_spatial, self.width) < 1:
            raise InputError("grid dimensions must be positive")
        if self.n_spatial % self.width:
            raise InputError("n_spatial must be a multiple of width")

    @property
    def height(self) -> int:
        return self.n_spatial // self.width

    @property
    def n_tokens(self) -> int:
        return self.n_views * self.n_time * self.n_spatial

    def flatten(self, v: int, t: int, p: int, q: int = 0) -> int:
        if not (0 <= v < self.n_views and 0 <= t < self.n_time and 0 <= p < self.height and 0 <= q < self.width):
            raise InputError(f"coordinate {(v, t, p, q)} outside grid {self}")
        return ((v * self.n_time + t) * self.height + p) * self.width + q

    def unflatten(self, i: int) -> tuple[int, int, int, int]:
        if not 0 <= i < self.n_tokens:
            raise InputError(f"flat index {i} outside [0, {self.n_tokens})")
        i, q = divmod(i, self.width)
        i, p = divmod(i, self.height)
        v, t = divmod(i, self.n_time)
        return v, t, p, q

    def coords(self) -> np.ndarray:
        """``(N, 4)`` array of ``(v, t, p, q)`` for every flat index."""
        i = np.arange(self.n_tokens)
        i, q = np.divmod(i, self.width)
        i, p = np.divmod(i, self.height)
        v, t = np.divmod(i, self.n_time)
        return np.stack([v, t, p, q], axis=1)


@dataclass(frozen=True, eq=False)
class TVMask:
    pair_mask: np.ndarray
    n_views: int
    f: int
    reference_view: int = 0
    _groups: dict = field(default_factory=dict, repr=False)

    @property
    def n_pairs(self) -> int:
        return self.n_views * 2 * self.f

    def allowed(self, v_i: int, t_i: int, v_j: int, t_j: int) -> bool:
        T = 2 * self.f
        return bool(self.pair_mask[v_i * T + t_i, v_j * T + t_j])

    def token_mask(self, grid: GridIndex) -> np.ndarray:
        """Dense ``N x N`` expansion (test/oracle use only)."""
        self._check_grid(grid)
        s = grid.n_spatial
        return np.repeat(np.repeat(self.pair_mask, s, axis=0), s, axis=1)

    def key_groups(self, n_spatial: int) -> list[np.ndarray]:
        """Flat key indices visible from each query pair, in ascending order."""
        if n_spatial not in self._groups:
            offs = np.arange(n_spatial)
            self._groups[n_spatial] = [
                (np.flatnonzero(row)[:, None] * n_spatial + offs).reshape(-1) for row in self.pair_mask
            ]
        return self._groups[n_spatial]

    def _check_grid(self, grid: GridIndex) -> None:
        if grid.n_views != self.n_views or grid.n_time != 2 * self.f:
            raise InputError(f"grid {grid} does not match mask ({self.n_views} views, f={self.f})")


def build_mask(
    n_views: int,
    f: int,
    *,
    intra_view: bool = True,
    intra_time: bool = True,
    cross_half: bool = True,
    reference_view: int = 0,
) -> TVMask:
    """Pair mask allowing same-view, same-time and target-to-reference-condition links.

    The cross-half clause links a target slot ``t < f`` of any view to slot
    ``t + f`` of the reference view, one way only.  Diagonal pairs are always
    allowed so that every query keeps at least one key.
    """
    if n_views < 1 or f < 1:
        raise InputError("n_views and f must be at least 1")
    if not 0 <= reference_view < n_views:
        raise InputError("reference_view outside [0, n_views)")
    T = 2 * f
    v = np.repeat(np.arange(n_views), T)
    t = np.tile(np.arange(T), n_views)
    m = np.eye(n_views * T, dtype=bool)
    if intra_view:
        m |= v[:, None] == v[None, :]
    if intra_time:
        m |= t[:, None] == t[None, :]
    if cross_half:
        m |= (t[:, None] < f) & (t[None, :] == t[:, None] + f) & (v[None, :] == reference_view)
    return TVMask(m, n_views, f, reference_view)


def mask_density(n_views: int, f: int) -> Fraction:
    """Closed-form density of the same-view/same-time part of the mask."""
    if n_views < 1 or f < 1:
        raise InputError("n_views and f must be at least 1")
    return Fraction(2 * f + n_views - 1, 2 * f * n_views)


def intra_pair_count(mask: TVMask) -> int:
    """Allowed pairs that share a view or a timestamp."""
    T = 2 * mask.f
    v = np.repeat(np.arange(mask.n_views), T)
    t = np.tile(np.arange(T), mask.n_views)
    shared = (v[:, None] == v[None, :]) | (t[:, None] == t[None, :])
    return int(np.count_nonzero(mask.pair_mask & shared))


def measured_density(mask: TVMask, *, include_cross_half: bool = False) -> Fraction:
    total = mask.n_pairs**2
    count = int(mask.pair_mask.sum()) if include_cross_half else intra_pair_count(mask)
    return Fraction(count, total)


def cross_half_edges(mask: TVMask) -> int:
    """Allowed pairs matched by the cross-half clause (whether or not another clause also fires)."""
    T = 2 * mask.f
    v = np.repeat(np.arange(mask.n_views), T)
    t = np.tile(np.arange(T), mask.n_views)
    clause = (t[:, None] < mask.f) & (t[None, :] == t[:, None] + mask.f) & (v[None, :] == mask.reference_view)
    return int(np.count_nonzero(mask.pair_mask & clause))


def mask_report(mask: TVMask) -> dict:
    return {
        "n_views": mask.n_views,
        "f": mask.f,
        "formula_density": float(mask_density(mask.n_views, mask.f)),
        "measured_density": float(measured_density(mask)),
        "measured_density_with_cross_half": float(measured_density(mask, include_cross_half=True)),
        "cross_half_edges": cross_half_edges(mask),
    }


def write_pbm(path, mask: np.ndarray) -> None:
    """Binary (P4) PBM; allowed entries are drawn black (bit = 1)."""
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    bits = np.packbits(m, axis=1)
    Path(path).write_bytes(f"P4\n{w} {h}\n".encode("ascii") + bits.tobytes())


def read_pbm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, rest = raw.split(b"\n", 2)
    if magic != b"P4":
        raise InputError(f"{path}: not a binary PBM")
    w, h = (int(x) for x in dims.split())
    bits = np.frombuffer(rest, dtype=np.uint8).reshape(h, -1)
    return np.unpackbits(bits, axis=1)[:, :w].astype(bool)


# ------------------------------------------------------------------ kernels
def _check_qkv(Q, K, V, n_tokens: int) -> None:
    if Q.shape != K.shape or Q.shape[:-1] != V.shape[:-1]:
        raise InputError(f"inconsistent Q/K/V shapes {Q.shape}, {K.shape}, {V.shape}")
    if Q.shape[-2] != n_tokens:
        raise InputError(f"expected {n_tokens} tokens, got {Q.shape[-2]}")


def _masked_forward(Q, K, V, mask: TVMask, grid: GridIndex):
    s = grid.n_spatial
    scale = 1.0 / np.sqrt(Q.shape[-1])
    out = np.empty(Q.shape[:-1] + V.shape[-1:], dtype=np.result_type(Q, V))
    probs = []
    for a, keys in enumerate(mask.key_groups(s)):
        rows = slice(a * s, (a + 1) * s)
        scores = (Q[..., rows, :] @ np.swapaxes(K[..., keys, :], -1, -2)) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        out[..., rows, :] = scores @ V[..., keys, :]
        probs.append(scores)
    return out, probs


def _masked_backward(g, Q, K, V, probs, mask: TVMask, grid: GridIndex):
    s = grid.n_spatial
    scale = 1.0 / np.sqrt(Q.shape[-1])
    dQ = np.zeros_like(Q)
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)
    for a, keys in enumerate(mask.key_groups(s)):
        rows = slice(a * s, (a + 1) * s)
        P = probs[a]
        gO = g[..., rows, :]
        dV[..., keys, :] += np.swapaxes(P, -1, -2) @ gO
        dP = gO @ np.swapaxes(V[..., keys, :], -1, -2)
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
        dQ[..., rows, :] = dS @ K[..., keys, :]
        dK[..., keys, :] += np.swapaxes(dS, -1, -2) @ Q[..., rows, :]
    return dQ, dK, dV


def masked_attention(Q, K, V, mask: TVMask, grid: GridIndex) -> np.ndarray:
    """Softmax attention restricted to the pairs allowed by ``mask``.

    Works block-by-block: each query pair gathers only its visible keys, so
    disallowed keys never enter the softmax.  Leading axes (heads) broadcast.
    """
    Q, K, V = (np.asarray(x) for x in (Q, K, V))
    mask._check_grid(grid)
    _check_qkv(Q, K, V, grid.n_tokens)
    return _masked_forward(Q, K, V, mask, grid)[0]


def dense_oracle_attention(Q, K, V, mask) -> np.ndarray:
    """Materialize the full score matrix, fill masked entries with -1e9, softmax."""
    Q, K, V = (np.asarray(x, dtype=np.float64) for x in (Q, K, V))
    mask = np.asarray(mask, dtype=bool)
    if Q.shape != K.shape or Q.shape[:-1] != V.shape[:-1] or mask.shape != (Q.shape[-2], K.shape[-2]):
        raise InputError("inconsistent shapes for dense attention")
    scores = Q @ np.swapaxes(K, -1, -2) / np.sqrt(Q.shape[-1])
    scores = np.where(mask, scores, scores + NEG_FILL)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ V


def masked_attention_op(q: ad.Tensor, k: ad.Tensor, v: ad.Tensor, mask: TVMask, grid: GridIndex) -> ad.Tensor:
    """Differentiable :func:`masked_attention` for the reverse-mode tape."""
    mask._check_grid(grid)
    _check_qkv(q.data, k.data, v.data, grid.n_tokens)
    out, probs = _masked_forward(q.data, k.data, v.data, mask, grid)
    return ad.custom(
        out, (q, k, v), lambda g: _masked_backward(g, q.data, k.data, v.data, probs, mask, grid)
    )


def full_attention_op(q: ad.Tensor, k: ad.Tensor, v: ad.Tensor) -> ad.Tensor:
    """Unmasked softmax attention over the second-to-last axis (batched)."""
    Q, K, V = q.data, k.data, v.data
    scale = 1.0 / np.sqrt(Q.shape[-1])
    P = (Q @ np.swapaxes(K, -1, -2)) * scale
    P -= P.max(axis=-1, keepdims=True)
    np.exp(P, out=P)
    P /= P.sum(axis=-1, keepdims=True)

    def back(g):
        dV = np.swapaxes(P, -1, -2) @ g
        dP = g @ np.swapaxes(V, -1, -2)
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
        return dS @ K, np.swapaxes(dS, -1, -2) @ Q, dV

    return ad.custom(P @ V, (q, k, v), back)


# ---------------------------------------------------------- positions
class CollapsedPosition(NamedTuple):
    t_prime: int
    p: int
    q: int


def collapse_position(v: int, t: int, p: int, q: int, t_max: int) -> CollapsedPosition:
    """Fold the view axis into time so a 3-D positional code covers the 4-D grid."""
    if not 0 <= t < t_max:
        raise InputError(f"time index {t} outside [0, {t_max})")
    if v < 0:
        raise InputError("view index must be non-negative")
    return CollapsedPosition(v * t_max + t, p, q)


@lru_cache(maxsize=32)
def collapsed_coords(grid: GridIndex, t_max: int) -> np.ndarray:
    """``(N, 3)`` collapsed ``(t', p, q)`` coordinates for every token of ``grid``."""
    if grid.n_time > t_max:
        raise InputError("grid has more time slots than t_max")
    c = grid.coords()
    return np.stack([c[:, 0] * t_max + c[:, 1], c[:, 2], c[:, 3]], axis=1)
