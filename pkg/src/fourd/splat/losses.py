"""Reconstruction and deformation-regularization losses.

Each loss has a tape version (``*_tensor``) used inside the optimizer and a
plain-array wrapper returning ``(value, gradients)``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .. import autodiff as ad
from ..errors import InputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


@lru_cache(maxsize=16)
def blur_matrix(n: int, size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Zero-padded 'same' convolution with a normalized 1-D Gaussian as an ``n x n`` matrix."""
    half = size // 2
    k = np.exp(-0.5 * (np.arange(-half, half + 1) / sigma) ** 2)
    k /= k.sum()
    M = np.zeros((n, n))
    for off in range(-half, half + 1):
        M += k[off + half] * np.eye(n, k=off)
    return M


def _blur(x: np.ndarray) -> np.ndarray:
    Bh, Bw = blur_matrix(x.shape[0]), blur_matrix(x.shape[1])
    return np.einsum("ij,jkc,lk->ilc", Bh, x, Bw, optimize=True)


def _blur_t(x: np.ndarray) -> np.ndarray:
    Bh, Bw = blur_matrix(x.shape[0]), blur_matrix(x.shape[1])
    return np.einsum("ji,jkc,kl->ilc", Bh, x, Bw, optimize=True)


def ssim_tensor(a: ad.Tensor, b) -> ad.Tensor:
    """Mean SSIM of two ``(H, W, C)`` images, differentiable in ``a`` only.

    The gradient is written in closed form and grouped so that it is exactly
    zero when ``a`` equals ``b``; a tape-composed version leaves rounding
    residue there, which a scale-free optimizer would amplify.
    """
    a = ad.as_tensor(a)
    x = a.data.astype(np.float64)
    y = np.asarray(b.data if isinstance(b, ad.Tensor) else b, dtype=np.float64)
    mu_x, mu_y = _blur(x), _blur(y)
    sxx = _blur(x * x) - mu_x * mu_x
    syy = _blur(y * y) - mu_y * mu_y
    sxy = _blur(x * y) - mu_x * mu_y
    A1, A2 = 2.0 * mu_x * mu_y + C1, 2.0 * sxy + C2
    B1, B2 = mu_x * mu_x + mu_y * mu_y + C1, sxx + syy + C2
    S = (A1 * A2) / (B1 * B2)

    def back(g):
        g = np.broadcast_to(np.asarray(g, dtype=np.float64) / S.size, S.shape)
        g_mu = g * 2.0 * A2 * (mu_y - mu_x * (A1 / B1)) / (B1 * B2)
        g_sxy = g * 2.0 * A1 / (B1 * B2)
        g_sxx = -0.5 * g_sxy * (A2 / B2)
        # mu_x enters directly and through the two moment terms
        grad = _blur_t(g_mu - g_sxy * mu_y - 2.0 * g_sxx * mu_x) + y * _blur_t(g_sxy) + x * _blur_t(2.0 * g_sxx)
        return (grad.astype(a.dtype),)

    return ad.custom(np.asarray(S.mean(), dtype=a.dtype), (a,), back)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return float(ssim_tensor(ad.Tensor(a), ad.Tensor(b)).data)


def recon_loss_tensor(rendered: ad.Tensor, target: np.ndarray, lambda_ssim: float) -> ad.Tensor:
    target = np.asarray(target, dtype=rendered.dtype)
    if rendered.shape != target.shape:
        raise InputError(f"rendered {rendered.shape} and target {target.shape} differ in shape")
    loss = ad.absolute(rendered - target).mean()
    if lambda_ssim:
        loss = loss + lambda_ssim * (1.0 - ssim_tensor(rendered, target))
    return loss


def recon_loss(rendered, target, lambda_ssim: float = 0.2) -> tuple[float, np.ndarray]:
    """``mean|r - t| + lambda_ssim * (1 - SSIM(r, t))`` and its gradient w.r.t. ``rendered``."""
    r = ad.Tensor(np.asarray(rendered, dtype=np.float64), requires_grad=True)
    t = np.asarray(target, dtype=np.float64)
    if r.ndim == 2 and t.ndim == 2:
        r = ad.Tensor(r.data[..., None], requires_grad=True)
        t = t[..., None]
        squeeze = True
    else:
        squeeze = False
    loss = recon_loss_tensor(r, t, lambda_ssim)
    loss.backward()
    g = r.grad[..., 0] if squeeze else r.grad
    return float(loss.data), g


# --------------------------------------------------------------------- ARAP
def knn_edges(points: np.ndarray, k: int) -> np.ndarray:
    """``(n, k)`` indices of each point's ``k`` nearest other points."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < k + 1:
        raise InputError(f"need at least {k + 1} Gaussians for {k} neighbours, got {len(points)}")
    _, idx = cKDTree(points).query(points, k=k + 1)
    idx = np.atleast_2d(idx)
    own = np.arange(len(points))
    if np.all(idx[:, 0] == own):
        return idx[:, 1:].astype(np.int64)
    # duplicate points can put a twin ahead of the point itself
    out = np.empty((len(points), k), dtype=np.int64)
    for i, row in enumerate(idx):
        out[i] = row[row != i][:k]
    return out


def _edge_lengths(x: ad.Tensor, i: np.ndarray, j: np.ndarray) -> ad.Tensor:
    d = ad.take_rows(x, i) - ad.take_rows(x, j)
    return ad.sqrt((d * d).sum(axis=1) + 1e-24)


def arap_loss_tensor(canonical: np.ndarray, deformed: ad.Tensor, neighbors: np.ndarray) -> ad.Tensor:
    """Mean squared change of canonical k-NN edge lengths."""
    n, k = neighbors.shape
    i = np.repeat(np.arange(n), k)
    j = neighbors.reshape(-1)
    diff = np.asarray(canonical)[i] - np.asarray(canonical)[j]
    d0 = np.sqrt(np.sum(diff * diff, axis=1))
    r = _edge_lengths(ad.as_tensor(deformed), i, j) - d0
    return (r * r).mean()


def arap_loss(canonical, deformed, k_neighbors: int = 8) -> tuple[float, np.ndarray]:
    """ARAP value and its gradient w.r.t. the deformed means."""
    canonical = np.asarray(canonical, dtype=np.float64)
    nb = knn_edges(canonical, k_neighbors)
    x = ad.Tensor(np.asarray(deformed, dtype=np.float64), requires_grad=True)
    if x.shape != canonical.shape:
        raise InputError("canonical and deformed point sets differ in shape")
    loss = arap_loss_tensor(canonical, x, nb)
    loss.backward()
    return float(loss.data), x.grad


# ---------------------------------------------------------------- rotation
def rot_loss_tensor(delta_q: list[ad.Tensor]) -> ad.Tensor:
    """Mean over consecutive pairs and Gaussians of ``||dq_{t+1} - dq_t||^2``."""
    if len(delta_q) < 2:
        raise InputError("rotation smoothness needs at least two timestamps")
    total = None
    for a, b in zip(delta_q[:-1], delta_q[1:]):
        d = b - a
        term = (d * d).sum(axis=1).mean()
        total = term if total is None else total + term
    return total * (1.0 / (len(delta_q) - 1))


def rot_loss(delta_q: np.ndarray) -> tuple[float, np.ndarray]:
    """Temporal smoothness of ``(T, n, 4)`` quaternion offsets with its gradient."""
    dq = np.asarray(delta_q, dtype=np.float64)
    if dq.ndim != 3 or dq.shape[-1] != 4:
        raise InputError("delta_q must be (timestamps, n, 4)")
    ts = [ad.Tensor(q, requires_grad=True) for q in dq]
    loss = rot_loss_tensor(ts)
    loss.backward()
    return float(loss.data), np.stack([t.grad for t in ts])


def deformation_rot_loss(deformation, means: np.ndarray, timestamps) -> tuple[float, dict[str, np.ndarray]]:
    """Rotation smoothness of a deformation field's ``d_q`` with gradients on its parameters."""
    P = {k: ad.Tensor(v, requires_grad=True) for k, v in deformation.params.items()}
    m = ad.Tensor(np.asarray(means, dtype=np.float64))
    dqs = [deformation.forward(m, t, P)[:, 3:7] for t in timestamps]
    loss = rot_loss_tensor(dqs)
    loss.backward()
    return float(loss.data), {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in P.items()}
