"""Projection of 3D Gaussians and a differentiable front-to-back splat rasterizer.

The rasterizer works on a flat list of (pixel, Gaussian) pairs instead of a
per-tile loop: every Gaussian enumerates the pixels inside its bounding box,
pairs outside the Mahalanobis cutoff are dropped, and the survivors are
grouped by pixel with Gaussians in ascending depth order inside each group.
Transmittance is then a segmented exclusive cumulative product, computed as
``exp`` of a segmented cumulative sum of ``log(1 - alpha)``.  The same cutoff
is applied by :func:`rasterize_dense`, which loops over Gaussians one at a
time and exists only as a reference implementation for tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..errors import InputError
from ..geometry import CameraPose

CUTOFF = 3.0  # Mahalanobis radius beyond which a Gaussian contributes nothing
POWER_MIN = -0.5 * CUTOFF * CUTOFF
DILATION = 0.3  # px^2 added to both diagonal entries of every 2D covariance
NEAR = 0.05
FRUSTUM_MARGIN = 0.3


@dataclass
class Splats2D:
    """Screen-space Gaussians.

    ``cov`` stores the symmetric 2x2 covariance as ``(xx, xy, yy)`` in px^2 and
    ``colors`` may carry any number of channels.
    """

    means: np.ndarray
    cov: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        n = len(self.means)
        self.means = np.asarray(self.means).reshape(n, 2)
        self.cov = np.asarray(self.cov).reshape(n, 3)
        self.opacity = np.asarray(self.opacity).reshape(n)
        colors = np.asarray(self.colors)
        if n:
            self.colors = colors.reshape(n, -1)
        else:
            self.colors = colors.reshape(0, colors.shape[-1] if colors.ndim == 2 else 3)
        self.depth = np.asarray(self.depth, dtype=np.float64).reshape(n)
        for name in ("cov", "opacity", "colors", "depth"):
            if len(getattr(self, name)) != n:
                raise InputError(f"splat field {name!r} has the wrong length")

    def __len__(self) -> int:
        return len(self.means)

    def permuted(self, order) -> "Splats2D":
        order = np.asarray(order)
        return Splats2D(self.means[order], self.cov[order], self.opacity[order], self.colors[order], self.depth[order])


def conic(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of each 2x2 covariance as ``(A, B, C)`` plus the determinants."""
    a, b, c = cov[:, 0], cov[:, 1], cov[:, 2]
    det = a * c - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        return c / det, -b / det, a / det, det


def depth_order(depth: np.ndarray) -> np.ndarray:
    """Ascending depth with ties broken by input index."""
    return np.lexsort((np.arange(len(depth)), depth))


# ------------------------------------------------------------ pair list
class _Pairs:
    """Visible (pixel, Gaussian) pairs, pixel-major and front-to-back within a pixel."""

    def __init__(self, s: Splats2D, H: int, W: int):
        n = len(s)
        self.H, self.W = H, W
        means = s.means.astype(np.float64)
        cov = s.cov.astype(np.float64)
        A, B, C, det = conic(cov)
        if np.any(det <= 0):
            raise InputError("2D covariances must be positive definite")
        self.A, self.B, self.C, self.det = A, B, C, det
        half_tr = 0.5 * (cov[:, 0] + cov[:, 2])
        lam = half_tr + np.sqrt(np.maximum(half_tr * half_tr - det, 0.0))
        r = CUTOFF * np.sqrt(lam)
        x0 = np.maximum(np.ceil(means[:, 0] - r - 0.5), 0).astype(np.int64)
        x1 = np.minimum(np.floor(means[:, 0] + r - 0.5), W - 1).astype(np.int64)
        y0 = np.maximum(np.ceil(means[:, 1] - r - 0.5), 0).astype(np.int64)
        y1 = np.minimum(np.floor(means[:, 1] + r - 0.5), H - 1).astype(np.int64)
        wx = np.maximum(x1 - x0 + 1, 0)
        wy = np.maximum(y1 - y0 + 1, 0)

        order = depth_order(s.depth)
        counts = (wx * wy)[order]
        total = int(counts.sum())
        gid = np.repeat(order, counts)
        first = np.repeat(np.cumsum(counts) - counts, counts)
        local = np.arange(total, dtype=np.int64) - first
        oy, ox = np.divmod(local, np.maximum(wx, 1)[gid])
        px = x0[gid] + ox
        py = y0[gid] + oy

        dx = px + 0.5 - means[gid, 0]
        dy = py + 0.5 - means[gid, 1]
        power = -0.5 * (A[gid] * dx * dx + C[gid] * dy * dy) - B[gid] * dx * dy
        keep = power >= POWER_MIN
        pix = (py * W + px)[keep]
        srt = np.argsort(pix, kind="stable")
        self.pix = pix[srt]
        self.gid = gid[keep][srt]
        self.dx = dx[keep][srt]
        self.dy = dy[keep][srt]
        self.gexp = np.exp(power[keep][srt])
        self.n = n

        m = len(self.pix)
        if m:
            change = np.flatnonzero(np.diff(self.pix)) + 1
            self.starts = np.concatenate([[0], change])
        else:
            self.starts = np.zeros(0, dtype=np.int64)
        self.ends = np.append(self.starts[1:], m)
        self.seg = np.repeat(np.arange(len(self.starts)), self.ends - self.starts)
        self.seg_pix = self.pix[self.starts]


@dataclass
class _Composite:
    pairs: _Pairs
    alpha: np.ndarray
    T: np.ndarray
    weight: np.ndarray
    T_final: np.ndarray  # per image pixel, flattened


def _composite(s: Splats2D, H: int, W: int) -> _Composite:
    p = _Pairs(s, H, W)
    opacity = s.opacity.astype(np.float64)
    alpha = opacity[p.gid] * p.gexp
    if np.any(alpha >= 1.0):
        raise InputError("opacity must stay below 1")
    la = np.log1p(-alpha)
    cs0 = np.concatenate([[0.0], np.cumsum(la)])
    base = cs0[p.starts][p.seg]
    T = np.exp(cs0[:-1] - base)
    T_final = np.ones(H * W)
    T_final[p.seg_pix] = np.exp(cs0[p.ends] - cs0[p.starts])
    return _Composite(p, alpha, T, alpha * T, T_final)


def _image(comp: _Composite, colors: np.ndarray, background: np.ndarray) -> np.ndarray:
    p = comp.pairs
    n_ch = colors.shape[1]
    out = np.zeros((p.H * p.W, n_ch))
    if len(p.pix):
        out[p.seg_pix] = np.add.reduceat(comp.weight[:, None] * colors[p.gid].astype(np.float64), p.starts, axis=0)
    out += comp.T_final[:, None] * background[None, :]
    return out.reshape(p.H, p.W, n_ch)


def _background(bg, n_ch: int) -> np.ndarray:
    if bg is None:
        return np.zeros(n_ch)
    b = np.broadcast_to(np.asarray(bg, dtype=np.float64), (n_ch,))
    return np.array(b)


def rasterize(s: Splats2D, H: int, W: int, *, background=None, return_alpha: bool = False):
    """Composite ``s`` into an ``(H, W, C)`` image in the dtype of ``s.colors``.

    With ``return_alpha`` also returns the accumulated opacity ``1 - T_final``.
    """
    n_ch = s.colors.shape[1] if s.colors.ndim == 2 else 3
    bg = _background(background, n_ch)
    dtype = s.colors.dtype if np.issubdtype(s.colors.dtype, np.floating) else np.float64
    if len(s) == 0:
        img = np.broadcast_to(bg, (H, W, n_ch)).astype(dtype)
        return (img, np.zeros((H, W), dtype=dtype)) if return_alpha else img
    comp = _composite(s, H, W)
    img = _image(comp, s.colors, bg).astype(dtype)
    if return_alpha:
        return img, (1.0 - comp.T_final).reshape(H, W).astype(dtype)
    return img


def composite_weights(s: Splats2D, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel sum of compositing weights and final transmittance (float64)."""
    comp = _composite(s, H, W)
    p = comp.pairs
    total = np.zeros(H * W)
    if len(p.pix):
        total[p.seg_pix] = np.add.reduceat(comp.weight, p.starts)
    return total.reshape(H, W), comp.T_final.reshape(H, W)


def _backward(comp: _Composite, s: Splats2D, background: np.ndarray, g_img: np.ndarray) -> dict[str, np.ndarray]:
    p = comp.pairs
    n = p.n
    g = g_img.reshape(p.H * p.W, -1).astype(np.float64)
    colors = s.colors.astype(np.float64)
    grads = {
        "means": np.zeros((n, 2)),
        "cov": np.zeros((n, 3)),
        "opacity": np.zeros(n),
        "colors": np.zeros_like(colors),
    }
    if len(p.pix) == 0:
        return grads
    gp = g[p.pix]
    cg = colors[p.gid]
    for ch in range(colors.shape[1]):
        grads["colors"][:, ch] = np.bincount(p.gid, comp.weight * gp[:, ch], minlength=n)
    dot = np.einsum("ij,ij->i", gp, cg)
    wd = np.concatenate([[0.0], np.cumsum(comp.weight * dot)])
    suffix = wd[p.ends[p.seg]] - wd[1:]
    g_bg = g @ background
    behind = suffix + comp.T_final[p.pix] * g_bg[p.pix]
    d_alpha = comp.T * dot - behind / (1.0 - comp.alpha)

    grads["opacity"] = np.bincount(p.gid, d_alpha * p.gexp, minlength=n)
    d_pow = d_alpha * comp.alpha
    A, B, C = p.A[p.gid], p.B[p.gid], p.C[p.gid]
    dx, dy = p.dx, p.dy
    grads["means"][:, 0] = np.bincount(p.gid, d_pow * (A * dx + B * dy), minlength=n)
    grads["means"][:, 1] = np.bincount(p.gid, d_pow * (B * dx + C * dy), minlength=n)
    gA = np.bincount(p.gid, d_pow * (-0.5 * dx * dx), minlength=n)
    gB = np.bincount(p.gid, d_pow * (-dx * dy), minlength=n)
    gC = np.bincount(p.gid, d_pow * (-0.5 * dy * dy), minlength=n)

    # chain through (A, B, C) = (c, -b, a) / (a c - b^2)
    cov = s.cov.astype(np.float64)
    a, b, c = cov[:, 0], cov[:, 1], cov[:, 2]
    D = p.det
    D2 = D * D
    grads["cov"][:, 0] = gA * (-c * c / D2) + gB * (b * c / D2) + gC * (1.0 / D - a * c / D2)
    grads["cov"][:, 1] = gA * (2 * b * c / D2) + gB * (-1.0 / D - 2 * b * b / D2) + gC * (2 * a * b / D2)
    grads["cov"][:, 2] = gA * (1.0 / D - a * c / D2) + gB * (a * b / D2) + gC * (-a * a / D2)
    return grads


def rasterize_grad(s: Splats2D, H: int, W: int, grad_image: np.ndarray, *, background=None) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_image * rasterize(s))`` w.r.t. every splat field.

    Returned arrays use the dtype of ``s.colors``; keys are ``means``, ``cov``,
    ``opacity`` and ``colors``.
    """
    n_ch = s.colors.shape[1]
    dtype = s.colors.dtype
    if len(s) == 0:
        return {"means": np.zeros((0, 2), dtype), "cov": np.zeros((0, 3), dtype), "opacity": np.zeros(0, dtype), "colors": np.zeros((0, n_ch), dtype)}
    comp = _composite(s, H, W)
    grads = _backward(comp, s, _background(background, n_ch), np.asarray(grad_image))
    return {k: v.astype(dtype) for k, v in grads.items()}


def rasterize_op(means: ad.Tensor, cov: ad.Tensor, opacity: ad.Tensor, colors: ad.Tensor, depth: np.ndarray, H: int, W: int, *, background=None) -> ad.Tensor:
    """Tape version of :func:`rasterize`."""
    means, cov, opacity, colors = (ad.as_tensor(t) for t in (means, cov, opacity, colors))
    s = Splats2D(means.data, cov.data, opacity.data, colors.data, depth)
    n_ch = s.colors.shape[1]
    bg = _background(background, n_ch)
    if len(s) == 0:
        return ad.Tensor(np.broadcast_to(bg, (H, W, n_ch)).copy())
    comp = _composite(s, H, W)
    out = _image(comp, s.colors, bg).astype(colors.dtype)

    def back(g):
        gr = _backward(comp, s, bg, g)
        return tuple(gr[k].astype(t.dtype) for k, t in zip(("means", "cov", "opacity", "colors"), (means, cov, opacity, colors)))

    return ad.custom(out, (means, cov, opacity, colors), back)


def rasterize_dense(s: Splats2D, H: int, W: int, *, background=None) -> np.ndarray:
    """Slow reference compositor: one Gaussian at a time over the full image."""
    n_ch = s.colors.shape[1] if len(s) else 3
    bg = _background(background, n_ch)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    img = np.zeros((H, W, n_ch))
    T = np.ones((H, W))
    if len(s):
        A, B, C, _ = conic(s.cov.astype(np.float64))
    for i in depth_order(s.depth):
        dx = xs - s.means[i, 0]
        dy = ys - s.means[i, 1]
        power = -0.5 * (A[i] * dx * dx + C[i] * dy * dy) - B[i] * dx * dy
        alpha = np.where(power >= POWER_MIN, s.opacity[i] * np.exp(power), 0.0)
        img += (alpha * T)[..., None] * s.colors[i]
        T = T * (1.0 - alpha)
    return img + T[..., None] * bg


# --------------------------------------------------------------- projection
def quat_rotation(q: ad.Tensor) -> ad.Tensor:
    """Rotation matrices ``(n, 3, 3)`` from unnormalized ``[w, x, y, z]`` rows."""
    q = q / ad.sqrt((q * q).sum(axis=1, keepdims=True))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]  # fmt: skip
    return ad.stack(rows, axis=1).reshape(-1, 3, 3)


def covariance_3d(quats: ad.Tensor, log_scales: ad.Tensor) -> ad.Tensor:
    """``R(q) diag(exp(2 s)) R(q)^T`` per Gaussian."""
    M = quat_rotation(quats) * ad.exp(log_scales).reshape(-1, 1, 3)
    return M @ M.transpose(0, 2, 1)


@dataclass
class Projection:
    """Projected Gaussians; ``index`` maps rows back to the input Gaussians."""

    means2d: ad.Tensor
    cov2d: ad.Tensor
    depth: np.ndarray
    index: np.ndarray


def visible_in(means: np.ndarray, cam: CameraPose, near: float = NEAR) -> np.ndarray:
    """Indices of Gaussians in front of ``cam`` whose centers project near the image."""
    pc = cam.world_to_camera(means)
    z = pc[:, 2]
    ok = z > near
    zs = np.where(ok, z, 1.0)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    mw, mh = FRUSTUM_MARGIN * cam.width, FRUSTUM_MARGIN * cam.height
    ok &= (u > -mw) & (u < cam.width + mw) & (v > -mh) & (v < cam.height + mh)
    return np.flatnonzero(ok)


def project_gaussians(means, quats, log_scales, cam: CameraPose, *, near: float = NEAR) -> Projection:
    """Perspective projection of 3D Gaussians with the local affine approximation.

    Gaussians behind the near plane or far outside the frustum are culled;
    ``Projection.index`` lists the survivors.
    """
    means, quats, log_scales = (ad.as_tensor(t) for t in (means, quats, log_scales))
    idx = visible_in(means.data, cam, near)
    m = ad.take_rows(means, idx)
    q = ad.take_rows(quats, idx)
    s = ad.take_rows(log_scales, idx)
    R = cam.R.astype(means.dtype)
    pc = m @ R.T + cam.translation.astype(means.dtype)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    iz = 1.0 / z
    u = cam.fx * x * iz + cam.cx
    v = cam.fy * y * iz + cam.cy
    means2d = ad.stack([u, v], axis=1)

    zero = ad.Tensor(np.zeros(len(idx), dtype=means.dtype))
    J = ad.stack([cam.fx * iz, zero, -cam.fx * x * iz * iz, zero, cam.fy * iz, -cam.fy * y * iz * iz], axis=1).reshape(-1, 2, 3)
    TW = J @ R
    cov = TW @ covariance_3d(q, s) @ TW.transpose(0, 2, 1)
    cov2d = ad.stack([cov[:, 0, 0] + DILATION, cov[:, 0, 1], cov[:, 1, 1] + DILATION], axis=1)
    return Projection(means2d, cov2d, z.data.astype(np.float64), idx)
