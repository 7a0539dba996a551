"""Micro multi-view denoiser predicting rectified-flow velocities.

Latents are pixel-space videos laid out ``(n_views, f, c, h, w)`` with values in
``[-1, 1]`` (the autoencoder is the identity: ``z = 2 * rgb - 1``).  For every
view the noisy target latent and its condition latent are patchified
separately and concatenated along time, giving ``2f`` token slots per view.

Each block runs

1. per-view self-attention over that view's ``2f*s`` tokens,
2. adds the view's camera embedding (a bias-free linear map of its 3x4 pose
   relative to the reference view),
3. a copy of the attention that operates over all views under the fused
   time-view mask, followed by a zero-initialized projector, and
4. a feed-forward layer,

all with residual connections.  The camera encoders and projectors start at
zero, so a fresh model treats every view as an isolated video.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import GridIndex, TVMask, build_mask, collapsed_coords, full_attention_op, masked_attention_op
from .errors import InputError, StateError
from .geometry import CameraPose, DepthMap, back_project, relative_pose, render_point_cloud
from .io import load_arrays, save_arrays

TIME_EMBED_DIM = 32


# ------------------------------------------------------------ conditioning
@dataclass
class Conditioning:
    """Everything the denoiser sees besides the noisy target.

    ``condition`` holds one condition latent per view (the reference view's is
    the input video itself, the others are point-cloud projections) and
    ``cameras`` the per-view 3x4 poses relative to the reference camera.
    """

    condition: np.ndarray
    cameras: np.ndarray

    def __post_init__(self):
        self.condition = np.asarray(self.condition)
        self.cameras = np.asarray(self.cameras, dtype=np.float64)
        if self.condition.ndim != 5:
            raise InputError("condition latents must be (n_views, f, c, h, w)")
        if self.cameras.shape != (self.condition.shape[0], 3, 4):
            raise InputError("need one 3x4 relative camera per view")

    def views(self, order: Sequence[int]) -> "Conditioning":
        order = list(order)
        return Conditioning(self.condition[order], self.cameras[order])


def encode_frames(frames: np.ndarray) -> np.ndarray:
    """``(f, H, W, 3)`` RGB in [0, 1] to a ``(f, 3, H, W)`` latent in [-1, 1]."""
    return np.moveaxis(np.asarray(frames), -1, -3) * 2.0 - 1.0


def decode_latents(z: np.ndarray) -> np.ndarray:
    return np.moveaxis((np.asarray(z) + 1.0) * 0.5, -3, -1)


def camera_matrix(reference: CameraPose, target: CameraPose) -> np.ndarray:
    R, t = relative_pose(reference, target)
    return np.hstack([R, t[:, None]])


def projection_guides(frames, depths: Sequence[DepthMap], source: CameraPose, target: CameraPose) -> np.ndarray:
    """Per-frame point-cloud renders of the source video into ``target``; ``(f, H, W, 3)``."""
    out = []
    for img, depth in zip(frames, depths):
        out.append(render_point_cloud(back_project(depth, img, source), target).image)
    return np.stack(out)


def build_conditioning(
    reference_frames: np.ndarray,
    reference_depths: Sequence[DepthMap],
    reference_cam: CameraPose,
    target_cams: Sequence[CameraPose],
    *,
    downsample: int = 1,
) -> Conditioning:
    """Condition latents for ``[reference] + target_cams`` at ``1/downsample`` resolution."""
    cond = [encode_frames(area_downsample(reference_frames, downsample))]
    cams = [camera_matrix(reference_cam, reference_cam)]
    for cam in target_cams:
        guide = projection_guides(reference_frames, reference_depths, reference_cam, cam)
        cond.append(encode_frames(area_downsample(guide, downsample)))
        cams.append(camera_matrix(reference_cam, cam))
    return Conditioning(np.stack(cond), np.stack(cams))


def area_downsample(frames: np.ndarray, k: int) -> np.ndarray:
    """Average ``k x k`` pixel blocks of ``(..., H, W, C)`` frames."""
    if k == 1:
        return np.asarray(frames)
    a = np.asarray(frames)
    H, W = a.shape[-3], a.shape[-2]
    if H % k or W % k:
        raise InputError(f"frame size {H}x{W} not divisible by {k}")
    return a.reshape(a.shape[:-3] + (H // k, k, W // k, k, a.shape[-1])).mean(axis=(-4, -2))


# ---------------------------------------------------------- token layout
def patchify(z, p: int) -> ad.Tensor:
    """``(V, f, c, h, w)`` to ``(V, f, (h/p)*(w/p), c*p*p)`` tokens."""
    z = ad.as_tensor(z)
    V, f, c, h, w = z.shape
    if h % p or w % p:
        raise InputError(f"latent size {h}x{w} not divisible by patch size {p}")
    x = z.reshape(V, f, c, h // p, p, w // p, p).transpose(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(V, f, (h // p) * (w // p), c * p * p)


def unpatchify(x, c: int, h: int, w: int, p: int) -> ad.Tensor:
    x = ad.as_tensor(x)
    V, f = x.shape[:2]
    x = x.reshape(V, f, h // p, w // p, c, p, p).transpose(0, 1, 4, 2, 5, 3, 6)
    return x.reshape(V, f, c, h, w)


def tokenize(target, condition, patch_size: int) -> ad.Tensor:
    """Patchify both halves and stack them along time: ``(V, 2f, s, c*p*p)``."""
    target = ad.as_tensor(target)
    condition = ad.as_tensor(condition, dtype=target.dtype)
    if target.shape != condition.shape:
        raise InputError(f"target {target.shape} and condition {condition.shape} differ")
    return ad.concat([patchify(target, patch_size), patchify(condition, patch_size)], axis=1)


def detokenize(tokens, c: int, h: int, w: int, patch_size: int) -> tuple[ad.Tensor, ad.Tensor]:
    tokens = ad.as_tensor(tokens)
    f = tokens.shape[1] // 2
    return (
        unpatchify(tokens[:, :f], c, h, w, patch_size),
        unpatchify(tokens[:, f:], c, h, w, patch_size),
    )


# ---------------------------------------------------------------- encoders
def encode_camera(pose_rel, weight) -> np.ndarray:
    """Linear (bias-free) camera embedding of flattened 3x4 relative poses."""
    pose = np.asarray(pose_rel, dtype=np.float64)
    return pose.reshape(pose.shape[:-2] + (12,)) @ np.asarray(weight)


def timestep_embedding(tau: float, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    arg = 1000.0 * tau * freqs
    return np.concatenate([np.cos(arg), np.sin(arg)])


def _sincos(pos: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    omega = 1.0 / 10000.0 ** (np.arange(half) / max(half, 1))
    arg = pos[:, None] * omega[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def positional_encoding(grid: GridIndex, t_max: int, d: int) -> np.ndarray:
    """Fixed sinusoidal code of the collapsed ``(v*t_max + t, p, q)`` coordinates."""
    c = collapsed_coords(grid, t_max).astype(np.float64)
    d_t = d // 2
    d_p = (d - d_t) // 2
    d_q = d - d_t - d_p
    return np.concatenate([_sincos(c[:, 0], d_t), _sincos(c[:, 1], d_p), _sincos(c[:, 2], d_q)], axis=1)


# ------------------------------------------------------------------ blocks
def _attention_weights(rng, d, scale):
    return {k: rng.uniform(-scale, scale, (d, d)) for k in ("wq", "wk", "wv", "wo")} | {"bo": np.zeros(d)}


def block_forward(x: ad.Tensor, cam: ad.Tensor, mask: TVMask, params: dict, n_heads: int) -> ad.Tensor:
    """One denoiser block on tokens ``(V, 2f, s, d)``; ``cam`` is the ``(V, d)`` embedding."""
    V, T, s, d = x.shape
    dh = d // n_heads
    L = T * s
    h = x.reshape(V, L, d)

    def heads(t: ad.Tensor, lead: tuple) -> ad.Tensor:
        # (..., L, d) -> (..., H, L, dh)
        nd = len(lead)
        t = t.reshape(*lead, t.shape[-2], n_heads, dh)
        return t.transpose(*range(nd), nd + 1, nd, nd + 2)

    def merge(t: ad.Tensor, lead: tuple) -> ad.Tensor:
        nd = len(lead)
        t = t.transpose(*range(nd), nd + 1, nd, nd + 2)
        return t.reshape(*lead, t.shape[nd], d)

    # per-view self-attention
    u = ad.layer_norm(h)
    a = full_attention_op(
        heads(u @ params["attn.wq"], (V,)), heads(u @ params["attn.wk"], (V,)), heads(u @ params["attn.wv"], (V,))
    )
    h = h + (merge(a, (V,)) @ params["attn.wo"] + params["attn.bo"])
    # camera injection, broadcast over frames and positions
    h = h + cam.reshape(V, 1, d)
    # fused time-view attention on a copy of the attention weights
    flat = h.reshape(V * L, d)
    grid = GridIndex(V, T, s)
    u = ad.layer_norm(flat)
    a = masked_attention_op(
        heads(u @ params["fused.wq"], ()),
        heads(u @ params["fused.wk"], ()),
        heads(u @ params["fused.wv"], ()),
        mask,
        grid,
    )
    a = merge(a, ()) @ params["fused.wo"] + params["fused.bo"]
    flat = flat + (a @ params["fused.proj.w"] + params["fused.proj.b"])
    # feed-forward
    u = ad.layer_norm(flat)
    flat = flat + (ad.silu(u @ params["ffn.w1"] + params["ffn.b1"]) @ params["ffn.w2"] + params["ffn.b2"])
    return flat.reshape(V, T, s, d)


# -------------------------------------------------------------------- model
class VelocityField:
    """Parameters and forward/backward of the micro denoiser.

    ``dtype`` sets the arithmetic precision of forward and backward; the
    stored parameters are always float64.
    """

    def __init__(
        self,
        channels: int = 3,
        d: int = 32,
        n_blocks: int = 2,
        n_heads: int = 2,
        patch_size: int = 1,
        t_max: int | None = None,
        seed: int = 0,
        dtype=np.float64,
        ffn_mult: int = 2,
    ):
        if d % n_heads:
            raise InputError("token width must be divisible by the head count")
        self.channels = channels
        self.d = d
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.patch_size = patch_size
        self.t_max = t_max
        self.ffn_mult = ffn_mult
        self.dtype = np.dtype(dtype)
        self.params = self._init_params(np.random.default_rng(seed))
        self._cache = None
        self._masks: dict = {}

    # ------------------------------------------------------------ params
    def _init_params(self, rng) -> dict[str, np.ndarray]:
        d, c, p = self.d, self.channels, self.patch_size
        tok = c * p * p

        def lin(n_in, n_out):
            s = 1.0 / math.sqrt(n_in)
            return rng.uniform(-s, s, (n_in, n_out))

        P = {
            "embed.w": lin(tok, d),
            "embed.b": np.zeros(d),
            "time.w": lin(TIME_EMBED_DIM, d),
            "time.b": np.zeros(d),
            "head.w": lin(d, tok),
            "head.b": np.zeros(tok),
        }
        for i in range(self.n_blocks):
            attn = _attention_weights(rng, d, 1.0 / math.sqrt(d))
            for k, v in attn.items():
                P[f"b{i}.attn.{k}"] = v
                P[f"b{i}.fused.{k}"] = v.copy()
            P[f"b{i}.cam.w"] = np.zeros((12, d))
            P[f"b{i}.fused.proj.w"] = np.zeros((d, d))
            P[f"b{i}.fused.proj.b"] = np.zeros(d)
            P[f"b{i}.ffn.w1"] = lin(d, self.ffn_mult * d)
            P[f"b{i}.ffn.b1"] = np.zeros(self.ffn_mult * d)
            P[f"b{i}.ffn.w2"] = lin(self.ffn_mult * d, d)
            P[f"b{i}.ffn.b2"] = np.zeros(d)
        return P

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def hyperparameters(self) -> dict:
        return {
            "channels": self.channels,
            "d": self.d,
            "n_blocks": self.n_blocks,
            "n_heads": self.n_heads,
            "patch_size": self.patch_size,
            "t_max": self.t_max,
            "ffn_mult": self.ffn_mult,
        }

    def save(self, path) -> None:
        save_arrays(path, self.params, {"kind": "velocity_field", **self.hyperparameters()})

    @classmethod
    def load(cls, path, dtype=np.float64) -> "VelocityField":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "velocity_field":
            raise InputError(f"{path}: not a velocity-field checkpoint")
        hp = {k: meta[k] for k in ("channels", "d", "n_blocks", "n_heads", "patch_size", "t_max", "ffn_mult")}
        model = cls(**hp, dtype=dtype)
        missing = set(model.params) - set(arrays)
        if missing:
            raise InputError(f"{path}: missing parameters {sorted(missing)}")
        model.params = {k: arrays[k] for k in model.params}
        return model

    def mask_for(self, n_views: int, f: int) -> TVMask:
        key = (n_views, f)
        if key not in self._masks:
            self._masks[key] = build_mask(n_views, f)
        return self._masks[key]

    def camera_embeddings(self, cameras: np.ndarray, block: int) -> np.ndarray:
        return encode_camera(cameras, self.params[f"b{block}.cam.w"])

    # ----------------------------------------------------------- forward
    def forward(
        self,
        z_noisy,
        tau: float,
        cond: Conditioning,
        *,
        param_grads: bool = True,
        mask: TVMask | None = None,
    ) -> ad.Tensor:
        """Velocity for ``z_noisy`` as a tape node; the tape is cached for :meth:`backward`.

        ``z_noisy`` may be an :class:`autodiff.Tensor` to differentiate through
        the model with respect to its input.
        """
        if not 0.0 <= tau <= 1.0:
            raise InputError(f"tau={tau} outside [0, 1]")
        dt = self.dtype
        z = z_noisy if isinstance(z_noisy, ad.Tensor) else ad.Tensor(np.asarray(z_noisy, dtype=dt), requires_grad=True)
        if z.dtype != dt:
            raise InputError(f"input dtype {z.dtype} does not match model dtype {dt}")
        V, f, c, h, w = z.shape
        if c != self.channels:
            raise InputError(f"expected {self.channels} channels, got {c}")
        if cond.condition.shape != z.shape:
            raise InputError(f"condition shape {cond.condition.shape} != latent shape {z.shape}")
        p = self.patch_size
        s = (h // p) * (w // p)
        T = 2 * f
        t_max = self.t_max or T
        if mask is None:
            mask = self.mask_for(V, f)

        P = {k: ad.Tensor(v.astype(dt), requires_grad=param_grads) for k, v in self.params.items()}
        tokens = tokenize(z, cond.condition.astype(dt), p)
        x = tokens @ P["embed.w"] + P["embed.b"]
        pe = positional_encoding(GridIndex(V, T, s, w // p), t_max, self.d).astype(dt)
        temb = ad.Tensor(timestep_embedding(tau)[None].astype(dt)) @ P["time.w"] + P["time.b"]
        x = x + pe.reshape(V, T, s, self.d) + temb
        cams = ad.Tensor(cond.cameras.reshape(V, 12).astype(dt))
        for i in range(self.n_blocks):
            bp = {k[len(f"b{i}.") :]: v for k, v in P.items() if k.startswith(f"b{i}.")}
            x = block_forward(x, cams @ bp["cam.w"], mask, bp, self.n_heads)
        y = ad.layer_norm(x[:, :f]) @ P["head.w"] + P["head.b"]
        out = unpatchify(y, c, h, w, p)
        self._cache = (out, P, z)
        return out

    def __call__(self, z_noisy, tau: float, cond: Conditioning) -> np.ndarray:
        z = ad.Tensor(np.asarray(z_noisy, dtype=self.dtype))
        out = self.forward(z, tau, cond, param_grads=False).data
        self._cache = None
        return out

    def backward(self, loss_grad) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Gradients of ``sum(loss_grad * v)`` w.r.t. every parameter and the noisy input."""
        if self._cache is None:
            raise StateError("backward() called without a cached forward pass")
        out, P, z = self._cache
        self._cache = None
        out.backward(np.asarray(loss_grad, dtype=out.dtype))
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()}
        zgrad = z.grad if z.grad is not None else np.zeros_like(z.data)
        return grads, zgrad
