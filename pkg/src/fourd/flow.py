"""Rectified-flow training, sampling and flow-matching distillation.

Paths are straight lines ``z_tau = (1 - tau) * z0 + tau * eps`` with ``tau = 0``
at the data and ``tau = 1`` at the noise, so the target velocity is
``eps - z0`` and sampling integrates from ``tau = 1`` down to ``0``.

A "model" here is anything with

* ``model(z, tau, cond) -> ndarray`` (inference), and
* ``model.forward(z, tau, cond, param_grads=...) -> autodiff.Tensor`` plus
  ``model.backward(grad) -> (param_grads, input_grad)`` for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import InputError, StateError
from .io import load_arrays, save_arrays
from .optim import SGD


def _check_tau(tau) -> None:
    t = np.asarray(tau)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise InputError(f"tau must lie in [0, 1], got {tau!r}")


def _expand_tau(tau, like: np.ndarray):
    t = np.asarray(tau, dtype=np.float64)
    if t.ndim == 0:
        return float(t)
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


def forward_interpolate(z0, eps, tau):
    """Point at time ``tau`` on the straight path from ``z0`` (tau=0) to ``eps`` (tau=1).

    ``tau`` may be a scalar or one value per leading-axis sample.
    """
    _check_tau(tau)
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise InputError(f"z0 {z0.shape} and eps {eps.shape} differ in shape")
    t = _expand_tau(tau, z0)
    if np.ndim(t) == 0:
        if t == 0.0:
            return z0.copy()
        if t == 1.0:
            return eps.copy()
    return (1.0 - t) * z0 + t * eps


def target_velocity(z0, eps) -> np.ndarray:
    return np.asarray(eps) - np.asarray(z0)


def clean_estimate(z_tau, tau, v):
    """One-step denoised sample implied by a velocity prediction."""
    _check_tau(tau)
    z_tau = np.asarray(z_tau)
    return z_tau - _expand_tau(tau, z_tau) * np.asarray(v)


def cfm_loss(model, z0, cond, tau, eps) -> tuple[float, dict[str, np.ndarray]]:
    """Squared error between the model velocity and ``eps - z0`` with parameter gradients."""
    z_tau = forward_interpolate(z0, eps, tau)
    v = model.forward(z_tau, tau, cond, param_grads=True)
    resid = v.data - target_velocity(z0, eps)
    loss = float(np.sum(resid * resid))
    grads, _ = model.backward(2.0 * resid)
    return loss, grads


def euler_sample(model, cond, n_steps: int, seed: int | None = None, *, shape=None, noise=None) -> np.ndarray:
    """Integrate ``dz = v dtau`` from ``tau = 1`` to ``0`` with fixed steps ``1/n_steps``.

    The starting noise is ``noise`` if given, else a seeded standard normal of
    ``shape`` (which defaults to the condition latent shape).
    """
    if n_steps < 1:
        raise InputError("n_steps must be at least 1")
    if noise is None:
        if shape is None:
            if cond is None:
                raise InputError("need a shape, a noise array or a conditioning to infer one")
            shape = cond.condition.shape
        z = np.random.default_rng(seed).standard_normal(shape)
    else:
        z = np.array(noise, dtype=np.float64)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        tau = 1.0 - k * dt
        z = z - np.asarray(model(z, tau, cond)) * dt
    return z


# ------------------------------------------------------------------- FMD
def _unit_weight(tau: float) -> float:
    return 1.0


@dataclass
class FMDConfig:
    """Settings for the flow-matching distillation regularizer.

    ``stop_gradient=True`` treats the frozen model's prediction as a constant
    (the score-distillation shortcut); the default differentiates through it.
    """

    weight: Callable[[float], float] = _unit_weight
    tau_range: tuple[float, float] = (0.0, 1.0)
    lambda_fmd: float = 0.05
    stop_gradient: bool = False

    def sample(self, rng: np.random.Generator, shape) -> tuple[float, np.ndarray]:
        lo, hi = self.tau_range
        tau = float(rng.uniform(lo, hi))
        return tau, rng.standard_normal(shape)


@dataclass
class FMDResult:
    loss: float
    grad: np.ndarray
    tau: float
    clean: np.ndarray = field(repr=False)


def fmd_loss(rendered, model, cond, config: FMDConfig | None = None, seed: int | None = None, *, tau=None, eps=None) -> FMDResult:
    """``w(tau) * ||clean_estimate(z_tau) - rendered||^2`` and its gradient w.r.t. ``rendered``.

    The model's parameters are not touched; its input Jacobian enters the
    gradient unless ``config.stop_gradient`` is set.
    """
    config = config or FMDConfig()
    r = np.asarray(rendered, dtype=getattr(model, "dtype", np.float64))
    rng = np.random.default_rng(seed)
    s_tau, s_eps = config.sample(rng, r.shape)
    tau = s_tau if tau is None else float(tau)
    eps = s_eps if eps is None else np.asarray(eps, dtype=r.dtype)
    _check_tau(tau)
    w = float(config.weight(tau))
    if w < 0:
        raise InputError("FMD weight must be non-negative")
    z_tau = forward_interpolate(r, eps.astype(r.dtype), tau)
    through_model = not config.stop_gradient and tau > 0.0
    if through_model:
        v = model.forward(ad.Tensor(z_tau, requires_grad=True), tau, cond, param_grads=False).data
    else:
        v = np.asarray(model(z_tau, tau, cond))
    f = clean_estimate(z_tau, tau, v)
    e = f - r
    loss = w * float(np.sum(e * e))
    if through_model:
        _, jt_e = model.backward(e)
        grad = 2.0 * w * ((1.0 - tau) * (e - tau * jt_e) - e)
    else:
        grad = -2.0 * w * tau * e
    return FMDResult(loss, grad, tau, f)


# -------------------------------------------------------------- toy flows
class ToyVelocity:
    """Feed-forward velocity field on 2-D points (``cond`` is ignored)."""

    N_FREQ = 4

    def __init__(self, hidden: int = 128, depth: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        n_in = 2 + 1 + 2 * self.N_FREQ
        sizes = [n_in] + [hidden] * depth + [2]
        self.params = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            s = 1.0 / math.sqrt(a)
            self.params[f"l{i}.w"] = rng.uniform(-s, s, (a, b))
            self.params[f"l{i}.b"] = np.zeros(b)
        self.n_layers = len(sizes) - 1
        self.hidden = hidden
        self.depth = depth
        self.dtype = np.dtype(np.float64)
        self._cache = None

    @classmethod
    def time_features(cls, tau, n: int) -> np.ndarray:
        t = np.broadcast_to(np.asarray(tau, dtype=np.float64).reshape(-1), (n,))
        k = np.arange(1, cls.N_FREQ + 1)
        return np.concatenate([t[:, None], np.sin(np.pi * k * t[:, None]), np.cos(np.pi * k * t[:, None])], axis=1)

    def forward(self, z, tau, cond=None, *, param_grads: bool = True) -> ad.Tensor:
        z = z if isinstance(z, ad.Tensor) else ad.Tensor(np.asarray(z, dtype=np.float64), requires_grad=True)
        P = {k: ad.Tensor(v, requires_grad=param_grads) for k, v in self.params.items()}
        x = ad.concat([z, ad.Tensor(self.time_features(tau, z.shape[0]))], axis=1)
        for i in range(self.n_layers):
            x = x @ P[f"l{i}.w"] + P[f"l{i}.b"]
            if i < self.n_layers - 1:
                x = ad.silu(x)
        self._cache = (x, P, z)
        return x

    def __call__(self, z, tau, cond=None) -> np.ndarray:
        out = self.forward(ad.Tensor(np.asarray(z, dtype=np.float64)), tau, cond, param_grads=False).data
        self._cache = None
        return out

    def backward(self, loss_grad):
        if self._cache is None:
            raise StateError("backward() called without a cached forward pass")
        out, P, z = self._cache
        self._cache = None
        out.backward(np.asarray(loss_grad, dtype=np.float64))
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()}
        return grads, (z.grad if z.grad is not None else np.zeros_like(z.data))

    def save(self, path) -> None:
        save_arrays(path, self.params, {"kind": "toy_velocity", "hidden": self.hidden, "depth": self.depth})

    @classmethod
    def load(cls, path) -> "ToyVelocity":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "toy_velocity":
            raise InputError(f"{path}: not a toy velocity checkpoint")
        m = cls(hidden=int(meta["hidden"]), depth=int(meta["depth"]))
        m.params = {k: arrays[k] for k in m.params}
        return m


def toy_dataset(kind: str, n: int = 8192, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if kind == "point":
        return np.tile([3.0, -1.0], (n, 1))
    if kind == "gauss":
        return rng.standard_normal((n, 2))
    if kind == "mixture":
        centers = np.where(rng.random(n) < 0.5, -2.0, 2.0)
        pts = 0.3 * rng.standard_normal((n, 2))
        pts[:, 0] += centers
        return pts
    raise InputError(f"unknown toy dataset {kind!r}")


def train_toy(
    dataset: np.ndarray,
    epochs: int,
    seed: int = 0,
    *,
    lr: float = 1e-2,
    batch_size: int = 64,
    hidden: int = 128,
    depth: int = 2,
    callback: Callable[[int, float], None] | None = None,
) -> tuple[ToyVelocity, list[float]]:
    """Plain mini-batch gradient descent on the flow-matching loss.

    Returns the trained field and the per-step batch losses (mean over the batch).
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise InputError("dataset must be a non-empty (n, 2) array")
    rng = np.random.default_rng(seed)
    model = ToyVelocity(hidden=hidden, depth=depth, seed=seed)
    opt = SGD(lr)
    losses = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data) - batch_size + 1, batch_size):
            z0 = data[order[start : start + batch_size]]
            tau = rng.uniform(0.0, 1.0, batch_size)
            eps = rng.standard_normal(z0.shape)
            loss, grads = cfm_loss(model, z0, None, tau, eps)
            loss /= batch_size
            opt.step(model.params, {k: g / batch_size for k, g in grads.items()})
            losses.append(loss)
            if callback is not None:
                callback(step, loss)
            step += 1
    return model, losses
