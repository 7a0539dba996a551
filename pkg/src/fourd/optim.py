"""Optimizers operating in place on dicts of numpy parameter arrays."""

from __future__ import annotations

import numpy as np


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            params[k] -= self.lr * g


class Adam:
    """Adam with a learning rate per parameter name (``lr`` may be a dict or a scalar)."""

    def __init__(self, lr, betas=(0.9, 0.999), eps: float = 1e-15):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def lr_for(self, name: str) -> float:
        if isinstance(self.lr, dict):
            return self.lr[name.split(".")[0]] if name not in self.lr else self.lr[name]
        return self.lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if k not in self.m or self.m[k].shape != g.shape:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
                self.t[k] = 0
            self.t[k] += 1
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t[k])
            vhat = v / (1 - self.b2 ** self.t[k])
            params[k] -= self.lr_for(k) * mhat / (np.sqrt(vhat) + self.eps)

    def select_rows(self, name: str, rows: np.ndarray) -> None:
        """Keep/duplicate moment rows to follow a resized parameter (rows may repeat)."""
        if name in self.m:
            self.m[name] = self.m[name][rows]
            self.v[name] = self.v[name][rows]

    def append_rows(self, name: str, n: int) -> None:
        if name in self.m:
            pad = np.zeros((n,) + self.m[name].shape[1:], dtype=self.m[name].dtype)
            self.m[name] = np.concatenate([self.m[name], pad])
            self.v[name] = np.concatenate([self.v[name], pad])
