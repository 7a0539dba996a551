"""Central finite differences used as the gradient oracle across the suite."""

import numpy as np


def central_difference(fn, x: np.ndarray, h: float = 1e-4, indices=None) -> np.ndarray:
    """d fn / d x by central differences; ``fn`` must read ``x`` (which is perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + h
        up = float(fn())
        flat[i] = old - h
        down = float(fn())
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    """Max-norm relative error with a floor so tiny gradients do not blow up."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)
