"""Desk-scale toolkit for multi-view video generation and dynamic Gaussian fitting.

Subpackages and modules:

* :mod:`fourd.geometry`  cameras, depth lifting, point rendering, camera loops
* :mod:`fourd.attention` fused time-view attention masks and kernels
* :mod:`fourd.model`     micro multi-view velocity model
* :mod:`fourd.flow`      rectified flow training, sampling and distillation
* :mod:`fourd.splat`     dynamic Gaussian splatting
* :mod:`fourd.pipeline`  synthetic scenes, metrics and the benchmark
"""

from .errors import InputError, StateError

__version__ = "0.1.0"
__all__ = ["InputError", "StateError", "__version__"]
