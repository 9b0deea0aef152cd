"""Independent oracles shared by the test modules."""
from __future__ import annotations

import numpy as np

from ecgnn import numkit as nk


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f(x)`` by central differences, coordinate by coordinate."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x.copy())
        x[idx] = old - h
        fm = f(x.copy())
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def param_grad(build, param: nk.Param) -> np.ndarray:
    """Analytic gradient of ``build()`` (a scalar Tensor) w.r.t. ``param``."""
    param.zero_grad()
    nk.backward(build())
    return param.grad.copy()


def check_param(build, param: nk.Param, h: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients of ``build`` w.r.t. ``param``."""
    analytic = param_grad(build, param)
    saved = param.data

    def f(x):
        param.data = x
        out = float(build().data)
        param.data = saved
        return out

    numeric = central_diff(f, saved, h)
    param.data = saved
    return max_rel(analytic, numeric)


def projection_loss(t: nk.Tensor, seed: int = 0) -> nk.Tensor:
    """sum(R * t) with a fixed random R, so every output entry matters."""
    R = np.random.default_rng(seed).standard_normal(t.shape)
    return nk.sum_(nk.mul(t, R))
