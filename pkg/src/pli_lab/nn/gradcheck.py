"""Central finite-difference gradient checks for layers and networks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from pli_lab.nn.layers import Layer


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar thunk ``f`` w.r.t. ``x`` (modified in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_layer(layer: Layer, x: np.ndarray, seed: int = 0, step: float = 1e-4) -> dict[str, float]:
    """Compare analytic and numeric gradients of ``sum(w * layer(x))`` for a random ``w``.

    Returns the relative error for the input and every parameter.
    """
    rng = np.random.default_rng(seed)
    y = layer.forward(x)
    w = rng.standard_normal(y.shape)

    def objective() -> float:
        return float((layer.forward(x) * w).sum())

    layer.forward(x)
    gx = layer.backward(w)
    analytic = {"input": gx}
    analytic.update({name: p.grad.copy() for name, p in layer.params.items()})
    errors = {"input": relative_error(analytic["input"], numeric_grad(objective, x, step))}
    for name, p in layer.params.items():
        errors[name] = relative_error(analytic[name], numeric_grad(objective, p.data, step))
    return errors
