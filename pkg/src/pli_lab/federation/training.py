"""Mini-batch training loops shared by protocols."""

from __future__ import annotations

from typing import Callable

import numpy as np

from pli_lab.errors import NonFiniteError
from pli_lab.nn import Adam, Network

# (outputs, batch indices) -> (loss, d loss / d outputs)
LossFn = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


def fit(net: Network, opt: Adam, x: np.ndarray, loss_fn: LossFn, epochs: int, batch_size: int,
        rng: np.random.Generator) -> list[float]:
    """Run ``epochs`` shuffled passes over ``x``; returns the per-step loss curve."""
    net.train()
    losses = []
    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out = net.forward(x[idx])
            loss, grad = loss_fn(out, idx)
            if not np.isfinite(loss):
                raise NonFiniteError(f"{net.name}: non-finite training loss {loss}")
            net.backward(grad.astype(out.dtype, copy=False), need_input_grad=False)
            opt.step()
            losses.append(loss)
    return losses


def batch_gradient(net: Network, x: np.ndarray, loss_fn: LossFn, batch_size: int = 256) -> list[np.ndarray]:
    """Full-data gradient of a mean loss, accumulated over chunks (no parameter update)."""
    n = len(x)
    total = [np.zeros_like(p.data, dtype=np.float64) for p in net.parameters()]
    net.train()
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        out = net.forward(x[idx])
        _, grad = loss_fn(out, idx)
        net.backward(grad * (len(idx) / n), need_input_grad=False)
        for acc, p in zip(total, net.parameters()):
            acc += p.grad
    net.zero_grad()
    return [g.astype(np.float32) for g in total]


def accuracy(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return float("nan")
    return float((net.predict(x).argmax(axis=1) == y).mean())
