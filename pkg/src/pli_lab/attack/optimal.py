"""Closed-form optimal probability pair for a target label, and the quality score it maximizes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pli_lab.errors import DomainError
from pli_lab.nn.functional import check_simplex, entropy


@dataclass(frozen=True)
class OptimalLogits:
    """Query pair fed to the inversion model for one target label."""

    client: np.ndarray   # one-hot at the target
    server: np.ndarray   # target entry e^{1/alpha} times every other entry
    label: int

    def __post_init__(self):
        check_simplex(self.client, tol=1e-9)
        check_simplex(self.server, tol=1e-9)


def optimal_logits(j: int, num_classes: int, alpha: float) -> OptimalLogits:
    """Maximizer of ``quality_q`` over pairs of simplex vectors.

    The client part is one-hot at ``j``.  For the server part, stationarity of
    ``p[j] + alpha * H(p)`` forces every non-target entry to the same value and
    the target entry to exceed it by the factor ``exp(1/alpha)``.
    """
    if num_classes < 2:
        raise DomainError(f"need at least two classes, got {num_classes}")
    if not 0 <= j < num_classes:
        raise DomainError(f"target {j} outside [0, {num_classes})")
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    client = np.zeros(num_classes)
    client[j] = 1.0
    w = np.exp(1.0 / alpha)
    server = np.full(num_classes, 1.0 / (num_classes - 1 + w))
    server[j] = w / (num_classes - 1 + w)
    return OptimalLogits(client=client, server=server, label=j)


def quality_q(p_k: np.ndarray, p_0: np.ndarray, j: int, alpha: float) -> float:
    """``p_k[j] + p_0[j] + alpha * H(p_0)`` with the entropy in nats."""
    p_k = np.asarray(p_k, dtype=np.float64)
    p_0 = np.asarray(p_0, dtype=np.float64)
    check_simplex(p_k)
    check_simplex(p_0)
    return float(p_k[j] + p_0[j] + alpha * entropy(p_0))
