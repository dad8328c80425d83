"""Probability helpers and the loss zoo.

Loss functions return ``(value, grad)`` where ``grad`` is the derivative of the
scalar value with respect to the first argument.
"""

from __future__ import annotations

import numpy as np

from pli_lab.errors import DomainError

SIMPLEX_TOL = 1e-6


def softmax_tau(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``logits / tau`` (max-subtracted)."""
    if not tau > 0:
        raise DomainError(f"softmax temperature must be positive, got {tau}")
    z = np.asarray(logits) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Vector-Jacobian product of ``softmax_tau`` w.r.t. its logits."""
    inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner) / tau


def check_simplex(p: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    p = np.asarray(p)
    if (p < -tol).any():
        raise DomainError("probability vector has negative entries")
    sums = p.sum(axis=-1)
    if np.abs(sums - 1).max(initial=0.0) > tol:
        raise DomainError(f"probability rows must sum to 1 (max deviation {np.abs(sums - 1).max():.3g})")


def entropy(p: np.ndarray) -> np.ndarray | float:
    """Shannon entropy in nats along the last axis, with 0*ln 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    check_simplex(p)
    safe = np.where(p > 0, p, 1.0)
    h = -(np.where(p > 0, p * np.log(safe), 0.0)).sum(axis=-1)
    return float(h) if h.ndim == 0 else h


# -- losses -------------------------------------------------------------------

def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against integer labels."""
    labels = np.asarray(labels)
    n, j = logits.shape
    if labels.shape != (n,):
        raise DomainError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= j):
        raise DomainError(f"label out of range [0, {j})")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def soft_cross_entropy(logits: np.ndarray, target_probs: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against soft targets (rows of ``target_probs``)."""
    if logits.shape != target_probs.shape:
        raise DomainError(f"shape mismatch {logits.shape} vs {target_probs.shape}")
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -(target_probs * logp).sum(axis=1).mean()
    grad = (np.exp(logp) * target_probs.sum(axis=1, keepdims=True) - target_probs) / n
    return float(loss), grad


def l1_distill(logits: np.ndarray, target_logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error between logit vectors (element-averaged)."""
    if logits.shape != target_logits.shape:
        raise DomainError(f"shape mismatch {logits.shape} vs {target_logits.shape}")
    d = logits - target_logits
    return float(np.abs(d).mean()), np.sign(d) / d.size


def kl_distill(student_probs: np.ndarray, teacher_probs: np.ndarray,
               eps: float = 1e-12) -> tuple[float, np.ndarray]:
    """Batch-mean KL(teacher || student); gradient w.r.t. the student probabilities."""
    if student_probs.shape != teacher_probs.shape:
        raise DomainError(f"shape mismatch {student_probs.shape} vs {teacher_probs.shape}")
    n = student_probs.shape[0]
    s = np.maximum(student_probs, eps)
    t = teacher_probs
    tlog = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
    loss = (tlog - t * np.log(s)).sum() / n
    return float(loss), -t / s / n


def kl_distill_logits(student_logits: np.ndarray, teacher_probs: np.ndarray) -> tuple[float, np.ndarray]:
    """``kl_distill`` composed with a softmax; gradient w.r.t. the student logits."""
    p = softmax_tau(student_logits)
    loss, gp = kl_distill(p, teacher_probs)
    return loss, softmax_backward(p, gp)


def l2(x: np.ndarray, y: np.ndarray, eps: float = 1e-12) -> tuple[float, np.ndarray]:
    """Batch mean of per-sample Euclidean distances ||x_i - y_i||_2."""
    if x.shape != y.shape:
        raise DomainError(f"shape mismatch {x.shape} vs {y.shape}")
    n = x.shape[0]
    d = (x - y).reshape(n, -1)
    norms = np.sqrt((d * d).sum(axis=1))
    grad = np.where(norms[:, None] > eps, d / np.maximum(norms, eps)[:, None], 0.0) / n
    return float(norms.mean()), grad.reshape(x.shape).astype(x.dtype, copy=False)
