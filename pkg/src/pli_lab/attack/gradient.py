"""Gradient-based baselines against parameter-sharing federations.

``recover_last_layer_input`` is the closed-form recovery of the input to a
fully connected layer with bias from its weight and bias gradients.
:class:`GradInversion` optimizes one dummy image per inferred label so that
its model gradient points in the same direction as a client's shared
gradient, the usual cosine-matching attack with a total-variation penalty.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from pli_lab.attack.pli import PLIResult, select_best
from pli_lab.errors import ConfigurationError, NonFiniteError, ProtocolError, RecoveryError
from pli_lab.federation.protocols import GradientView
from pli_lab.metrics import tv_grad, tv_normalized
from pli_lab.nn import Network, cross_entropy
from pli_lab.nn.layers import Parameter
from pli_lab.nn.network import classifier_net
from pli_lab.nn.optim import Adam

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradAttackConfig:
    steps: int = 200           # optimization steps per round
    lr: float = 0.3
    tv_weight: float = 0.01
    beta: float = 0.1          # selection TV weight when several clients claim a label
    fd_step: float = 1e-7      # relative size of the weight perturbation in the Hessian-vector product
    clip: bool = True          # keep dummy images inside the pixel range
    lr_decay: bool = True      # x0.1 at 3/8, 5/8 and 7/8 of each round's steps
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.tv_weight < 0 or self.beta < 0:
            raise ConfigurationError("tv_weight and beta must be non-negative")
        if not self.fd_step > 0:
            raise ConfigurationError(f"fd_step must be positive, got {self.fd_step}")

    def to_dict(self) -> dict:
        return asdict(self)


def infer_labels(bias_grad: np.ndarray) -> list[int]:
    """Output indices whose bias-gradient entry is negative.

    Under softmax cross-entropy the bias gradient is ``mean(p) - label frequency``,
    which is positive for every absent label.
    """
    g = np.asarray(bias_grad, dtype=np.float64)
    if not np.any(g):
        log.warning("bias gradient is identically zero; no labels can be inferred")
        return []
    return [int(i) for i in np.flatnonzero(g < 0)]


def recover_last_layer_input(weight_grad: np.ndarray, bias_grad: np.ndarray,
                             tol: float = 0.0) -> np.ndarray:
    """Input z of ``A z + b`` from ``dL/dA = g z^T`` and ``dL/db = g`` (single sample).

    Uses the first row with a non-zero bias gradient.
    """
    weight_grad = np.asarray(weight_grad, dtype=np.float64)
    bias_grad = np.asarray(bias_grad, dtype=np.float64)
    if weight_grad.ndim != 2 or bias_grad.shape != (weight_grad.shape[0],):
        raise ConfigurationError(f"incompatible gradient shapes {weight_grad.shape} and {bias_grad.shape}")
    rows = np.flatnonzero(np.abs(bias_grad) > tol)
    if rows.size == 0:
        raise RecoveryError("every bias-gradient entry is zero; the layer input cannot be recovered")
    i = rows[0]
    return weight_grad[i] / bias_grad[i]


def row_estimates(weight_grad: np.ndarray, bias_grad: np.ndarray, tol: float = 0.0) -> np.ndarray:
    """``weight_grad[i] / bias_grad[i]`` for every usable row (one estimate of z per row)."""
    rows = np.flatnonzero(np.abs(bias_grad) > tol)
    return np.asarray(weight_grad, dtype=np.float64)[rows] / np.asarray(bias_grad, dtype=np.float64)[rows, None]


# -- cosine gradient matching ----------------------------------------------------------

def _flat(arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays])


def _param_grads(net: Network, x: np.ndarray, y: np.ndarray) -> list[np.ndarray]:
    net.train()
    out = net.forward(x)
    _, g = cross_entropy(out, y)
    net.backward(g, need_input_grad=False)
    return [p.grad for p in net.parameters()]


def _input_grad(net: Network, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    out = net.forward(x)
    _, g = cross_entropy(out, y)
    return net.backward(g)


def matching_loss(net: Network, x: np.ndarray, y: np.ndarray, target: np.ndarray,
                  tv_weight: float, fd_step: float = 1e-7) -> tuple[float, np.ndarray]:
    """``1 - cos(grad_W l(x), target) + tv_weight * TV(x)/size`` and its gradient in ``x``.

    The input gradient of the cosine term needs a Hessian-vector product; it is
    taken as a central difference of input gradients under a weight
    perturbation along ``dL/d(grad_W)``.
    """
    gw = _flat(_param_grads(net, x, y))
    n_g = np.linalg.norm(gw)
    n_t = np.linalg.norm(target)
    if n_g == 0 or n_t == 0:
        raise NonFiniteError("gradient matching is undefined for a zero gradient")
    cos = float(gw @ target / (n_g * n_t))
    v = -(target / (n_g * n_t) - cos * gw / (n_g * n_g))
    params = net.parameters()
    w0 = [p.data.copy() for p in params]
    n_w = np.linalg.norm(_flat(w0))
    h = fd_step * max(n_w, 1.0) / max(np.linalg.norm(v), 1e-300)
    offsets = []
    pos = 0
    for p in params:
        offsets.append(v[pos:pos + p.data.size].reshape(p.data.shape))
        pos += p.data.size
    try:
        for p, w, d in zip(params, w0, offsets):
            p.data[...] = w + h * d
        g_plus = _input_grad(net, x, y)
        for p, w, d in zip(params, w0, offsets):
            p.data[...] = w - h * d
        g_minus = _input_grad(net, x, y)
    finally:
        for p, w in zip(params, w0):
            p.data[...] = w
        net.zero_grad()
    grad = (g_plus - g_minus) / (2 * h)
    loss = 1.0 - cos
    if tv_weight:
        loss += tv_weight * tv_normalized(x)
        grad = grad + tv_weight * tv_grad(x) / x.size
    return loss, grad


def _double_net(view: GradientView) -> Network:
    arch = view.architecture
    j = arch.output_shape[0]
    c, size = arch.input_shape[0], arch.input_shape[-1]
    net = classifier_net(j, size, c, dtype=np.float64, name="grad_attack")
    if net.signature() != arch.signature():
        raise ProtocolError("gradient attack only supports the shared classifier architecture")
    net.set_weights([w.astype(np.float64) for w in view.weights])
    return net


@dataclass
class _ClientState:
    labels: list[int]
    x: Parameter
    opt: Adam
    losses: list[float] = field(default_factory=list)


class GradInversion:
    """Observer of a parameter-sharing federation that inverts each client's gradient."""

    def __init__(self, config: GradAttackConfig, targets: list[int]):
        self.config = config
        self.targets = [int(j) for j in targets]
        self.clients: list[_ClientState | None] = []
        self.class_index: dict[int, int] = {}
        self.rounds_seen = 0
        self.restarts = 0
        self._rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))

    def _init_client(self, labels: list[int], shape) -> _ClientState:
        x = Parameter(self._rng.standard_normal((len(labels),) + tuple(shape)))
        return _ClientState(labels, x, Adam([x], lr=self.config.lr, names=["dummy"]))

    def observe(self, view) -> None:
        if not isinstance(view, GradientView):
            raise ProtocolError("gradient inversion needs a GradientView")
        net = _double_net(view)
        if not self.clients:
            self.class_index = dict(view.class_index)
            for grads in view.client_grads:
                labels = infer_labels(grads[-1])
                self.clients.append(self._init_client(labels, net.input_shape) if labels else None)
        for k, grads in enumerate(view.client_grads):
            st = self.clients[k]
            if st is not None:
                self._optimize(k, net, st, _flat(grads).astype(np.float64))
        self.rounds_seen += 1

    def _optimize(self, k: int, net: Network, st: _ClientState, target: np.ndarray) -> None:
        cfg = self.config
        y = np.asarray(st.labels)
        restarted = False
        step = 0
        milestones = [cfg.steps * f // 8 for f in (3, 5, 7)] if cfg.lr_decay else []
        while step < cfg.steps:
            st.opt.state.lr = cfg.lr * 0.1 ** sum(step >= m for m in milestones)
            loss, grad = matching_loss(net, st.x.data, y, target, cfg.tv_weight, cfg.fd_step)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                if restarted:
                    raise NonFiniteError(f"gradient inversion for client {k} diverged twice")
                log.warning("client %d: non-finite matching loss; restarting from fresh noise", k)
                restarted = True
                self.restarts += 1
                fresh = self._init_client(st.labels, st.x.data.shape[1:])
                st.x, st.opt = fresh.x, fresh.opt
                continue
            st.x.grad = grad
            st.opt.step()
            if cfg.clip:
                np.clip(st.x.data, -1.0, 1.0, out=st.x.data)
            st.losses.append(loss)
            step += 1

    def finalize(self) -> PLIResult:
        """One image per target label; labels no client claimed get a blank image."""
        result = PLIResult()
        inverse = {m: j for j, m in self.class_index.items()}
        claims: dict[int, list[tuple[int, np.ndarray]]] = {}
        shape = None
        for k, st in enumerate(self.clients):
            if st is None:
                continue
            shape = st.x.data.shape[1:]
            for row, m in enumerate(st.labels):
                claims.setdefault(inverse.get(m, m), []).append((k, st.x.data[row].astype(np.float32)))
        for t in self.targets:
            if t not in claims:
                if shape is None:
                    raise ProtocolError("no client labels were inferred")
                result.images[t] = np.zeros(shape, np.float32)
                result.selected[t] = -1
                continue
            owners, cands = zip(*claims[t])
            best = select_best(list(cands), self.config.beta)
            result.candidates[t] = list(cands)
            result.selected[t] = owners[best]
            result.images[t] = cands[best]
        return result
