"""Adam with optional decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pli_lab.errors import ConfigurationError, NonFiniteError
from pli_lab.nn.layers import Parameter


@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 names: list[str] | None = None):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.names = names or [f"param[{i}]" for i in range(len(self.params))]
        self.state = AdamState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps,
                               m=[np.zeros_like(p.data) for p in self.params],
                               v=[np.zeros_like(p.data) for p in self.params])

    def step(self) -> None:
        st = self.state
        for name, p in zip(self.names, self.params):
            if p.grad is not None and not np.isfinite(p.grad).all():
                bad = int((~np.isfinite(p.grad)).sum())
                raise NonFiniteError(
                    f"non-finite gradient in {name} (shape {p.data.shape}, {bad} bad entries) "
                    f"at Adam step {st.step + 1}")
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1 - b1 ** st.step
        c2 = 1 - b2 ** st.step
        for p, m, v in zip(self.params, st.m, st.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if st.weight_decay:
                p.data *= 1 - st.lr * st.weight_decay
            p.data -= (st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_for(net, lr: float = 1e-3, weight_decay: float = 0.0) -> Adam:
    named = net.named_parameters()
    return Adam([p for _, p in named], lr=lr, weight_decay=weight_decay, names=[n for n, _ in named])
