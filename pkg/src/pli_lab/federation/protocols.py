"""FedMD, FedGEMS, DS-FL and FedAVG round logic.

Communication is in-process.  Observers (attackers) are notified at the point
where the server receives the clients' public logits, and only ever see a
:class:`ServerView` (or, in FedAVG, a :class:`GradientView`): never client
parameters or private data.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from pli_lab.data.split import DatasetSplit, labels_of, stack
from pli_lab.errors import ConfigurationError, DomainError, ProtocolError
from pli_lab.federation.training import accuracy, batch_gradient, fit
from pli_lab.nn import (
    Adam,
    Network,
    adam_for,
    classifier_net,
    cross_entropy,
    kl_distill_logits,
    l1_distill,
    soft_cross_entropy,
    softmax_tau,
)
from pli_lab.nn.functional import check_simplex, log_softmax

log = logging.getLogger(__name__)

SCHEMES = ("fedmd", "fedgems", "dsfl", "fedavg")


@dataclass(frozen=True)
class ProtocolConfig:
    scheme: str = "fedmd"
    rounds: int | None = None          # None: 5, or 3 for fedavg
    transfer_epochs: int = 5           # FedMD pretraining on D_p, then on D_k
    consensus_epochs: int = 1          # FedMD distillation toward the consensus
    revisit_epochs: int = 1            # FedMD private revisit
    server_epochs: int = 1
    public_epochs: int = 2             # FedGEMS / DS-FL client public phase
    private_epochs: int = 2            # FedGEMS / DS-FL client private phase
    local_epochs: int = 2              # FedAVG local training
    epoch_scale: float = 1.0
    lr: float = 1e-3
    batch_size: int = 64
    fedgems_epsilon: float = 0.75
    dsfl_era_temperature: float = 0.1
    workers: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.rounds is not None and self.rounds < 1:
            raise ConfigurationError(f"rounds must be positive, got {self.rounds}")
        counts = (self.transfer_epochs, self.consensus_epochs, self.revisit_epochs, self.server_epochs,
                  self.public_epochs, self.private_epochs, self.local_epochs)
        if min(counts) < 0 or self.batch_size < 1 or self.epoch_scale <= 0 or self.lr <= 0:
            raise ConfigurationError("epoch counts must be >= 0; batch size, epoch_scale and lr positive")
        if not 0 < self.fedgems_epsilon <= 1:
            raise ConfigurationError(f"fedgems_epsilon must lie in (0, 1], got {self.fedgems_epsilon}")
        if self.dsfl_era_temperature <= 0:
            raise ConfigurationError("dsfl_era_temperature must be positive")

    @property
    def num_rounds(self) -> int:
        if self.rounds is not None:
            return self.rounds
        return 3 if self.scheme == "fedavg" else 5

    def epochs(self, name: str) -> int:
        base = getattr(self, f"{name}_epochs")
        return 0 if base == 0 else max(1, int(round(base * self.epoch_scale)))


def era(mean_probs: np.ndarray, temperature: float = 0.1) -> np.ndarray:
    """Entropy-reduction aggregation: a low-temperature softmax of averaged soft labels."""
    if temperature <= 0:
        raise DomainError(f"ERA temperature must be positive, got {temperature}")
    check_simplex(mean_probs)
    return softmax_tau(mean_probs, temperature)


@dataclass
class ServerView:
    """Everything an honest-but-curious distillation server legitimately holds."""

    round: int
    scheme: str
    client_outputs: np.ndarray        # (K, N_p, J) logits, or probabilities for DS-FL
    outputs_are_probs: bool
    server: Network
    public_x: np.ndarray
    public_y: np.ndarray | None       # None when public labels are withheld
    num_clean: int                    # rows [0, num_clean) of the public set form D_0
    class_index: dict[int, int]       # corpus label -> model output index

    @property
    def num_clients(self) -> int:
        return self.client_outputs.shape[0]


@dataclass
class GradientView:
    """What a FedAVG server holds: global weights and per-client gradients."""

    round: int
    weights: list[np.ndarray]
    client_grads: list[list[np.ndarray]]
    architecture: Network             # a copy carrying ``weights``
    class_index: dict[int, int]


class Observer(Protocol):
    def observe(self, view) -> None: ...


@dataclass
class FederationState:
    server: Network
    clients: list[Network]
    registry: dict[int, np.ndarray] = field(default_factory=dict)
    consensus: np.ndarray | None = None
    round: int = 0
    pretrained: bool = False
    fedavg_grads: dict[int, list[list[np.ndarray]]] = field(default_factory=dict)


class Federation:
    """Holds models, optimizers and per-client RNG streams for one simulated run."""

    def __init__(self, split: DatasetSplit, config: ProtocolConfig, seed: int = 0,
                 image_size: int | None = None):
        self.split = split
        self.config = config
        self.seed = seed
        self.scheme = config.scheme
        labeled = split.labeled_public and config.scheme != "dsfl"
        if config.scheme == "dsfl":
            # unlabeled public data: the classifier only spans the private classes
            self.class_index = {j: i for i, j in enumerate(split.targets)}
        else:
            self.class_index = {j: j for j in range(split.num_classes)}
        self.num_outputs = len(self.class_index)
        self.labeled_public = labeled

        self.public_x = stack(split.public)
        self.public_y = labels_of(split.public) if labeled else None
        self.private_x = [stack(p) if p else np.zeros((0,) + self.public_x.shape[1:], np.float32)
                          for p in split.private]
        self.private_y = [np.array([self.class_index[r.label] for r in p], dtype=np.int64)
                          for p in split.private]
        for k, x in enumerate(self.private_x):
            if len(x) == 0:
                raise ProtocolError(f"client {k} has an empty private dataset")
        size = image_size or self.public_x.shape[-1]

        streams = np.random.SeedSequence(seed).spawn(2 * (split.num_clients + 1))
        init_rngs = [np.random.default_rng(s) for s in streams[:split.num_clients + 1]]
        self.rngs = [np.random.default_rng(s) for s in streams[split.num_clients + 1:]]
        server = classifier_net(self.num_outputs, size, rng=init_rngs[0], name="server")
        clients = [classifier_net(self.num_outputs, size, rng=init_rngs[k + 1], name=f"client{k}")
                   for k in range(split.num_clients)]
        self.state = FederationState(server=server, clients=clients)
        self.server_opt = adam_for(server, config.lr)
        self.client_opts = [adam_for(c, config.lr) for c in clients]
        self.era_calls = 0
        self.history: dict[str, list] = {"client_private_loss": [[] for _ in clients]}

    # -- helpers ----------------------------------------------------------------
    @property
    def server_rng(self) -> np.random.Generator:
        return self.rngs[0]

    def _map(self, fn: Callable[[int], object]) -> list:
        ks = range(self.split.num_clients)
        if self.config.workers > 1:
            with ThreadPoolExecutor(self.config.workers) as pool:
                return list(pool.map(fn, ks))
        return [fn(k) for k in ks]

    def _fit(self, net: Network, opt: Adam, x, loss_fn, epochs: int, rng) -> list[float]:
        if epochs == 0:
            return []
        return fit(net, opt, x, loss_fn, epochs, self.config.batch_size, rng)

    def _fit_private(self, k: int, epochs: int) -> list[float]:
        y = self.private_y[k]
        losses = self._fit(self.state.clients[k], self.client_opts[k], self.private_x[k],
                           lambda out, idx: cross_entropy(out, y[idx]), epochs, self.rngs[k + 1])
        self.history["client_private_loss"][k].extend(losses)
        return losses

    def _fit_public_labels(self, net, opt, epochs, rng):
        if self.public_y is None:
            raise ProtocolError("labeled public training requested but public labels are withheld")
        y = self.public_y
        return self._fit(net, opt, self.public_x, lambda out, idx: cross_entropy(out, y[idx]), epochs, rng)

    def collect_outputs(self, probs: bool = False) -> np.ndarray:
        outs = []
        for net in self.state.clients:
            logits = net.predict(self.public_x)
            outs.append(softmax_tau(logits) if probs else logits)
        reg = np.stack(outs).astype(np.float32)
        expected = (self.split.num_clients, len(self.public_x), self.num_outputs)
        if reg.shape != expected:
            raise ProtocolError(f"registry shape {reg.shape} != {expected}")
        return reg

    def _record(self, probs: bool = False) -> np.ndarray:
        reg = self.collect_outputs(probs)
        self.state.registry[self.state.round] = reg
        return reg

    def view(self) -> ServerView:
        reg = self.state.registry.get(self.state.round)
        if reg is None:
            raise ProtocolError(f"registry for round {self.state.round} is incomplete")
        return ServerView(round=self.state.round, scheme=self.scheme, client_outputs=reg,
                          outputs_are_probs=self.scheme == "dsfl", server=self.state.server,
                          public_x=self.public_x, public_y=self.public_y,
                          num_clean=self.split.num_clean, class_index=dict(self.class_index))

    def _notify(self, observers, view) -> None:
        for ob in observers:
            ob.observe(view)

    # -- pretraining ---------------------------------------------------------------
    def pretrain_clients(self) -> FederationState:
        """Transfer phase: each client trains on labeled public data, then on its private set."""
        if self.state.round != 0:
            raise ProtocolError("pretraining must happen before the first round")
        epochs = self.config.epochs("transfer") if self.scheme == "fedmd" else 0
        if epochs and self.public_y is not None:
            def work(k):
                self._fit_public_labels(self.state.clients[k], self.client_opts[k], epochs, self.rngs[k + 1])
                self._fit_private(k, epochs)
            self._map(work)
        self.state.pretrained = True
        return self.state

    # -- rounds ----------------------------------------------------------------------
    def round_fedmd(self, observers=()) -> FederationState:
        if not self.state.pretrained:
            raise ProtocolError("FedMD rounds require pretrain_clients() first")
        self.state.round += 1
        reg = self._record()
        self._notify(observers, self.view())
        consensus = self.aggregate_mean(reg)
        self.state.consensus = consensus

        def work(k):
            net, opt, rng = self.state.clients[k], self.client_opts[k], self.rngs[k + 1]
            self._fit(net, opt, self.public_x, lambda out, idx: l1_distill(out, consensus[idx]),
                      self.config.epochs("consensus"), rng)
            self._fit_private(k, self.config.epochs("revisit"))
        self._map(work)
        self._fit_public_labels(self.state.server, self.server_opt, self.config.epochs("server"),
                                self.server_rng)
        return self.state

    @staticmethod
    def aggregate_mean(registry: np.ndarray) -> np.ndarray:
        if registry.ndim != 3 or registry.shape[0] == 0:
            raise ProtocolError(f"cannot aggregate registry of shape {registry.shape}")
        return registry.mean(axis=0)

    def _fedgems_server_loss(self, latest: np.ndarray | None, consensus: np.ndarray | None):
        eps = self.config.fedgems_epsilon
        y = self.public_y

        def loss_fn(out, idx):
            ce, g = cross_entropy(out, y[idx])
            if latest is None and consensus is None:
                return ce, g
            n = len(idx)
            right = out.argmax(axis=1) == y[idx]
            teacher = np.zeros_like(out, dtype=np.float64)
            weight = np.zeros(n)
            if consensus is not None:
                teacher[right] = softmax_tau(consensus[idx][right])
                weight[right] = 1.0
            if latest is not None:
                client_logits = latest[:, idx]                      # (K, n, J)
                correct = client_logits.argmax(axis=2) == y[idx][None, :]
                for i in np.flatnonzero(~right):
                    ok = correct[:, i]
                    if ok.any():
                        teacher[i] = softmax_tau(client_logits[ok, i].mean(axis=0))
                        weight[i] = eps
            active = weight > 0
            if not active.any():
                return ce, g
            logp = log_softmax(out[active].astype(np.float64))
            p = np.exp(logp)
            t = teacher[active]
            kl_rows = (np.where(t > 0, t * np.log(np.where(t > 0, t, 1)), 0) - t * logp).sum(1)
            kl = float((weight[active] * kl_rows).sum() / n)
            gkl = np.zeros_like(out, dtype=np.float64)
            gkl[active] = (p - t) * (weight[active] / n)[:, None]
            return ce + kl, g + gkl
        return loss_fn

    def round_fedgems(self, observers=()) -> FederationState:
        if self.public_y is None:
            raise ProtocolError("FedGEMS needs a labeled public dataset")
        self.state.round += 1
        latest = self.state.registry.get(self.state.round - 1)
        self._fit(self.state.server, self.server_opt, self.public_x,
                  self._fedgems_server_loss(latest, self.state.consensus),
                  self.config.epochs("server"), self.server_rng)
        consensus = self.state.server.predict(self.public_x)
        self.state.consensus = consensus
        target = softmax_tau(consensus)
        y = self.public_y

        def public_loss(out, idx):
            ce, g = cross_entropy(out, y[idx])
            kl, gk = kl_distill_logits(out, target[idx])
            return ce + kl, g + gk

        def work(k):
            net, opt, rng = self.state.clients[k], self.client_opts[k], self.rngs[k + 1]
            self._fit(net, opt, self.public_x, public_loss, self.config.epochs("public"), rng)
            self._fit_private(k, self.config.epochs("private"))
        self._map(work)
        self._record()
        self._notify(observers, self.view())
        return self.state

    def round_dsfl(self, observers=()) -> FederationState:
        self.state.round += 1
        self._map(lambda k: self._fit_private(k, self.config.epochs("private")))
        reg = self._record(probs=True)
        self._notify(observers, self.view())
        consensus = era(self.aggregate_mean(reg).astype(np.float64), self.config.dsfl_era_temperature)
        self.era_calls += 1
        self.state.consensus = consensus

        def distill(out, idx):
            return soft_cross_entropy(out, consensus[idx])

        def work(k):
            self._fit(self.state.clients[k], self.client_opts[k], self.public_x, distill,
                      self.config.epochs("public"), self.rngs[k + 1])
        self._map(work)
        self._fit(self.state.server, self.server_opt, self.public_x, distill,
                  self.config.epochs("server"), self.server_rng)
        return self.state

    def round_fedavg(self, observers=()) -> FederationState:
        sig = self.state.server.signature()
        for c in self.state.clients:
            if c.signature() != sig:
                raise ProtocolError("FedAVG requires homogeneous client architectures")
        self.state.round += 1
        global_w = self.state.server.get_weights()

        def work(k):
            net = self.state.clients[k]
            net.set_weights(global_w)
            y = self.private_y[k]
            grads = batch_gradient(net, self.private_x[k], lambda out, idx: cross_entropy(out, y[idx]))
            opt = adam_for(net, self.config.lr)
            self._fit(net, opt, self.private_x[k], lambda out, idx: cross_entropy(out, y[idx]),
                      self.config.epochs("local"), self.rngs[k + 1])
            return grads, net.get_weights()
        results = self._map(work)
        grads = [g for g, _ in results]
        self.state.fedavg_grads[self.state.round] = grads
        arch = classifier_net(self.num_outputs, self.public_x.shape[-1], name="fedavg_global")
        arch.set_weights(global_w)
        self._notify(observers, GradientView(self.state.round, global_w, grads, arch, dict(self.class_index)))
        sizes = np.array([len(x) for x in self.private_x], dtype=np.float64)
        new_w = average_weights([w for _, w in results], sizes)
        self.state.server.set_weights(new_w)
        return self.state

    # -- driver ------------------------------------------------------------------------
    def run(self, observers=(), on_round_end: Callable[["Federation"], None] | None = None) -> FederationState:
        step = {"fedmd": self.round_fedmd, "fedgems": self.round_fedgems,
                "dsfl": self.round_dsfl, "fedavg": self.round_fedavg}[self.scheme]
        self.pretrain_clients()
        for _ in range(self.config.num_rounds):
            step(observers)
            log.info("%s round %d done", self.scheme, self.state.round)
            if on_round_end is not None:
                on_round_end(self)
        return self.state

    # -- diagnostics -----------------------------------------------------------------------
    def client_accuracy(self, k: int) -> float:
        return accuracy(self.state.clients[k], self.private_x[k], self.private_y[k])


def average_weights(weight_sets: list[list[np.ndarray]], sizes: np.ndarray | None = None) -> list[np.ndarray]:
    """Data-size-weighted parameter average (plain mean when ``sizes`` is None)."""
    if not weight_sets:
        raise ProtocolError("no client weights to average")
    sizes = np.ones(len(weight_sets)) if sizes is None else np.asarray(sizes, dtype=np.float64)
    w = sizes / sizes.sum()
    return [sum(wk * ws[i].astype(np.float64) for wk, ws in zip(w, weight_sets)).astype(weight_sets[0][i].dtype)
            for i in range(len(weight_sets[0]))]
