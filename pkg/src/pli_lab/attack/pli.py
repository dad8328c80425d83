"""Server-side inversion of paired client/server logits.

The attacker is an observer on the federation.  Each time the server receives
the clients' public outputs it trains one decoder per client on the clean
public images, conditioned on the pair (server probabilities, client
probabilities), then pulls the decoder's output for the analytically optimal
query pair toward a prior image.  After the last round every decoder is
queried once per target label and the most distinctive, cleanest candidate is
kept.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from pli_lab.attack.optimal import optimal_logits
from pli_lab.attack.priors import PriorBank
from pli_lab.errors import ConfigurationError, NonFiniteError, ProtocolError
from pli_lab.federation.protocols import ServerView
from pli_lab.federation.training import fit
from pli_lab.metrics import ssim, tv
from pli_lab.nn import Adam, Network, adam_for, inversion_net, l2, softmax_tau

log = logging.getLogger(__name__)

Q_MODES = ("full", "client_only")


@dataclass(frozen=True)
class AttackConfig:
    tau: float = 3.0
    gamma: float = 0.03
    alpha: float = 5.0
    beta: float = 0.1
    epochs: int = 3                   # M: inversion epochs per round (and fine-tuning epochs)
    lr: float = 3e-5
    weight_decay: float = 1e-4
    batch_size: int = 8
    q_mode: str = "full"
    width: float = 1.0                # decoder channel multiplier
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.gamma < 0:
            raise ConfigurationError(f"gamma must be non-negative, got {self.gamma}")
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        if self.beta < 0:
            raise ConfigurationError(f"beta must be non-negative, got {self.beta}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0 or self.weight_decay < 0 or self.batch_size < 1:
            raise ConfigurationError("lr must be positive, weight_decay non-negative, batch_size >= 1")
        if self.q_mode not in Q_MODES:
            raise ConfigurationError(f"q_mode must be one of {Q_MODES}, got {self.q_mode!r}")
        if not self.width > 0:
            raise ConfigurationError(f"width must be positive, got {self.width}")

    def to_dict(self) -> dict:
        return asdict(self)


def encode_pair(server_probs: np.ndarray, client_probs: np.ndarray, q_mode: str = "full") -> np.ndarray:
    """Stack both probability blocks along channels at 1x1: (N, 2J, 1, 1)."""
    p0 = np.atleast_2d(server_probs)
    pk = np.atleast_2d(client_probs)
    if p0.shape != pk.shape:
        raise ConfigurationError(f"server/client probability shapes differ: {p0.shape} vs {pk.shape}")
    if q_mode == "client_only":
        p0 = np.zeros_like(p0)
    return np.concatenate([p0, pk], axis=1)[:, :, None, None].astype(np.float32)


def tempered(outputs: np.ndarray, tau: float, are_probs: bool = False) -> np.ndarray:
    """Temperature softmax of logits; probabilities are re-tempered through their logs."""
    outputs = np.asarray(outputs, dtype=np.float64)
    if are_probs:
        outputs = np.log(np.maximum(outputs, 1e-12))
    return softmax_tau(outputs, tau)


def _epoch_means(losses: list[float], steps: int) -> list[float]:
    return [float(np.mean(losses[i:i + steps])) for i in range(0, len(losses), steps)]


def train_inversion_public(net: Network, opt: Adam, inputs: np.ndarray, images: np.ndarray,
                           priors: np.ndarray, config: AttackConfig, rng: np.random.Generator) -> list[float]:
    """Fit the decoder on clean public pairs: reconstruction error plus gamma times prior distance.

    Returns the mean loss of each epoch.
    """
    if len(inputs) == 0:
        raise ConfigurationError("no clean public samples to train the inversion model on")
    gamma = config.gamma

    def loss_fn(out, idx):
        rec, g = l2(out, images[idx])
        if gamma == 0:
            return rec, g
        pr, gp = l2(out, priors[idx])
        return rec + gamma * pr, g + gamma * gp

    try:
        losses = fit(net, opt, inputs, loss_fn, config.epochs, config.batch_size, rng)
    except NonFiniteError as exc:
        raise NonFiniteError(f"inversion training on {len(inputs)} public samples: {exc}") from exc
    return _epoch_means(losses, -(-len(inputs) // config.batch_size))


def finetune_targets(net: Network, opt: Adam, queries: np.ndarray, priors: np.ndarray,
                     config: AttackConfig, rng: np.random.Generator) -> list[float]:
    """Pull the decoder's answers to the optimal queries toward the target priors.

    A no-op (empty curve, parameters untouched) when gamma is zero.
    """
    if config.gamma == 0 or len(queries) == 0:
        return []
    gamma = config.gamma

    def loss_fn(out, idx):
        v, g = l2(out, priors[idx])
        return gamma * v, gamma * g

    losses = fit(net, opt, queries, loss_fn, config.epochs, config.batch_size, rng)
    return _epoch_means(losses, -(-len(queries) // config.batch_size))


def reconstruct(net: Network, query: np.ndarray) -> np.ndarray:
    """Eval-mode decoder output for one encoded query (2J, 1, 1) or a batch of them."""
    single = query.ndim == 3
    out = net.predict(query[None] if single else query)
    return out[0] if single else out


def select_best(candidates: list[np.ndarray], beta: float) -> int:
    """Index minimizing summed SSIM to the other candidates plus beta times raw TV.

    Ties resolve to the lowest index.
    """
    if not candidates:
        raise ConfigurationError("select_best needs at least one candidate")
    k = len(candidates)
    if k == 1:
        return 0
    sim = np.zeros((k, k))
    for a in range(k):
        for b in range(a + 1, k):
            sim[a, b] = sim[b, a] = ssim(candidates[a], candidates[b])
    scores = sim.sum(axis=1) + beta * np.array([tv(c) for c in candidates])
    return int(np.argmin(scores))


@dataclass
class PLIResult:
    images: dict[int, np.ndarray] = field(default_factory=dict)      # selected image per target
    selected: dict[int, int] = field(default_factory=dict)           # chosen client per target
    candidates: dict[int, list[np.ndarray]] = field(default_factory=dict)


class PLIAttack:
    """Observer that runs the attack from what the server sees.

    It is given the target labels, a prior bank estimated from public data and
    the attack configuration; everything else comes from :class:`ServerView`.
    """

    def __init__(self, config: AttackConfig, targets: list[int], priors: PriorBank, dump=None):
        self.config = config
        self.targets = [int(j) for j in targets]
        self.priors = priors
        self.dump = dump
        self.models: list[Network] = []
        self.opts: list[Adam] = []
        self.rngs: list[np.random.Generator] = []
        self.class_index: dict[int, int] = {}
        self.num_outputs = 0
        self.rounds_seen = 0
        self.history: dict[str, list] = {"public_loss": [], "finetune_loss": []}

    # -- setup ---------------------------------------------------------------
    def _init_models(self, view: ServerView) -> None:
        k, _, j = view.client_outputs.shape
        size = view.public_x.shape[-1]
        streams = np.random.SeedSequence([self.config.seed, 7]).spawn(2 * k)
        for c in range(k):
            net = inversion_net(j, size, view.public_x.shape[1], width=self.config.width,
                                rng=np.random.default_rng(streams[c]), name=f"inversion{c}")
            self.models.append(net)
            self.opts.append(adam_for(net, self.config.lr, self.config.weight_decay))
            self.rngs.append(np.random.default_rng(streams[k + c]))
        self.history["public_loss"] = [[] for _ in range(k)]
        self.history["finetune_loss"] = [[] for _ in range(k)]
        self.num_outputs = j
        self.class_index = dict(view.class_index)
        for t in self.targets:
            if t not in self.class_index:
                raise ConfigurationError(f"target label {t} is not an output of the federated model")

    def queries(self) -> np.ndarray:
        """Encoded optimal query pair for every target label, in target order."""
        rows = [optimal_logits(self.class_index[t], self.num_outputs, self.config.alpha) for t in self.targets]
        if not rows:
            return np.zeros((0, 2 * self.num_outputs, 1, 1), np.float32)
        return encode_pair(np.stack([r.server for r in rows]), np.stack([r.client for r in rows]),
                           self.config.q_mode)

    # -- observer hook ---------------------------------------------------------
    def observe(self, view) -> None:
        if not isinstance(view, ServerView):
            raise ProtocolError("the logit inversion attack needs a ServerView")
        if not self.models:
            self._init_models(view)
        if view.client_outputs.shape[0] != len(self.models):
            raise ProtocolError("number of clients changed between rounds")
        cfg = self.config
        n0 = view.num_clean
        x0 = view.public_x[:n0]
        p0 = tempered(view.server.predict(x0), cfg.tau)
        labels = [None] * n0 if view.public_y is None else [int(y) for y in view.public_y[:n0]]
        sample_priors = self.priors.stack(labels)
        target_priors = self.priors.stack(self.targets) if self.targets else sample_priors[:0]
        queries = self.queries()
        for k, (net, opt, rng) in enumerate(zip(self.models, self.opts, self.rngs)):
            pk = tempered(view.client_outputs[k, :n0], cfg.tau, view.outputs_are_probs)
            inputs = encode_pair(p0, pk, cfg.q_mode)
            self.history["public_loss"][k].extend(
                train_inversion_public(net, opt, inputs, x0, sample_priors, cfg, rng))
            self.history["finetune_loss"][k].extend(
                finetune_targets(net, opt, queries, target_priors, cfg, rng))
            if self.dump is not None and self.targets:
                for t, img in zip(self.targets, reconstruct(net, queries)):
                    self.dump.add(view.round, k, t, img)
        self.rounds_seen += 1
        log.info("inversion round %d: public loss %s", view.round,
                 [round(h[-1], 4) for h in self.history["public_loss"]])

    # -- final reconstruction ------------------------------------------------------
    def finalize(self) -> PLIResult:
        result = PLIResult()
        if not self.targets:
            return result
        if not self.models:
            raise ProtocolError("the attack never observed a round")
        queries = self.queries()
        per_client = [reconstruct(net, queries) for net in self.models]
        for i, t in enumerate(self.targets):
            cands = [imgs[i] for imgs in per_client]
            best = select_best(cands, self.config.beta)
            result.candidates[t] = cands
            result.selected[t] = best
            result.images[t] = cands[best]
            if self.dump is not None:
                self.dump.add_selected(t, best, cands[best])
        return result
