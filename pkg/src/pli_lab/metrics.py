"""Image similarity, total variation, attack success and confidence-gap metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from pli_lab.errors import ConfigurationError, DomainError
from pli_lab.nn import softmax_tau
from pli_lab.nn.functional import entropy

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DATA_RANGE = 2.0


def _gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


_TAPS = _gaussian_taps()


def _blur(x: np.ndarray) -> np.ndarray:
    return correlate1d(correlate1d(x, _TAPS, axis=-1, mode="reflect"), _TAPS, axis=-2, mode="reflect")


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = DATA_RANGE) -> float:
    """Mean structural similarity of two C x H x W images (Gaussian 11x11 window, sigma 1.5).

    Local statistics use Gaussian-weighted moments; the SSIM map is averaged
    over positions where the whole window fits, then over channels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    return float(_ssim_from_stats(a, _moments(a), b[None], _moments(b[None]), data_range)[0])


def _moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise DomainError(f"images must be at least {SSIM_WINDOW} pixels per side")
    mu = _blur(x)
    return mu, _blur(x * x) - mu * mu


def _ssim_from_stats(a, stats_a, refs, stats_refs, data_range=DATA_RANGE) -> np.ndarray:
    """SSIM of one image ``a`` (C x H x W) against a stack ``refs`` (R x C x H x W)."""
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, saa = stats_a
    mu_b, sbb = stats_refs
    sab = _blur(a * refs) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    r = SSIM_WINDOW // 2
    smap = (num / den)[..., r:-r, r:-r]
    return smap.mean(axis=(-2, -1)).mean(axis=-1)


def tv(x: np.ndarray) -> float:
    """Anisotropic total variation: sum of absolute horizontal and vertical differences."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.abs(np.diff(x, axis=-1)).sum() + np.abs(np.diff(x, axis=-2)).sum())


def tv_normalized(x: np.ndarray) -> float:
    """``tv`` divided by the pixel count (comparable across resolutions)."""
    return tv(x) / np.asarray(x).size


def tv_grad(x: np.ndarray) -> np.ndarray:
    """A subgradient of ``tv`` (sign of each difference; zero at ties)."""
    g = np.zeros_like(x, dtype=np.float64)
    dh = np.sign(np.diff(x, axis=-1))
    dv = np.sign(np.diff(x, axis=-2))
    g[..., :, 1:] += dh
    g[..., :, :-1] -= dh
    g[..., 1:, :] += dv
    g[..., :-1, :] -= dv
    return g


# -- attack success ------------------------------------------------------------------

@dataclass
class References:
    """Per-label mean images used to judge reconstructions."""

    private: dict[int, np.ndarray]   # x_j for every private label
    public: dict[int, np.ndarray]    # x_p for every public (non-target) label


def label_means(images: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): images[labels == c].mean(axis=0) for c in np.unique(labels)}


def build_references(split) -> References:
    """Private means per target label; public means per non-target label from the clean public set.

    Auxiliary-domain images of target labels are excluded from the public
    references: they depict the private identities themselves.
    """
    from pli_lab.data.split import labels_of, stack

    private = [r for part in split.private for r in part]
    return References(private=label_means(stack(private), labels_of(private)),
                      public=label_means(stack(split.public_clean), labels_of(split.public_clean)))


def attack_success(x_hat: np.ndarray, j: int, refs: References) -> tuple[bool, float]:
    """Success iff SSIM to the true class mean beats every other private and public mean.

    Returns ``(success, ssim_to_target)``.
    """
    if j not in refs.private:
        raise ConfigurationError(f"no private reference image for label {j}")
    if not refs.public:
        raise ConfigurationError("no public reference images")
    own = ssim(x_hat, refs.private[j])
    rivals = [ssim(x_hat, m) for c, m in refs.private.items() if c != j]
    rivals += [ssim(x_hat, m) for m in refs.public.values()]
    return own > max(rivals, default=-np.inf), own


def attack_accuracy(successes) -> float:
    successes = list(successes)
    if not successes:
        raise ConfigurationError("attack accuracy is undefined for zero targets")
    return sum(bool(s) for s in successes) / len(successes)


@dataclass
class ReportRow:
    label: int
    owner: int
    selected_client: int
    ssim: float
    tv: float
    success: bool


@dataclass
class AttackReport:
    rows: list[ReportRow] = field(default_factory=list)
    images: dict[int, np.ndarray] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def num_targets(self) -> int:
        return len(self.rows)

    @property
    def num_success(self) -> int:
        return sum(r.success for r in self.rows)

    @property
    def accuracy(self) -> float:
        return attack_accuracy(r.success for r in self.rows) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else float("nan")


def evaluate(images: dict[int, np.ndarray], selected: dict[int, int], split, config: dict | None = None,
             refs: References | None = None) -> AttackReport:
    """Score one reconstruction per target label against the ground-truth references."""
    refs = refs or build_references(split)
    report = AttackReport(config=dict(config or {}))
    for j in sorted(images):
        ok, s = attack_success(images[j], j, refs)
        report.rows.append(ReportRow(j, split.owner[j], selected.get(j, -1), s,
                                     tv_normalized(images[j]), ok))
        report.images[j] = images[j]
    return report


def noise_baseline(split, trials: int = 200, seed: int = 0, refs: References | None = None) -> tuple[float, float]:
    """Monte-Carlo accuracy of uniform-noise 'reconstructions': (mean, std) over trials."""
    refs = refs or build_references(split)
    rng = np.random.default_rng(seed)
    labels = list(refs.private)
    bank = np.stack([refs.private[c] for c in labels] + list(refs.public.values())).astype(np.float64)
    bank_stats = _moments(bank)
    shape = bank.shape[1:]
    accs = []
    for _ in range(trials):
        hits = []
        for j in split.targets:
            x = rng.uniform(-1, 1, size=shape)
            scores = _ssim_from_stats(x, _moments(x), bank, bank_stats)
            own = labels.index(j)
            hits.append(scores[own] > np.delete(scores, own).max())
        accs.append(attack_accuracy(hits))
    return float(np.mean(accs)), float(np.std(accs))


# -- confidence gap ----------------------------------------------------------------------

@dataclass
class EntropyGap:
    client_mean: float
    server_mean: float
    client_entropies: np.ndarray
    server_entropies: np.ndarray
    bin_edges: np.ndarray
    client_hist: np.ndarray
    server_hist: np.ndarray


def entropy_gap(client_net, server_net, private_x: np.ndarray, bins: int = 20) -> EntropyGap:
    """Per-sample softmax entropies of both models on a client's private images."""
    hc = np.atleast_1d(entropy(softmax_tau(client_net.predict(private_x).astype(np.float64))))
    hs = np.atleast_1d(entropy(softmax_tau(server_net.predict(private_x).astype(np.float64))))
    j = client_net.output_shape[0]
    edges = np.linspace(0.0, np.log(j), bins + 1)
    return EntropyGap(float(hc.mean()), float(hs.mean()), hc, hs, edges,
                      np.histogram(hc, edges)[0], np.histogram(hs, edges)[0])


# -- CSV output ----------------------------------------------------------------------------

METRIC_FIELDS = ["scheme", "seed", "tau", "gamma", "mode", "label", "owner", "selected_client",
                 "ssim", "tv", "success"]


def write_metrics_csv(path: str | Path, reports: list[AttackReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for rep in reports:
            c = rep.config
            for r in rep.rows:
                w.writerow([c.get("scheme", ""), c.get("seed", ""), c.get("tau", ""), c.get("gamma", ""),
                            c.get("mode", ""), r.label, r.owner, r.selected_client,
                            f"{r.ssim:.6f}", f"{r.tv:.6f}", int(r.success)])


def write_aggregate_csv(path: str | Path, reports: list[AttackReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "seed", "tau", "gamma", "mode", "num_targets", "num_success",
                    "attack_accuracy", "mean_ssim"])
        for rep in reports:
            c = rep.config
            w.writerow([c.get("scheme", ""), c.get("seed", ""), c.get("tau", ""), c.get("gamma", ""),
                        c.get("mode", ""), rep.num_targets, rep.num_success,
                        f"{rep.accuracy:.6f}", f"{rep.mean_ssim:.6f}"])


def write_entropy_csv(path: str | Path, gaps: dict[int, EntropyGap]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client", "bin_lo", "bin_hi", "client_count", "server_count", "client_mean", "server_mean"])
        for k, g in sorted(gaps.items()):
            for b in range(len(g.client_hist)):
                w.writerow([k, f"{g.bin_edges[b]:.6f}", f"{g.bin_edges[b + 1]:.6f}", int(g.client_hist[b]),
                            int(g.server_hist[b]), f"{g.client_mean:.6f}", f"{g.server_mean:.6f}"])
