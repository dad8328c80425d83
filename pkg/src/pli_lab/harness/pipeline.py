"""End-to-end orchestration: prepare splits, run federation plus attacks, aggregate runs."""

from __future__ import annotations

import csv
import json
import logging
import platform
import sys
from collections import defaultdict
from contextlib import nullcontext
from pathlib import Path

import numpy as np

import pli_lab
from pli_lab import metrics
from pli_lab.attack import (
    GradInversion,
    PLIAttack,
    PLIResult,
    ReconstructionDump,
    estimate_prior_average,
    estimate_prior_translated,
    save_png,
    translator_for,
)
from pli_lab.data import export_split, generate_corpus, load_corpus, load_split, make_split, stack
from pli_lab.errors import ConfigurationError, CorpusError
from pli_lab.federation import Federation, write_registry_csv
from pli_lab.harness.config import ExperimentConfig
from pli_lab.nn import checkpoint

log = logging.getLogger(__name__)


def split_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.out_dir) / f"split_seed{seed}"


def seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.out_dir) / f"seed{seed}"


def thread_limit(threads: int):
    """Cap BLAS threads (single-thread mode gives bitwise-reproducible runs)."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - declared dependency
        return nullcontext()
    return threadpool_limits(limits=threads)


# -- prepare ---------------------------------------------------------------------

def prepare(cfg: ExperimentConfig) -> list[Path]:
    cfg.validate(need_corpus=True)
    corpus = Path(cfg.corpus)
    if cfg.synthetic and not corpus.is_file():
        if corpus.name != "manifest.tsv":
            raise ConfigurationError("with synthetic = true the corpus path must end in manifest.tsv")
        generate_corpus(corpus.parent, cfg.synthetic_classes, cfg.synthetic_per_class, cfg.image_size,
                        seed=cfg.seeds[0])
        log.info("generated synthetic corpus at %s", corpus.parent)
    records, skipped = load_corpus(corpus, cfg.image_size)
    if skipped:
        log.warning("skipped %d unreadable images", skipped)
    out = []
    for seed in cfg.seeds:
        split = make_split(records, cfg.num_clients, cfg.num_targets, cfg.transform_spec(), seed,
                           aux_fraction=cfg.aux_fraction, max_per_class=cfg.max_per_class or None)
        out.append(export_split(split, split_dir(cfg, seed), corpus, cfg.image_size))
    return out


# -- run ------------------------------------------------------------------------------

def tag_for(scheme: str, attack_cfg=None) -> str:
    if attack_cfg is None:
        return f"{scheme}_grad"
    return f"{scheme}_tau{attack_cfg.tau:g}_gamma{attack_cfg.gamma:g}_{attack_cfg.q_mode}"


def tile_grid(rows: list[list[np.ndarray]], sep: int = 2, fill: float = 1.0) -> np.ndarray:
    """Tile equally shaped C x H x W images into one image with ``sep``-pixel separators."""
    c, h, w = rows[0][0].shape
    n_cols = max(len(r) for r in rows)
    grid = np.full((c, len(rows) * (h + sep) + sep, n_cols * (w + sep) + sep), fill, dtype=np.float32)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = sep + i * (h + sep), sep + j * (w + sep)
            grid[:, y:y + h, x:x + w] = img
    return grid


def build_priors(cfg: ExperimentConfig, split, scheme: str):
    clean = stack(split.public_clean)
    if scheme == "dsfl" or not split.labeled_public:
        return estimate_prior_average(clean)
    return estimate_prior_translated(split.public_aux, translator_for(cfg.translator, cfg.blur_kernel,
                                                                       cfg.unsharp_amount),
                                     fallback_images=clean, labels=split.targets)


def run_seed(cfg: ExperimentConfig, seed: int) -> list[metrics.AttackReport]:
    sdir = split_dir(cfg, seed)
    if not (sdir / "summary.json").is_file():
        raise ConfigurationError(f"no prepared split at {sdir}; run prepare-data first")
    split, _ = load_split(sdir)
    out = seed_dir(cfg, seed)
    for sub in ("registry", "checkpoints", "grids"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    fed = Federation(split, cfg.protocol_config(), seed=seed, image_size=cfg.image_size)

    if cfg.scheme == "fedavg":
        attacks = {tag_for("fedavg"): (GradInversion(cfg.grad_config(seed), split.targets), None)}
    else:
        priors = build_priors(cfg, split, cfg.scheme)
        attacks = {}
        for acfg in cfg.attack_configs(seed):
            tag = tag_for(cfg.scheme, acfg)
            dump = ReconstructionDump(out / "reconstructions" / tag) if cfg.dump_rounds else None
            attacks[tag] = (PLIAttack(acfg, split.targets, priors, dump=dump), acfg)

    def on_round_end(f: Federation) -> None:
        t = f.state.round
        if t in f.state.registry:
            write_registry_csv(out / "registry" / f"round{t:02d}.csv", t, f.state.registry[t])

    fed.run([a for a, _ in attacks.values()], on_round_end=on_round_end)
    checkpoint.save(fed.state.server, out / "checkpoints" / "server.ckpt")
    for k, net in enumerate(fed.state.clients):
        checkpoint.save(net, out / "checkpoints" / f"client{k}.ckpt")

    refs = metrics.build_references(split)
    reports = []
    for tag, (attack, acfg) in attacks.items():
        result: PLIResult = attack.finalize()
        echo = {"scheme": cfg.scheme, "seed": seed, "tau": acfg.tau if acfg else "",
                "gamma": acfg.gamma if acfg else cfg.grad_tv, "mode": acfg.q_mode if acfg else "grad"}
        rep = metrics.evaluate(result.images, result.selected, split, echo, refs=refs)
        reports.append(rep)
        if split.targets:
            grid = tile_grid([[result.images[j] for j in split.targets],
                              [refs.private[j] for j in split.targets]])
            save_png(out / "grids" / f"{tag}.png", grid)
            sel = out / "selected" / tag
            sel.mkdir(parents=True, exist_ok=True)
            for j in split.targets:
                save_png(sel / f"l{j:04d}.png", result.images[j])

    gaps = {k: metrics.entropy_gap(fed.state.clients[k], fed.state.server, fed.private_x[k])
            for k in range(split.num_clients)}
    metrics.write_entropy_csv(out / "entropy.csv", gaps)
    plot_entropy(out / "entropy.png", gaps)
    base_mean, base_std = metrics.noise_baseline(split, trials=200, seed=seed, refs=refs)
    metrics.write_metrics_csv(out / "metrics.csv", reports)
    metrics.write_aggregate_csv(out / "aggregate.csv", reports)
    (out / "baseline.json").write_text(json.dumps({"noise_accuracy_mean": base_mean,
                                                   "noise_accuracy_std": base_std}, indent=2) + "\n")
    write_manifest(out / "manifest.json", cfg, seed)
    return reports


def run(cfg: ExperimentConfig) -> list[metrics.AttackReport]:
    cfg.validate()
    reports = []
    with thread_limit(cfg.threads):
        for seed in cfg.seeds:
            reports.extend(run_seed(cfg, seed))
    out = Path(cfg.out_dir)
    metrics.write_metrics_csv(out / "metrics.csv", reports)
    metrics.write_aggregate_csv(out / "aggregate.csv", reports)
    return reports


def write_manifest(path: Path, cfg: ExperimentConfig, seed: int) -> None:
    import scipy

    manifest = {
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "seed": seed,
        "versions": {"pli_lab": pli_lab.__version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "argv": sys.argv,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def plot_entropy(path: Path, gaps: dict) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(gaps), figsize=(4 * len(gaps), 3), squeeze=False)
    for ax, (k, g) in zip(axes[0], sorted(gaps.items())):
        centers = 0.5 * (g.bin_edges[1:] + g.bin_edges[:-1])
        width = g.bin_edges[1] - g.bin_edges[0]
        ax.bar(centers, g.client_hist, width=width, alpha=0.6, label=f"client {k}")
        ax.bar(centers, g.server_hist, width=width, alpha=0.6, label="server")
        ax.set_xlabel("entropy (nats)")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# -- report -------------------------------------------------------------------------------

def read_aggregate(run_dir: Path) -> list[dict]:
    rows = []
    for path in sorted(run_dir.glob("seed*/aggregate.csv")) or [run_dir / "aggregate.csv"]:
        if path.is_file():
            with open(path, newline="") as fh:
                rows.extend(csv.DictReader(fh))
    return rows


def report(run_dirs: list[str | Path], out_dir: str | Path) -> list[dict]:
    """Mean accuracy and SSIM over seeds per (scheme, tau, gamma, mode); CSV plus scatter plot."""
    rows = []
    for d in run_dirs:
        d = Path(d)
        got = read_aggregate(d) if d.is_dir() else []
        if not got:
            log.warning("no completed run found in %s; skipping", d)
            continue
        rows.extend(got)
    if not rows:
        raise CorpusError("no completed runs to report on")
    groups: dict[tuple, list[dict]] = defaultdict(list)
    seen = set()
    for r in rows:
        key = (r["scheme"], r["tau"], r["gamma"], r["mode"])
        ident = key + (r["seed"],)
        if ident in seen:
            continue
        seen.add(ident)
        groups[key].append(r)
    table = []
    for key in sorted(groups):
        g = groups[key]
        table.append({"scheme": key[0], "tau": key[1], "gamma": key[2], "mode": key[3],
                      "num_seeds": len(g),
                      "attack_accuracy": float(np.mean([float(r["attack_accuracy"]) for r in g])),
                      "mean_ssim": float(np.mean([float(r["mean_ssim"]) for r in g]))})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "tau", "gamma", "mode", "num_seeds", "attack_accuracy", "mean_ssim"])
        for t in table:
            w.writerow([t["scheme"], t["tau"], t["gamma"], t["mode"], t["num_seeds"],
                        f"{t['attack_accuracy']:.6f}", f"{t['mean_ssim']:.6f}"])
    plot_tradeoff(out / "tradeoff.png", table)
    return table


def plot_tradeoff(path: Path, table: list[dict]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for scheme in sorted({t["scheme"] for t in table}):
        pts = [t for t in table if t["scheme"] == scheme]
        sizes = [20 + 30 * float(t["tau"] or 1) for t in pts]
        ax.scatter([t["mean_ssim"] for t in pts], [t["attack_accuracy"] for t in pts], s=sizes,
                   alpha=0.7, label=scheme)
    ax.set_xlabel("mean SSIM to class mean")
    ax.set_ylabel("attack accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
