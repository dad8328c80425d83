"""Round artifacts: registry CSV dumps and model checkpoints for attack replay."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from pli_lab.nn import checkpoint


def write_registry_csv(path: str | Path, round_: int, registry: np.ndarray) -> None:
    """One row per (client, public index): ``round, client, public_index, v_0..v_{J-1}``."""
    k_, n, j = registry.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "client", "public_index"] + [f"v{u}" for u in range(j)])
        for k in range(k_):
            for i in range(n):
                w.writerow([round_, k, i] + [f"{v:.9g}" for v in registry[k, i]])


def read_registry_csv(path: str | Path) -> tuple[int, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    if not rows:
        raise ValueError(f"{path} holds no registry rows")
    round_ = int(rows[0][0])
    k_ = max(int(r[1]) for r in rows) + 1
    n = max(int(r[2]) for r in rows) + 1
    reg = np.zeros((k_, n, len(rows[0]) - 3), dtype=np.float32)
    for r in rows:
        reg[int(r[1]), int(r[2])] = [float(v) for v in r[3:]]
    return round_, reg


def save_round(fed, out_dir: str | Path) -> None:
    """Dump the current round's registry and every model checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = fed.state.round
    if t in fed.state.registry:
        write_registry_csv(out / f"registry_round{t}.csv", t, fed.state.registry[t])
    checkpoint.save(fed.state.server, out / f"server_round{t}.ckpt")
    for k, net in enumerate(fed.state.clients):
        checkpoint.save(net, out / f"client{k}_round{t}.ckpt")
