"""On-disk record of reconstructed images: one PNG per (round, client, label) plus an index."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

from pli_lab.data.corpus import to_uint8


def save_png(path: str | Path, pixels: np.ndarray) -> None:
    """Write a C x H x W image in [-1, 1] losslessly."""
    arr = to_uint8(pixels)
    Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr).save(path)


class ReconstructionDump:
    def __init__(self, out_dir: str | Path):
        self.root = Path(out_dir)
        (self.root / "rounds").mkdir(parents=True, exist_ok=True)
        (self.root / "selected").mkdir(parents=True, exist_ok=True)
        self.rows: list[tuple] = []
        self.selected_rows: list[tuple] = []

    def add(self, round_: int, client: int, label: int, pixels: np.ndarray) -> Path:
        rel = Path("rounds") / f"r{round_:02d}_c{client:02d}_l{label:04d}.png"
        save_png(self.root / rel, pixels)
        self.rows.append((round_, client, label, rel.as_posix()))
        self._write_index()
        return self.root / rel

    def add_selected(self, label: int, client: int, pixels: np.ndarray) -> Path:
        rel = Path("selected") / f"l{label:04d}.png"
        save_png(self.root / rel, pixels)
        self.selected_rows.append((label, client, rel.as_posix()))
        self._write_index()
        return self.root / rel

    def _write_index(self) -> None:
        with open(self.root / "index.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "client", "label", "path"])
            w.writerows(self.rows)
        with open(self.root / "selected.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "client", "path"])
            w.writerows(self.selected_rows)
