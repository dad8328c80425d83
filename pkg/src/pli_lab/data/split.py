"""Partition a corpus into private client sets and the two public subsets.

Every class is shuffled with the split seed and divided in two: a share is
passed through the domain transform into the insensitive public subset
``public_aux`` and the rest stays sensitive.  Sensitive images of target
classes become the owning client's private set; sensitive images of the
remaining classes become ``public_clean``.  Records beyond ``max_per_class``
are discarded, so the four destinations form a set partition of the input.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pli_lab.data.corpus import ImageRecord, load_corpus, write_manifest
from pli_lab.data.transforms import TransformSpec, apply_transform
from pli_lab.errors import CorpusError


@dataclass
class DatasetSplit:
    private: list[list[ImageRecord]]
    public_clean: list[ImageRecord]
    public_aux: list[ImageRecord]
    targets: list[int]
    num_classes: int
    owner: dict[int, int]
    seed: int = 0
    transform: TransformSpec = field(default_factory=TransformSpec)
    discarded: list[ImageRecord] = field(default_factory=list)
    labeled_public: bool = True

    @property
    def num_clients(self) -> int:
        return len(self.private)

    @property
    def public(self) -> list[ImageRecord]:
        """The full public set, ``public_clean`` first then ``public_aux``."""
        return self.public_clean + self.public_aux

    @property
    def num_clean(self) -> int:
        return len(self.public_clean)

    @property
    def non_targets(self) -> list[int]:
        return sorted(set(range(self.num_classes)) - set(self.targets))

    def client_targets(self, k: int) -> list[int]:
        return sorted(j for j, owner in self.owner.items() if owner == k)

    def counts(self) -> dict:
        return {
            "private": [len(p) for p in self.private],
            "public_clean": len(self.public_clean),
            "public_aux": len(self.public_aux),
            "discarded": len(self.discarded),
            "total": sum(len(p) for p in self.private) + len(self.public_clean)
                     + len(self.public_aux) + len(self.discarded),
        }

    def as_unlabeled(self) -> "DatasetSplit":
        """Same partition with public labels withheld from protocol and attack."""
        return DatasetSplit(self.private, self.public_clean, self.public_aux, self.targets,
                            self.num_classes, self.owner, self.seed, self.transform,
                            self.discarded, labeled_public=False)


def stack(records: list[ImageRecord]) -> np.ndarray:
    if not records:
        raise CorpusError("cannot stack an empty record list")
    return np.stack([r.pixels for r in records]).astype(np.float32)


def labels_of(records: list[ImageRecord]) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.int64)


def make_split(records: list[ImageRecord], num_clients: int, num_targets: int,
               spec: TransformSpec | None = None, seed: int = 0, aux_fraction: float = 0.5,
               max_per_class: int | None = None) -> DatasetSplit:
    spec = (spec or TransformSpec()).validate()
    if num_clients < 1:
        raise CorpusError(f"need at least one client, got {num_clients}")
    if not 0 < aux_fraction < 1:
        raise CorpusError(f"aux_fraction must be in (0, 1), got {aux_fraction}")
    by_class: dict[int, list[ImageRecord]] = defaultdict(list)
    for r in records:
        by_class[r.label].append(r)
    num_classes = max(by_class) + 1
    eligible = sorted(c for c, rs in by_class.items() if len(rs) >= 2)
    if len(eligible) < num_targets:
        raise CorpusError(f"need {num_targets} target classes with >=2 images, "
                          f"only {len(eligible)} of {len(by_class)} classes qualify")
    if len(by_class) <= num_targets:
        raise CorpusError(f"{len(by_class)} classes leave no non-target class for public_clean "
                          f"with {num_targets} targets")
    if num_targets < num_clients:
        raise CorpusError(f"{num_clients} clients but only {num_targets} target classes; "
                          "every client needs at least one class")

    rng = np.random.default_rng(seed)
    targets = sorted(int(t) for t in rng.choice(eligible, size=num_targets, replace=False))
    owner = {int(j): i % num_clients for i, j in enumerate(rng.permutation(targets))}

    private: list[list[ImageRecord]] = [[] for _ in range(num_clients)]
    clean, aux, discarded = [], [], []
    for c in sorted(by_class):
        members = sorted(by_class[c], key=lambda r: r.id)
        members = [members[i] for i in rng.permutation(len(members))]
        if max_per_class is not None:
            discarded += members[max_per_class:]
            members = members[:max_per_class]
        n = len(members)
        n_aux = int(np.floor(n * aux_fraction))
        if c in owner:
            n_aux = min(max(n_aux, 1), n - 1)
        elif n < 2:
            n_aux = 0
        aux += [apply_transform(r, spec) for r in members[:n_aux]]
        sensitive = members[n_aux:]
        if c in owner:
            private[owner[c]] += sensitive
        else:
            clean += sensitive
    return DatasetSplit(private, clean, aux, targets, num_classes, owner, seed, spec, discarded)


# -- export / import -------------------------------------------------------------

def export_split(split: DatasetSplit, out_dir: str | Path, corpus_manifest: str | Path,
                 image_size: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, recs in enumerate(split.private):
        write_manifest(out / f"private_{k}.tsv", [(r.id, r.label) for r in recs])
    write_manifest(out / "public_clean.tsv", [(r.id, r.label) for r in split.public_clean])
    write_manifest(out / "public_aux.tsv", [(r.id, r.label) for r in split.public_aux])
    write_manifest(out / "discarded.tsv", [(r.id, r.label) for r in split.discarded])
    summary = {
        "seed": split.seed,
        "num_clients": split.num_clients,
        "num_classes": split.num_classes,
        "targets": split.targets,
        "owner": {str(j): k for j, k in sorted(split.owner.items())},
        "transform": split.transform.to_dict(),
        "image_size": image_size,
        "corpus_manifest": str(Path(corpus_manifest).resolve()),
        "counts": split.counts(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out


def load_split(split_dir: str | Path) -> tuple[DatasetSplit, dict]:
    """Rebuild a split exported by ``export_split`` (re-decoding and re-transforming images)."""
    d = Path(split_dir)
    summary = json.loads((d / "summary.json").read_text())
    records, _ = load_corpus(summary["corpus_manifest"], summary["image_size"])
    by_id = {r.id: r for r in records}
    spec = TransformSpec(**summary["transform"])

    def read(name: str) -> list[ImageRecord]:
        lines = (d / name).read_text().splitlines()
        try:
            return [by_id[line.split("\t")[0]] for line in lines if line]
        except KeyError as exc:
            raise CorpusError(f"{name} references {exc} which is missing from the corpus") from exc

    private = [read(f"private_{k}.tsv") for k in range(summary["num_clients"])]
    split = DatasetSplit(
        private=private,
        public_clean=read("public_clean.tsv"),
        public_aux=[apply_transform(r, spec) for r in read("public_aux.tsv")],
        targets=list(summary["targets"]),
        num_classes=summary["num_classes"],
        owner={int(j): k for j, k in summary["owner"].items()},
        seed=summary["seed"],
        transform=spec,
        discarded=read("discarded.tsv"),
    )
    return split, summary
