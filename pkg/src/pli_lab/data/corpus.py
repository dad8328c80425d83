"""Image records and manifest-driven corpus loading."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from pli_lab.errors import CorpusError

log = logging.getLogger(__name__)

SENSITIVE = "sensitive"
INSENSITIVE = "insensitive"


@dataclass(frozen=True)
class ImageRecord:
    """One labelled image; ``pixels`` is C x H x W float32 in [-1, 1]."""

    id: str
    pixels: np.ndarray
    label: int
    domain: str = SENSITIVE

    def with_pixels(self, pixels: np.ndarray, domain: str | None = None) -> "ImageRecord":
        return replace(self, pixels=pixels, domain=domain or self.domain)


def area_resize(img: np.ndarray, size: int) -> np.ndarray:
    """Downscale an H x W x C array to size x size by block means.

    Integer factors use an exact block mean; other ratios fall back to
    Pillow's box (area) filter.
    """
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img.astype(np.float64)
    if h % size == 0 and w % size == 0:
        fh, fw = h // size, w // size
        return img.reshape(size, fh, size, fw, -1).mean(axis=(1, 3))
    chans = [np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F")
                        .resize((size, size), Image.BOX)) for c in range(img.shape[2])]
    return np.stack(chans, axis=-1).astype(np.float64)


def to_unit_range(img_uint8: np.ndarray) -> np.ndarray:
    """Map 0..255 to [-1, 1]."""
    return img_uint8 / 127.5 - 1.0


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """C x H x W in [-1, 1] -> H x W x C uint8."""
    arr = np.clip((np.asarray(pixels, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    return np.rint(arr).astype(np.uint8).transpose(1, 2, 0)


def decode_image(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    arr = area_resize(arr, size)
    return to_unit_range(arr).transpose(2, 0, 1).astype(np.float32)


def read_manifest(path: str | Path) -> list[tuple[str, int]]:
    """Parse ``relative/path<TAB>label`` lines; blank lines and ``#`` comments are ignored."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2:
            raise CorpusError(f"{path}:{lineno}: expected 'path<TAB>label', got {line!r}")
        try:
            entries.append((parts[0], int(parts[1])))
        except ValueError as exc:
            raise CorpusError(f"{path}:{lineno}: label {parts[1]!r} is not an integer") from exc
    return entries


def write_manifest(path: str | Path, entries: list[tuple[str, int]]) -> None:
    Path(path).write_text("".join(f"{p}\t{lab}\n" for p, lab in entries))


def load_corpus(manifest: str | Path, image_size: int = 64,
                root: str | Path | None = None) -> tuple[list[ImageRecord], int]:
    """Decode every manifest entry; returns ``(records, skipped_count)``.

    Unreadable files are skipped with a warning.  An empty result is fatal.
    """
    manifest = Path(manifest)
    root = Path(root) if root is not None else manifest.parent
    records, skipped = [], 0
    for rel, label in read_manifest(manifest):
        try:
            pixels = decode_image(root / rel, image_size)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", rel, exc)
            skipped += 1
            continue
        if label < 0:
            raise CorpusError(f"negative label {label} for {rel}")
        records.append(ImageRecord(id=rel, pixels=pixels, label=label))
    if not records:
        raise CorpusError(f"corpus {manifest} is empty ({skipped} unreadable entries)")
    return records, skipped
