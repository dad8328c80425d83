"""Procedural desk corpus of compositional "glyph" identities.

Each class is a fixed combination of attributes drawn from small shared
vocabularies (background colours, a shape with colour, position and size, and
a fine stripe texture with a class-specific phase).  Classes therefore share
parts with one another, like faces share hair colour or face shape, and the
fine texture is exactly what a box blur destroys.  Individual images jitter
position, scale, brightness and add pixel noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from pli_lab.data.corpus import write_manifest

PALETTE = np.array([
    [0.90, 0.20, 0.20], [0.20, 0.70, 0.25], [0.20, 0.35, 0.90], [0.95, 0.85, 0.20],
    [0.85, 0.30, 0.85], [0.15, 0.80, 0.85], [0.95, 0.55, 0.15], [0.30, 0.25, 0.25],
])
SHAPES = ("disk", "square", "triangle", "diamond", "ring", "cross")
TEXTURES = ("hstripes", "vstripes", "checker", "dstripes", "none")


@dataclass(frozen=True)
class GlyphClass:
    bg_top: int
    bg_bottom: int
    shape: str
    color: int
    cx: float
    cy: float
    size: float
    texture: str
    period: int
    phase: int


def sample_classes(n: int, rng: np.random.Generator) -> list[GlyphClass]:
    seen, out = set(), []
    grid = (0.35, 0.5, 0.65)
    while len(out) < n:
        top, bottom, color = rng.choice(len(PALETTE), size=3, replace=False)
        g = GlyphClass(int(top), int(bottom), str(rng.choice(SHAPES)), int(color),
                       float(rng.choice(grid)), float(rng.choice(grid)), float(rng.choice((0.22, 0.3))),
                       str(rng.choice(TEXTURES)), int(rng.choice((4, 6))), int(rng.integers(0, 6)))
        key = (g.bg_top, g.bg_bottom, g.shape, g.color, g.cx, g.cy, g.texture)
        if key not in seen:
            seen.add(key)
            out.append(g)
    return out


def _shape_mask(shape: str, xx, yy, cx, cy, r) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    if shape == "disk":
        return dx ** 2 + dy ** 2 <= r ** 2
    if shape == "square":
        return (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    if shape == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        return ((np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r)) | ((np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r))
    raise ValueError(shape)


def _texture(kind: str, xx, yy, period: int, phase: int) -> np.ndarray:
    if kind == "none":
        return np.zeros_like(xx)
    half = period / 2
    if kind == "hstripes":
        return ((yy + phase) % period < half).astype(float)
    if kind == "vstripes":
        return ((xx + phase) % period < half).astype(float)
    if kind == "dstripes":
        return ((xx + yy + phase) % period < half).astype(float)
    return ((((xx + phase) // half) + (yy // half)) % 2).astype(float)


def render(g: GlyphClass, size: int, rng: np.random.Generator) -> np.ndarray:
    """Render one H x W x 3 image in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    t = (yy / (size - 1))[..., None]
    img = (1 - t) * PALETTE[g.bg_top] + t * PALETTE[g.bg_bottom]
    # fine texture across the background band in the top third
    tex = _texture(g.texture, xx, yy, g.period, g.phase)[..., None]
    band = (yy < size * 0.3)[..., None]
    img = np.where(band, img * (1 - 0.45 * tex), img)
    jitter = rng.normal(0, 0.03, size=2) * size
    cx, cy = g.cx * size + jitter[0], g.cy * size + jitter[1]
    r = g.size * size * rng.uniform(0.9, 1.1)
    mask = _shape_mask(g.shape, xx, yy, cx, cy, r)[..., None]
    fg = PALETTE[g.color] * (1 - 0.35 * tex)
    img = np.where(mask, fg, img)
    img = img * rng.uniform(0.85, 1.1) + rng.uniform(-0.05, 0.05, size=3)
    img = img + rng.normal(0, 0.03, size=img.shape)
    return np.clip(img, 0, 1)


def generate_corpus(out_dir: str | Path, num_classes: int = 32, per_class: int = 12,
                    image_size: int = 64, seed: int = 0) -> Path:
    """Write PNG files plus ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    classes = sample_classes(num_classes, rng)
    entries = []
    for label, g in enumerate(classes):
        for i in range(per_class):
            img = render(g, image_size, rng)
            rel = f"images/c{label:03d}_{i:03d}.png"
            Image.fromarray(np.rint(img * 255).astype(np.uint8)).save(out / rel)
            entries.append((rel, label))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest
