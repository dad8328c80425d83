"""Prior images for the inversion objective, estimated from public data only."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from pli_lab.data.corpus import ImageRecord
from pli_lab.data.transforms import box_blur
from pli_lab.errors import ConfigurationError

log = logging.getLogger(__name__)

Translator = Callable[[np.ndarray], np.ndarray]


@dataclass
class PriorBank:
    """Per-label prior images, with an optional shared image for labels without one."""

    per_label: dict[int, np.ndarray] = field(default_factory=dict)
    shared: np.ndarray | None = None

    def for_label(self, label: int | None) -> np.ndarray:
        if label is not None and label in self.per_label:
            return self.per_label[label]
        if self.shared is None:
            raise ConfigurationError(f"no prior for label {label} and no shared prior")
        return self.shared

    def stack(self, labels: Iterable[int | None]) -> np.ndarray:
        return np.stack([self.for_label(j) for j in labels]).astype(np.float32)


def identity_translator(pixels: np.ndarray) -> np.ndarray:
    return pixels


@dataclass(frozen=True)
class UnsharpMask:
    """Sharpen by adding back the difference to a box-blurred copy."""

    kernel: int = 9
    amount: float = 1.0

    def __call__(self, pixels: np.ndarray) -> np.ndarray:
        detail = pixels - box_blur(pixels, self.kernel)
        return np.clip(pixels + self.amount * detail, -1.0, 1.0).astype(pixels.dtype)


def translator_for(kind: str, kernel: int = 9, amount: float = 1.0) -> Translator:
    if kind == "identity":
        return identity_translator
    if kind == "unsharp":
        return UnsharpMask(kernel, amount)
    raise ConfigurationError(f"unknown translator {kind!r}; expected 'identity' or 'unsharp'")


def estimate_prior_average(images: np.ndarray) -> PriorBank:
    """A single shared prior: the pixelwise mean of the clean public images."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ConfigurationError("cannot estimate a prior from an empty public set")
    return PriorBank(shared=images.mean(axis=0).astype(np.float32))


def estimate_prior_translated(aux: list[ImageRecord], translator: Translator,
                              fallback_images: np.ndarray | None = None,
                              labels: Iterable[int] = ()) -> PriorBank:
    """Per-label mean of translated insensitive-domain images.

    Labels in ``labels`` without any auxiliary image fall back to the mean of
    ``fallback_images`` (with a warning).
    """
    groups: dict[int, list[np.ndarray]] = {}
    for r in aux:
        groups.setdefault(r.label, []).append(translator(r.pixels))
    bank = PriorBank(per_label={j: np.mean(v, axis=0).astype(np.float32) for j, v in groups.items()})
    if fallback_images is not None and len(fallback_images):
        bank.shared = estimate_prior_average(fallback_images).shared
    missing = sorted(set(labels) - set(groups))
    if missing:
        if bank.shared is None:
            raise ConfigurationError(f"labels {missing} have no auxiliary images and no fallback set")
        log.warning("no auxiliary images for labels %s; using the public average as their prior", missing)
    return bank
