"""Domain transforms that synthesise the insensitive public domain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from pli_lab.data.corpus import INSENSITIVE, ImageRecord
from pli_lab.errors import ConfigurationError

KINDS = ("box_blur", "occlusion_band", "none")


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "box_blur"
    kernel: int = 9
    band_start: int = 0
    band_stop: int = 0
    fill: float = 0.0

    def validate(self, height: int | None = None) -> "TransformSpec":
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "box_blur" and (self.kernel < 3 or self.kernel % 2 == 0):
            raise ConfigurationError(f"box_blur kernel must be odd and >= 3, got {self.kernel}")
        if self.kind == "occlusion_band":
            if not 0 <= self.band_start < self.band_stop:
                raise ConfigurationError(f"bad occlusion band [{self.band_start}, {self.band_stop})")
            if height is not None and self.band_stop > height:
                raise ConfigurationError(f"occlusion band ends at {self.band_stop} > image height {height}")
        return self

    def to_dict(self) -> dict:
        return {"kind": self.kind, "kernel": self.kernel, "band_start": self.band_start,
                "band_stop": self.band_stop, "fill": self.fill}


def box_blur(pixels: np.ndarray, kernel: int) -> np.ndarray:
    """Per-channel k x k mean filter with mirrored borders."""
    out = uniform_filter(pixels.astype(np.float64), size=(1, kernel, kernel), mode="reflect")
    return out.astype(pixels.dtype)


def apply_transform(record: ImageRecord, spec: TransformSpec) -> ImageRecord:
    spec.validate(record.pixels.shape[1])
    if spec.kind == "none":
        pixels = record.pixels.copy()
    elif spec.kind == "box_blur":
        pixels = box_blur(record.pixels, spec.kernel)
    else:
        pixels = record.pixels.copy()
        pixels[:, spec.band_start:spec.band_stop, :] = spec.fill
    return record.with_pixels(np.clip(pixels, -1.0, 1.0), domain=INSENSITIVE)
