"""Corpus loading, domain transforms and the private/public partition."""

from pli_lab.data.corpus import (
    INSENSITIVE,
    SENSITIVE,
    ImageRecord,
    area_resize,
    load_corpus,
    read_manifest,
    to_uint8,
    write_manifest,
)
from pli_lab.data.split import DatasetSplit, export_split, labels_of, load_split, make_split, stack
from pli_lab.data.synth import generate_corpus
from pli_lab.data.transforms import TransformSpec, apply_transform, box_blur

__all__ = [
    "INSENSITIVE", "SENSITIVE", "DatasetSplit", "ImageRecord", "TransformSpec", "apply_transform",
    "area_resize", "box_blur", "export_split", "generate_corpus", "labels_of", "load_corpus",
    "load_split", "make_split", "read_manifest", "stack", "to_uint8", "write_manifest",
]
