import numpy as np
import pytest

from pli_lab.data import TransformSpec, generate_corpus, load_corpus, make_split


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    """The 32-class, 12-per-class glyph corpus at 64x64 (manifest path, records)."""
    manifest = generate_corpus(tmp_path_factory.mktemp("desk"), 32, 12, 64, seed=0)
    records, skipped = load_corpus(manifest, 64)
    assert not skipped
    return manifest, records


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A 10-class, 6-per-class corpus at 32x32 for quick protocol tests."""
    manifest = generate_corpus(tmp_path_factory.mktemp("tiny"), 10, 6, 32, seed=3)
    records, _ = load_corpus(manifest, 32)
    return manifest, records


@pytest.fixture(scope="session")
def tiny_split(tiny_corpus):
    return make_split(tiny_corpus[1], 2, 4, TransformSpec("box_blur", 3), seed=0)
