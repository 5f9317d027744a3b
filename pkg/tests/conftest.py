import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synthsets import write_corpus  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def corpus_dir(tmp_path):
    """Directory with a handful of small authentic PNGs."""
    d = tmp_path / "corpus"
    d.mkdir()
    write_corpus(d, n=6, size=64, seed=0)
    return d
