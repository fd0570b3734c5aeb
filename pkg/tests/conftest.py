import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from segref.core import EmbeddingMatrix, l2_normalize


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_normalized(rng, rows, dim) -> EmbeddingMatrix:
    return l2_normalize(EmbeddingMatrix(rng.normal(size=(rows, dim)).astype(np.float32)))
