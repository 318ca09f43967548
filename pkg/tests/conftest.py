import os

import numpy as np
import pytest

from qutelab.data import mnist_available, fashion_available, resolve_data_dir

# Trained checkpoints are cached here keyed by training config hash, so
# repeated pytest runs (and the acceptance tests sharing a config) skip
# retraining. Safe to delete; the next run rebuilds it.
CACHE_DIR = os.path.join(os.path.dirname(__file__), ".cache")


@pytest.fixture(scope="session")
def train_cache() -> str:
    os.makedirs(CACHE_DIR, exist_ok=True)
    return CACHE_DIR


def _data_root():
    return resolve_data_dir(os.environ.get("QUTELAB_DATA_DIR"))


@pytest.fixture(scope="session")
def mnist_dir() -> str:
    root = _data_root()
    if not mnist_available(root):
        pytest.skip("MNIST IDX files not found (set QUTELAB_DATA_DIR)")
    return root


@pytest.fixture(scope="session")
def fashion_dir() -> str:
    root = _data_root()
    if not fashion_available(root):
        pytest.skip("FashionMNIST IDX files not found (set QUTELAB_DATA_DIR)")
    return root


@pytest.fixture()
def rng_np():
    return np.random.default_rng(20260821)
