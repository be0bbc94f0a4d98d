from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ese", max_examples=60, deadline=None)
settings.load_profile("ese")

MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist"


def have_mnist() -> bool:
    stems = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    return all((MNIST_DIR / s).exists() or (MNIST_DIR / (s + ".gz")).exists() for s in stems)


needs_mnist = pytest.mark.skipif(not have_mnist(), reason="MNIST IDX files not present under data/mnist")


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def basis(d, i):
    e = np.zeros(d)
    e[i] = 1.0
    return e


def rel_err(analytic, numeric) -> float:
    """Max absolute difference scaled by the largest numeric entry."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale
