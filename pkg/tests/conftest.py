import numpy as np
import pytest

from matsr.tensor import Tensor, precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def rand_t(rng, *shape, scale=1.0, dtype=np.float64):
    return Tensor(rng.standard_normal(shape) * scale, dtype=dtype)


def natural_rgb(name: str, top: int, left: int, size: int) -> np.ndarray:
    """(3, size, size) float crop in [0,1] from the scikit-image sample set."""
    from skimage import data as skd

    img = np.asarray(getattr(skd, name)(), dtype=np.float64)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    img = img[top:top + size, left:left + size, :3] / 255.0
    assert img.shape == (size, size, 3), f"crop out of range for {name}"
    return np.ascontiguousarray(img.transpose(2, 0, 1))
