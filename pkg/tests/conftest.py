import numpy as np
import pytest

from lshpipe import kernels
from lshpipe.dataio import VectorSet
from lshpipe.family import sample_family


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    kernels.warmup()


@pytest.fixture(scope="session")
def small_family():
    return sample_family(seed=7, d=16, L=3, M=4, w=8.0)


@pytest.fixture(scope="session")
def small_dataset():
    rng = np.random.default_rng(42)
    coords = rng.normal(0.0, 10.0, size=(2000, 16)).astype(np.float32)
    return VectorSet.from_coords(coords)
