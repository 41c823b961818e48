import logging

import numpy as np
import pytest

from rkhs_calib.data import PhysicalDataset
from rkhs_calib.kernel import SobolevCubic
from rkhs_calib.model import identity_model


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("rkhs_calib").setLevel(logging.ERROR)
    yield


def smooth_data(seed: int, n: int = 30, lo: float = 2.0, hi: float = 5.0, noise: float = 0.1):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(lo, hi, n))
    y = np.sin(x) + noise * rng.standard_normal(n)
    return PhysicalDataset(x, y, [lo], [hi])


@pytest.fixture
def identity_problem():
    data = smooth_data(1)
    return data, identity_model(), SobolevCubic(*data.domain)
