import numpy as np
import pytest

from distilseg.volume import DisplacementField, Volume


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_volume(rng, shape=(8, 8, 8), lo=0.0, hi=1.0):
    return Volume(rng.uniform(lo, hi, size=shape))


def random_field(rng, shape=(8, 8, 8), magnitude=2.0):
    return DisplacementField(rng.uniform(-magnitude, magnitude, size=(3,) + shape))
