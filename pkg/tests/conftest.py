import logging

import pytest

logging.getLogger("dereverb").setLevel(logging.ERROR)


@pytest.fixture
def np_rng():
    import numpy as np
    return np.random.default_rng(12345)
