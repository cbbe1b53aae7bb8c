import numpy as np
import pytest

from fpq import _backend


@pytest.fixture(params=sorted(_backend.BACKENDS))
def backend(request):
    """Run a test once per available kernel backend."""
    previous = _backend.name
    _backend.use(request.param)
    yield request.param
    _backend.use(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
