import pytest

from _support import make_instance


@pytest.fixture
def tiny_tanh():
    return make_instance([3, 3, 3, 2], "tanh", s=0.5, samples=2, seed=7)
