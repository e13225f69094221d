import numpy as np
import pytest

from adahead import precision as prec
from adahead import tensor as T


@pytest.fixture
def f64():
    """Run the test in 64-bit mode with per-op finite checking."""
    with prec.precision("f64"):
        T.finite_checks(True)
        yield
        T.finite_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
