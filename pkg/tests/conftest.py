import sys

import numpy as np
import pytest

from vaebptf.engine import FactorState, ModelConfig
from vaebptf.tensor_store import SparseCountTensor


def random_tensor(rng, sizes=(4, 4, 4), density=0.5, max_count=5):
    """Random sparse count tensor with at least one entry."""
    dense = rng.integers(1, max_count + 1, size=sizes) * (rng.random(sizes) < density)
    dense.flat[0] = max(dense.flat[0], 1)
    coords = np.argwhere(dense > 0)
    return SparseCountTensor(sizes, coords, dense[tuple(coords.T)])


def random_state(rng, sizes, K, lo=0.5, hi=2.0):
    factors = [rng.uniform(lo, hi, size=(n, K)) for n in sizes]
    shapes = [rng.uniform(0.5, 3.0, size=(n, K)) for n in sizes]
    rates = [rng.uniform(0.5, 3.0, size=(n, K)) for n in sizes]
    return FactorState(factors, shapes, rates)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_cfg():
    return ModelConfig(K=2, layer_widths=(4,), max_iters=5, mean_samples=3, seed=7)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = sorted(getattr(module, "RESULT_LINES", []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
