import numpy as np
import pytest

from scaa import ops
from scaa.gradcheck import check_gradients
from scaa.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def projected_loss(fn, out_shape, seed=0):
    """Loss sum(fn() * R) with a fixed random R, so every output element matters."""
    r = Tensor(np.random.default_rng(seed).standard_normal(out_shape))
    return lambda: ops.sum(ops.mul(fn(), r))


def max_grad_error(fn, tensors, seed=0, max_coords=None):
    out_shape = fn().shape
    errs = check_gradients(projected_loss(fn, out_shape, seed), tensors, max_coords=max_coords,
                           rng=np.random.default_rng(seed))
    return max(errs.values())


# one line per acceptance criterion, printed after the run so it lands in the log even without -s
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
