import numpy as np
import pytest

from tlm.autodiff import Tape, Tensor
from tlm.oracle import finite_diff_grad, relative_error


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def grad_error(fn, *arrays, step=1e-5):
    """Worst norm-wise relative error between tape and central-difference gradients.

    ``fn`` maps Tensors to a scalar Tensor; every input is checked.
    """
    leaves = [Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    with Tape():
        loss = fn(*leaves)
    loss.backward()
    worst = 0.0
    for leaf in leaves:
        numeric = finite_diff_grad(lambda _x: fn(*leaves).item(), leaf.data, step)
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        worst = max(worst, relative_error(analytic, numeric))
    return worst
