import numpy as np
import pytest

from vsr360.autodiff import Tape, Tensor, backward, finite_difference_grad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gradcheck(build_loss, wrt, eps=1e-5, rtol=1e-4, atol=1e-3):
    """Compare backward() against central finite differences at fp64.

    ``build_loss`` is a zero-argument callable returning a scalar Tensor built
    from the (fp64) tensors in ``wrt``.  Relative error uses ``atol`` as the
    denominator floor so near-zero entries are compared absolutely.
    """
    for t in wrt:
        assert t.data.dtype == np.float64, "gradcheck requires fp64 tensors"
        t.grad = None
    with Tape() as tape:
        loss = build_loss()
    backward(tape, loss)
    for t in wrt:
        got = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        t.grad = None
        want = finite_difference_grad(lambda _: build_loss(), t, eps).data
        rel = np.abs(got - want) / np.maximum(np.abs(want), atol)
        assert rel.max() < rtol, f"gradient mismatch: max rel err {rel.max():.3e}"


def t64(arr, requires_grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)
