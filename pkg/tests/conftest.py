import numpy as np
import pytest

from d4c.autograd import Tensor


def numeric_grad(fn, inputs, h=1e-3):
    """Central finite differences of the scalar ``fn(*inputs)`` w.r.t. every input array."""
    grads = []
    for x in inputs:
        g = np.zeros(x.data.shape, dtype=np.float64)
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(fn(*inputs).data.astype(np.float64).sum())
            flat[i] = old - h
            fm = float(fn(*inputs).data.astype(np.float64).sum())
            flat[i] = old
            g.reshape(-1)[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def gradcheck(fn, arrays, seed=0, h=1e-3):
    """Max relative error between autograd and finite-difference gradients.

    The output is reduced with a fixed random projection so that every
    output element contributes.  Errors are measured per input tensor as
    ``max|g_auto - g_fd| / max|g_fd|``.
    """
    inputs = [Tensor(np.array(a, dtype=np.float32), requires_grad=True) for a in arrays]
    out = fn(*inputs)
    proj = np.random.default_rng(seed + 1000).standard_normal(out.shape).astype(np.float32)

    def loss(*xs):
        return fn(*xs) * Tensor(proj)

    total = (out * Tensor(proj)).sum()
    total.backward()
    auto = [x.grad.astype(np.float64) for x in inputs]
    fd = numeric_grad(loss, inputs, h)
    errs = []
    for a, f in zip(auto, fd):
        scale = max(np.abs(f).max(), 1e-6)
        errs.append(float(np.abs(a - f).max() / scale))
    return max(errs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
