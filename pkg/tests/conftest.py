import numpy as np
import pytest

from regimenas.tensor import GradTape, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_diff_grad(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued fn at x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def autodiff_grad(build_scalar, x: np.ndarray) -> np.ndarray:
    """Tape gradient of build_scalar(Tensor) -> scalar Tensor at x."""
    t = Tensor(x, requires_grad=True)
    with GradTape() as tape:
        out = build_scalar(t)
    tape.backward(out)
    assert t.grad is not None
    return t.grad


def assert_grads_close(build_scalar, np_scalar, x, rtol=1e-4, atol=1e-7):
    """Compare autodiff against central differences on the same function."""
    got = autodiff_grad(build_scalar, np.array(x, dtype=np.float64))
    want = finite_diff_grad(lambda v: np_scalar(v), np.array(x, dtype=np.float64))
    np.testing.assert_allclose(got, want, rtol=rtol, atol=atol)
