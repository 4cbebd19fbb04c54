import numpy as np
import pytest

from tridiff.grad import Tensor, backward, reset_tape, no_grad


@pytest.fixture(autouse=True)
def _fresh_tape():
    reset_tape()
    yield
    reset_tape()


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x, elementwise."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x))
            flat[i] = orig - h
            fm = float(f(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return g


def analytic_grad(f, x: np.ndarray) -> np.ndarray:
    """Backprop gradient of scalar f w.r.t. a fresh leaf holding x."""
    reset_tape()
    t = Tensor(x.copy(), requires_grad=True)
    loss = f(t)
    backward(loss)
    g = t.grad.copy()
    reset_tape()
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(b.ravel()), 1e-12)
    return float(np.linalg.norm((a - b).ravel()) / denom)


def check_grad(f_tensor, f_np, x: np.ndarray, tol: float = 1e-6, h: float = 1e-5):
    """Assert analytic gradient of f matches central differences."""
    ga = analytic_grad(f_tensor, x)
    gn = finite_diff_grad(f_np, x, h=h)
    err = rel_err(ga, gn)
    assert err < tol, f"gradient mismatch: rel err {err:.3e}"
    return err
