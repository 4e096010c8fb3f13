"""Central-difference gradients, the independent oracle for ``backward``."""
import numpy as np

from .tensor import Tensor, default_dtype


def finite_difference_gradient(f, x, h=1e-3):
    """Approximate df/dx by central differences, one coordinate at a time.

    ``f`` maps a Tensor to a scalar Tensor (or float); ``x`` is not mutated.
    Evaluation happens in float64.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with default_dtype(np.float64):
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(Tensor(base.copy())))
            flat[i] = orig - h
            fm = _scalar(f(Tensor(base.copy())))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)


def _scalar(v):
    return float(v.item()) if isinstance(v, Tensor) else float(v)


def analytic_gradient(f, x):
    """Gradient of ``f`` at ``x`` via backward(), evaluated in float64."""
    with default_dtype(np.float64):
        t = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
        f(t).backward()
        return t.grad


def max_relative_error(a, b, floor=1e-12):
    """Norm-wise relative error ||a-b|| / max(||a||, ||b||).

    Norm-wise rather than elementwise so that coordinates whose true
    gradient is ~0 do not turn O(h^2) truncation error into a huge ratio.
    """
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).ravel()
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
