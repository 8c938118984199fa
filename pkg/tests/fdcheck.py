"""Central finite-difference gradient oracle.

Independent of the tape: gradients are estimated by perturbing raw numpy
buffers and re-running the forward function. Used at float64 with h=1e-5.
"""

import numpy as np

from adapterlm import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar-valued ``f`` w.r.t. array ``x`` (in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise error normalized by max(1, |analytic|, |numeric|)."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def max_grad_error(loss_fn, params, h: float = 1e-5) -> float:
    """Worst rel_err between tape gradients and finite differences.

    ``loss_fn`` must be a deterministic zero-arg closure over ``params``
    returning a scalar Tensor; params should be float64.
    """
    T.reset_tape()
    for p in params:
        p.grad = None
    loss = loss_fn()
    T.backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    T.reset_tape()

    def f():
        with T.no_grad():
            return loss_fn().item()

    worst = 0.0
    for p, a in zip(params, analytic):
        n = numeric_grad(f, p.data, h)
        worst = max(worst, rel_err(a, n))
    return worst
