"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from dmeta.tensor.tape import Tape, Tensor


def numerical_grad(fn, arrays, index, h=1e-6):
    """Central-difference gradient of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = float(fn(*arrays))
        x[i] = orig - h
        fm = float(fn(*arrays))
        x[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


def analytic_grads(op, arrays, weights=None):
    """Gradients of ``sum(weights * op(*tensors))`` for every input array."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op(*tensors)
    seed = np.ones_like(out.data) if weights is None else weights
    tape.backward(out, seed=seed)
    return [t.grad for t in tensors]


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def check_op(op, arrays, seed=0, h=1e-6):
    """Max relative error between tape gradients and central differences.

    A random projection of the output turns vector-valued ops into a scalar.
    Arrays must be float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = op(*[Tensor(a) for a in arrays])
    weights = np.random.default_rng([seed, 7919]).standard_normal(out.shape)

    def scalar(*arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * weights).sum())

    grads = analytic_grads(op, arrays, weights)
    errors = [relative_error(g, numerical_grad(scalar, arrays, i, h)) for i, g in enumerate(grads)]
    return max(errors)
