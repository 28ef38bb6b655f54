"""Central finite differences, kept independent of the autodiff path."""

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn, arrays, h=1e-5):
    """Central-difference gradient of scalar ``fn(*arrays)`` w.r.t. each array.

    ``fn`` receives plain numpy arrays and must return a float.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*arrays)
            flat[i] = orig - h
            fm = fn(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(op, arrays):
    """Gradient of ``sum(op(*tensors))`` obtained through the tape."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    backward(out.sum(), wrt=tensors)
    return [t.grad for t in tensors]


def max_rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_op(op, arrays, h=1e-5):
    """Return the worst relative error between tape and finite-difference grads of ``sum(op)``."""

    def scalar(*xs):
        return float(op(*[Tensor(x) for x in xs]).data.sum())

    numeric = numerical_grad(scalar, arrays, h=h)
    analytic = analytic_grad(op, arrays)
    return max(max_rel_error(a, n, floor=1e-3) for a, n in zip(analytic, numeric))
