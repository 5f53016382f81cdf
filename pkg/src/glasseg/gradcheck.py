"""Finite-difference gradient verification utilities.

Used throughout the test suite to validate every hand-derived backward pass:
central differences at double precision against the analytic gradients
produced by the tape.
"""

from __future__ import annotations

import numpy as np

from . import autodiff
from .autodiff import Tensor


def numeric_gradient(fn, arrays, index, eps=1e-4):
    """Central finite-difference gradient of scalar ``fn`` w.r.t. one array.

    ``fn`` maps a list of ndarrays to a float; ``arrays[index]`` is perturbed
    elementwise.
    """
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn(base)
        flat[i] = orig - eps
        f_minus = fn(base)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def numeric_gradient_at(fn, arrays, index, positions, eps=1e-4):
    """Finite differences for a subsample of flat ``positions`` only."""
    base = [a.copy() for a in arrays]
    flat = base[index].reshape(-1)
    out = np.zeros(len(positions), dtype=np.float64)
    for k, pos in enumerate(positions):
        orig = flat[pos]
        flat[pos] = orig + eps
        f_plus = fn(base)
        flat[pos] = orig - eps
        f_minus = fn(base)
        flat[pos] = orig
        out[k] = (f_plus - f_minus) / (2.0 * eps)
    return out


def rel_error(a, b, floor=1e-8):
    """Max elementwise relative error with an absolute floor for tiny values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_op(op, arrays, grad_indices=None, eps=1e-4, tol=1e-3):
    """Gradcheck a tensor op: analytic vs central differences.

    ``op`` takes Tensors and returns a Tensor (any shape; a random projection
    reduces it to a scalar).  Returns the worst relative error observed.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    if grad_indices is None:
        grad_indices = range(len(arrays))
    rng = np.random.default_rng(0)

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    proj = rng.standard_normal(out.data.shape)
    loss = (out * Tensor(proj)).sum()
    autodiff.backward(loss)

    def scalar_fn(arrs):
        ts = [Tensor(a) for a in arrs]
        with autodiff.no_grad():
            o = op(*ts)
        return float((o.data * proj).sum())

    worst = 0.0
    for idx in grad_indices:
        num = numeric_gradient(scalar_fn, arrays, idx, eps=eps)
        err = rel_error(tensors[idx].grad, num, floor=1e-6)
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(
                f"gradient check failed for input {idx}: rel err {err:.3e} > {tol:.1e}")
    return worst
