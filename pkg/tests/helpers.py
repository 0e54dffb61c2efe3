"""Shared test utilities: finite-difference gradient checks and tiny datasets."""

from __future__ import annotations

import numpy as np

from cqd import tensor as T


def numeric_grad(f, arrays, i, h=1e-6):
    """Central differences of the scalar ``f(*arrays)`` with respect to ``arrays[i]``."""
    x = arrays[i]
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(*arrays)
        x[idx] = old - h
        fm = f(*arrays)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(op, arrays, rng, h=1e-6, wrt=None) -> float:
    """Worst relative error between backprop and central differences.

    ``op`` maps Tensors to a Tensor; the checked scalar is ``sum(op(...) * R)``
    for a fixed random ``R`` so every output element contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    probe = op(*[T.Tensor(a) for a in arrays])
    R = rng.standard_normal(probe.shape)

    def scalar(*arrs):
        with T.no_grad():
            return float(np.sum(op(*[T.Tensor(a) for a in arrs]).data * R))

    ts = [T.Tensor(a.copy(), requires_grad=(k in wrt)) for k, a in enumerate(arrays)]
    out = op(*ts)
    T.backward(T.tsum(T.mul(out, T.Tensor(R))))
    worst = 0.0
    for k in wrt:
        analytic = ts[k].grad if ts[k].grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, rel_error(analytic, numeric_grad(scalar, arrays, k, h)))
    return worst


def simplex(rng, shape):
    """Random rows on the probability simplex, bounded away from zero."""
    p = rng.uniform(0.05, 1.0, shape)
    return p / p.sum(axis=-1, keepdims=True)
