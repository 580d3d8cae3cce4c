"""Central finite-difference checks for autodiff gradients."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check_gradients(fn, leaves, eps: float = 1e-5) -> dict[str, float]:
    """Compare autodiff and central-difference gradients of scalar ``fn()``.

    ``leaves`` are Tensors with ``requires_grad``; ``fn`` must rebuild the graph
    from their current values on every call. Returns the relative error per leaf.
    """
    for leaf in leaves:
        leaf.grad = None
    out = fn()
    ad.backward(out)
    analytic = [np.zeros_like(l.value) if l.grad is None else l.grad.copy() for l in leaves]

    def scalar():
        return float(fn().value)

    errors = {}
    for k, (leaf, ga) in enumerate(zip(leaves, analytic)):
        gn = numeric_grad(scalar, leaf.value, eps)
        errors[leaf.name or f"leaf{k}"] = relative_error(ga, gn)
    return errors
