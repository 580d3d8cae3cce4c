"""Define-by-run reverse-mode autodiff over float64 NumPy arrays.

Shapes are static and elementwise ops never broadcast: operands must match
exactly, and bias/linear maps have their own ops. Shape errors are raised
when the op is recorded, before any backward pass.
"""
from __future__ import annotations

import numpy as np

from .. import kernels


class ShapeError(ValueError):
    pass


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


class Tensor:
    __slots__ = ("value", "grad", "parents", "back", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 parents: tuple = (), back=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.back = back
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return bmm(self, other)


def const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, back) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(value)
    # back receives the upstream gradient and returns one gradient per parent
    return Tensor(value, True, parents=parents, back=back)


def _same(a: Tensor, b: Tensor, op: str):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def backward(out: Tensor, seed=None) -> None:
    """Accumulate d(out)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if not out.requires_grad:
        return
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(out): np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.back is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node.parents, node.back(g)):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = gp if k not in grads else grads[k] + gp


# --------------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    _same(a, b, "add")
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = const(a), const(b)
    _same(a, b, "sub")
    return _node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)
    _same(a, b, "mul")
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av))


def neg(a) -> Tensor:
    return _node(-a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    return _node(a.value * c, (a,), lambda g: (g * c,))


def shift(a, c: float) -> Tensor:
    """``a + c`` for a Python scalar ``c``."""
    return _node(a.value + c, (a,), lambda g: (g,))


def square(a) -> Tensor:
    av = a.value
    return _node(av * av, (a,), lambda g: (2.0 * g * av,))


def mul_const(a, c) -> Tensor:
    """``a * c`` for a constant array ``c`` of the same shape."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.value.shape:
        raise ShapeError(f"mul_const: shapes {a.value.shape} and {c.shape} differ")
    return _node(a.value * c, (a,), lambda g: (g * c,))


def abs_(a) -> Tensor:
    av = a.value
    return _node(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def exp(a) -> Tensor:
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,))


def sigmoid(a) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    mask = a.value > 0
    return _node(a.value * mask, (a,), lambda g: (g * mask,))


def identity(a) -> Tensor:
    return a


# --------------------------------------------------------------------------- reductions / shape


def sum_(a) -> Tensor:
    shape = a.value.shape
    return _node(np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a) -> Tensor:
    return scale(sum_(a), 1.0 / a.value.size)


def softmax_last(a) -> Tensor:
    """Softmax over the last axis."""
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _node(out, (a,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def sum_last(a) -> Tensor:
    """Sum over the last axis."""
    n = a.value.shape[-1]
    return _node(a.value.sum(axis=-1), (a,), lambda g: (np.repeat(g[..., None], n, axis=-1),))


def reshape(a, shape) -> Tensor:
    old = a.value.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    return _node(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(parts, axis: int = -1) -> Tensor:
    parts = [const(p) for p in parts]
    vals = [p.value for p in parts]
    ref = list(vals[0].shape)
    ax = axis % len(ref)
    for v in vals[1:]:
        other = list(v.shape)
        if len(other) != len(ref) or any(x != y for k, (x, y) in enumerate(zip(ref, other)) if k != ax):
            raise ShapeError(f"concat: incompatible shapes {vals[0].shape} and {v.shape} on axis {axis}")
    cuts = np.cumsum([v.shape[ax] for v in vals])[:-1]
    return _node(np.concatenate(vals, axis=ax), tuple(parts), lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(parts, axis: int = 0) -> Tensor:
    parts = [const(p) for p in parts]
    shape = parts[0].value.shape
    for p in parts[1:]:
        if p.value.shape != shape:
            raise ShapeError(f"stack: shapes {shape} and {p.value.shape} differ")
    n = len(parts)
    return _node(np.stack([p.value for p in parts], axis=axis), tuple(parts),
                 lambda g: tuple(np.take(g, k, axis=axis) for k in range(n)))


def take(a, idx) -> Tensor:
    """Gather along axis 0 (``a[idx]``); repeated indices accumulate in backward."""
    idx = np.asarray(idx)
    shape = a.value.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.value[idx], (a,), back)


def select(a, key) -> Tensor:
    """Basic-slicing view ``a[key]`` (no fancy indexing)."""
    shape = a.value.shape

    def back(g):
        out = np.zeros(shape)
        out[key] = g
        return (out,)

    return _node(a.value[key], (a,), back)


# --------------------------------------------------------------------------- linear algebra


def add_bias(x, b) -> Tensor:
    x, b = const(x), const(b)
    F = x.value.shape[-1]
    if b.value.shape != (F,):
        raise ShapeError(f"add_bias: bias shape {b.value.shape} does not match last axis {F}")
    return _node(x.value + b.value, (x, b), lambda g: (g, g.reshape(-1, F).sum(axis=0)))


def canonical_linear(xv: np.ndarray, Wv: np.ndarray) -> np.ndarray:
    """``xv @ Wv`` accumulated one input feature at a time.

    Each output row is computed by the same elementwise sequence whatever its
    position, so permuting rows of ``xv`` permutes the result bitwise.
    """
    out = np.zeros(xv.shape[:-1] + (Wv.shape[1],))
    for f in range(Wv.shape[0]):
        out += xv[..., f, None] * Wv[f]
    return out


def linear(x, W, canonical: bool = False) -> Tensor:
    """``x[..., F] @ W[F, G]`` applied along the last axis."""
    x, W = const(x), const(W)
    xv, Wv = x.value, W.value
    if Wv.ndim != 2 or xv.shape[-1] != Wv.shape[0]:
        raise ShapeError(f"linear: {xv.shape} @ {Wv.shape}")
    F, G = Wv.shape

    def back(g):
        gx = g @ Wv.T
        gW = xv.reshape(-1, F).T @ g.reshape(-1, G)
        return gx, gW

    return _node(canonical_linear(xv, Wv) if canonical else xv @ Wv, (x, W), back)


def bmm(a, b, canonical: bool = False) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly.

    ``canonical=True`` (3-D only) sums each inner product in sorted order so
    the value is invariant to a joint relabelling of the contracted axis.
    """
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    if av.ndim != bv.ndim or av.ndim < 2 or av.shape[:-2] != bv.shape[:-2] or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"bmm: {av.shape} @ {bv.shape}")

    def back(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    value = kernels.canonical_bmm(np.ascontiguousarray(av), np.ascontiguousarray(bv)) if canonical else av @ bv
    return _node(value, (a, b), back)


def _inverse(M: np.ndarray):
    try:
        with np.errstate(all="ignore"):
            return np.linalg.inv(M)
    except np.linalg.LinAlgError:
        return None


def condition_estimate(M: np.ndarray, Minv: np.ndarray | None = None) -> np.ndarray:
    """1-norm condition numbers ``|M|_1 |M^-1|_1`` (inf for singular systems)."""
    M = np.asarray(M, dtype=np.float64)
    Minv = _inverse(M) if Minv is None else Minv
    if Minv is None:
        return np.full(M.shape[:-2], np.inf)
    norm1 = lambda x: np.abs(x).sum(axis=-2).max(axis=-1)  # noqa: E731
    with np.errstate(all="ignore"):
        return np.nan_to_num(norm1(M) * norm1(Minv), nan=np.inf)


def solve(M, B, max_condition: float = 1e12) -> Tensor:
    """Differentiable ``X`` with ``M @ X = B`` (batched over leading axes).

    Raises :class:`SingularMatrixError` when any system's condition number
    exceeds ``max_condition``. 2-D triangular systems use a triangular solve.
    """
    M, B = const(M), const(B)
    Mv, Bv = M.value, B.value
    if Mv.shape[-1] != Mv.shape[-2] or Mv.shape[:-1] != Bv.shape[:-1] or Mv.ndim != Bv.ndim:
        raise ShapeError(f"solve: M {Mv.shape}, B {Bv.shape}")
    Minv = _inverse(Mv)
    cond = condition_estimate(Mv, Minv)
    worst = float(np.max(cond)) if np.size(cond) else 0.0
    if not np.isfinite(worst) or worst > max_condition:
        raise SingularMatrixError(f"matrix is singular or ill-conditioned (condition {worst:.3g})", worst)
    X = _solve(Mv, Bv)
    MinvT = np.swapaxes(Minv, -1, -2)

    def back(g):
        gB = MinvT @ g
        gM = -gB @ np.swapaxes(X, -1, -2)
        return gM, gB

    return _node(X, (M, B), back)


def _solve(M, B):
    if M.ndim == 2:
        from scipy.linalg import solve_triangular
        if not np.any(np.tril(M, -1)):
            return solve_triangular(M, B, lower=False)
        if not np.any(np.triu(M, 1)):
            return solve_triangular(M, B, lower=True)
    return np.linalg.solve(M, B)


# --------------------------------------------------------------------------- graph ops


def acyclicity(A, clamp: float = 10.0) -> Tensor:
    """Batched ``Tr[(I + A∘A)^N] - N`` for ``A`` of shape (B, N, N) -> (B,)."""
    Av = A.value
    if Av.ndim != 3 or Av.shape[1] != Av.shape[2]:
        raise ShapeError(f"acyclicity expects (B, N, N), got {Av.shape}")
    alpha, grad = kernels.acyclicity_batch(Av, clamp)
    return _node(alpha, (A,), lambda g: (g[:, None, None] * grad,))


def row_normalize(A, canonical: bool = False) -> Tensor:
    """``D^{-1} A`` with D the row sums; all-zero rows map to zero rows.

    ``canonical=True`` sums each row in sorted order so that relabelling the
    nodes permutes the result exactly (batched input only).
    """
    Av = A.value
    if canonical:
        deg = kernels.canonical_bmm(Av, np.ones(Av.shape[:-1] + (1,)))[..., 0]
    else:
        deg = Av.sum(axis=-1)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg != 0)
    out = Av * inv[..., None]

    def back(g):
        return (inv[..., None] * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (A,), back)
