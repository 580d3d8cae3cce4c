"""NumPy reference implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same floating-point operation order, so the two backends agree to
rounding (bitwise for the Lorenz integrator and the canonical product).
"""
import numpy as np


def _lorenz_rhs(x, forcing):
    # dx_i = (x_{i+1} - x_{i-2}) * x_{i-1} - x_i + F, indices mod P
    return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + forcing


def lorenz96_rk4(x0, forcing, dt, n_obs, substeps, blowup):
    """Integrate Lorenz-96 with classic RK4.

    Returns ``(trajectory, failed_at)`` where ``trajectory[k]`` is the state
    after ``k * substeps`` steps and ``failed_at`` is the first observation
    index whose state exceeded ``blowup`` in magnitude (-1 when none did).
    """
    x = np.array(x0, dtype=np.float64)
    out = np.empty((n_obs, x.shape[0]), dtype=np.float64)
    half = 0.5 * dt
    sixth = dt / 6.0
    for k in range(n_obs):
        if k > 0:
            for _ in range(substeps):
                k1 = _lorenz_rhs(x, forcing)
                k2 = _lorenz_rhs(x + half * k1, forcing)
                k3 = _lorenz_rhs(x + half * k2, forcing)
                k4 = _lorenz_rhs(x + dt * k3, forcing)
                x = x + sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k] = x
        if not np.all(np.abs(x) <= blowup):
            return out[: k + 1], k
    return out, -1


def var_simulate(coefs, init, noise):
    """Run ``h[t] = sum_l coefs[l-1] @ h[t-l] + noise[t]``; ``h[:lag] = init``."""
    coefs = np.asarray(coefs, dtype=np.float64)
    lag = coefs.shape[0]
    T, P = noise.shape
    h = np.zeros((T, P), dtype=np.float64)
    h[:lag] = init[: min(lag, T)]
    for t in range(lag, T):
        acc = np.zeros(P)
        for l in range(1, lag + 1):
            acc = acc + coefs[l - 1] @ h[t - l]
        h[t] = acc + noise[t]
    return h


def _matpow(M, e):
    n = M.shape[-1]
    result = np.broadcast_to(np.eye(n), M.shape).copy()
    base = M
    while e:
        if e & 1:
            result = result @ base
        e >>= 1
        if e:
            base = base @ base
    return result


def acyclicity_batch(A, clamp):
    """Trace-of-power acyclicity residual and its gradient for a stack of N x N matrices."""
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[-1]
    sq = A * A
    live = sq < clamp
    sq = np.where(live, sq, clamp)
    M = sq + np.eye(n)
    P = _matpow(M, n - 1)
    full = P @ M
    alpha = np.trace(full, axis1=-2, axis2=-1) - n
    grad = n * np.swapaxes(P, -1, -2) * (2.0 * A) * live
    return np.maximum(alpha, 0.0), grad


def canonical_bmm(P, X):
    """Batched ``P @ X`` whose sums run over value-sorted terms.

    The result does not depend on the order of the contracted axis, so
    relabelling the graph nodes permutes the output exactly.
    """
    terms = P[:, :, :, None] * X[:, None, :, :]
    terms = np.sort(terms, axis=2)
    out = terms[:, :, 0, :].copy()
    for j in range(1, terms.shape[2]):
        out = out + terms[:, :, j, :]
    return out + 0.0
