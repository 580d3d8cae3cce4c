"""Per-timestamp instantaneous structure learning.

Each timestamp t owns a weighted adjacency ``A[t]`` (``A[j, i]`` is the
weight of edge j -> i). A variational structural model shared across t maps
the latent features through ``Z = (I - A^T) f_enc(H)`` and back through
``H_hat = f_dec((I - A^T)^{-1} Z)``. The negative ELBO is minimized subject
to ``acyclicity(A[t]) = 0`` with an augmented Lagrangian whose multiplier and
penalty weight are kept per timestamp.

Primal subproblems are solved with L-BFGS-B on all selected timestamps at
once (the VAE parameters couple them). ``A = A_pos - A_neg`` with both parts
bounded below by zero; diagonal bounds are pinned to zero so self-loops never
appear.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import Bounds, minimize

from . import tensor
from .diffkit import autodiff as ad
from .diffkit import checkpoint
from .diffkit.autodiff import SingularMatrixError, Tensor
from .diffkit.nn import Mlp2, ParamStore
from .tensor import TensorSeries

logger = logging.getLogger(__name__)


def acyclicity(A, clamp: float = 10.0) -> float:
    """``Tr[(I + A∘A)^N] - N`` for one square matrix (zero iff A is a DAG)."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"acyclicity expects a square matrix, got {A.shape}")
    if np.any(A * A >= clamp):
        logger.debug("acyclicity: entries of A∘A clamped at %g", clamp)
    alpha, _ = _kernels().acyclicity_batch(A[None], clamp)
    return float(alpha[0])


def acyclicity_grad(A, clamp: float = 10.0) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    _, g = _kernels().acyclicity_batch(A[None], clamp)
    return g[0]


def _kernels():
    from . import kernels
    return kernels


# --------------------------------------------------------------------------- model


@dataclass
class InnerVae:
    store: ParamStore
    f_enc: Mlp2
    f_dec: Mlp2
    H_dim: int
    unit_variance: bool = False

    @classmethod
    def create(cls, H_dim: int, hidden: int | None = None, seed: int = 0, activation: str = "tanh",
               init: str = "glorot", unit_variance: bool = False) -> "InnerVae":
        hidden = H_dim if hidden is None else hidden
        rng = np.random.default_rng(seed)
        store = ParamStore()
        f_enc = Mlp2.create(store, "enc.", H_dim, hidden, H_dim, rng, activation, init)
        f_dec = Mlp2.create(store, "dec.", H_dim, hidden, H_dim, rng, activation, init)
        # log-variance head on the encoder features, starting at unit variance
        store.add("logvar.W", np.zeros((H_dim, H_dim)))
        store.add("logvar.b", np.zeros(H_dim))
        return cls(store, f_enc, f_dec, H_dim, unit_variance)

    def state(self):
        return self.store.state()

    def save(self, path) -> None:
        checkpoint.save(self.state(), path)


def _batch(A, H):
    A, H = ad.const(A), ad.const(H)
    single = A.value.ndim == 2
    if single:
        A = ad.reshape(A, (1,) + A.value.shape)
        H = ad.reshape(H, (1,) + H.value.shape)
    return A, H, single


def _eye_like(A: Tensor) -> np.ndarray:
    n = A.value.shape[-1]
    return np.broadcast_to(np.eye(n), A.value.shape).copy()


def encode_sem(vae: InnerVae, A, H, eps=None):
    """Return ``(Z, Z_mean, Z_logvar)`` for one snapshot ([N, N], [N, H_dim]) or a batch.

    ``Z_mean = (I - A^T) f_enc(H)``; ``Z = Z_mean + exp(logvar / 2) * eps``
    (``eps=None`` means zero noise).
    """
    A, H, single = _batch(A, H)
    feats = vae.f_enc(H)
    M = ad.sub(_eye_like(A), ad.transpose(A))
    mean = ad.bmm(M, feats)
    if vae.unit_variance:
        logvar = Tensor(np.zeros(mean.value.shape))
    else:
        logvar = ad.add_bias(ad.linear(feats, vae.store["logvar.W"]), vae.store["logvar.b"])
    if eps is None:
        Z = mean
    else:
        eps = np.asarray(eps, dtype=np.float64).reshape(mean.value.shape)
        Z = ad.add(mean, ad.mul_const(ad.exp(ad.scale(logvar, 0.5)), eps))
    if single:
        return tuple(ad.reshape(x, x.value.shape[1:]) for x in (Z, mean, logvar))
    return Z, mean, logvar


def decode_sem(vae: InnerVae, A, Z, max_condition: float = 1e12) -> Tensor:
    """``H_hat = f_dec(solve(I - A^T, Z))``."""
    A, Z, single = _batch(A, Z)
    M = ad.sub(_eye_like(A), ad.transpose(A))
    try:
        X = ad.solve(M, Z, max_condition=max_condition)
    except SingularMatrixError as exc:
        resid = _kernels().acyclicity_batch(A.value, 10.0)[0]
        raise SingularMatrixError(f"{exc}; acyclicity residual {float(resid.max()):.3g}", exc.condition) from None
    out = vae.f_dec(X)
    return ad.reshape(out, out.value.shape[1:]) if single else out


def _elbo_terms(vae: InnerVae, A, H, eps):
    """Per-sample KL and reconstruction terms (each shape [M])."""
    Z, mean, logvar = encode_sem(vae, A, H, eps)
    Hhat = decode_sem(vae, A, Z)
    M = mean.value.shape[0]
    kl_cell = ad.shift(ad.sub(ad.add(ad.square(mean), ad.exp(logvar)), logvar), -1.0)
    kl = ad.scale(ad.sum_last(ad.reshape(kl_cell, (M, -1))), 0.5)
    rec = ad.scale(ad.sum_last(ad.reshape(ad.square(ad.sub(ad.const(H), Hhat)), (M, -1))), 0.5)
    return kl, rec


def elbo_loss(vae: InnerVae, A, H, eps=None):
    """Negative ELBO averaged over samples: ``KL(q || N(0, I)) + ½‖H - H_hat‖²``.

    ``H`` is one snapshot [N, H_dim] or a batch [M, N, H_dim] sharing ``A``
    ([N, N]) or with per-sample ``A`` ([M, N, N]). Returns ``(loss, parts)``.
    """
    A, H = ad.const(A), ad.const(H)
    if H.value.ndim == 2:
        H = ad.reshape(H, (1,) + H.value.shape)
        eps = None if eps is None else np.asarray(eps).reshape(H.value.shape)
    M = H.value.shape[0]
    if A.value.ndim == 2:
        A = ad.reshape(A, (1,) + A.value.shape)
        if M > 1:
            A = ad.take(A, np.zeros(M, dtype=np.int64))
    kl, rec = _elbo_terms(vae, A, H, eps)
    loss = ad.scale(ad.sum_(ad.add(kl, rec)), 1.0 / M)
    if not np.isfinite(loss.value):
        raise FloatingPointError("ELBO is not finite")
    return loss, {"kl": float(kl.value.mean()), "reconstruction": float(rec.value.mean())}


class FrozenObjective:
    """Penalized negative ELBO of one snapshot as a function of A alone, with
    the VAE held fixed. Plain numpy value and gradient; agrees with the
    autodiff path (checked in the tests) at a fraction of the cost.
    """

    def __init__(self, vae: InnerVae, H: np.ndarray, eps: np.ndarray, weights: np.ndarray,
                 max_condition: float = 1e12):
        H = np.asarray(H, dtype=np.float64)  # [M, N, Hd]
        self.vae, self.H, self.w = vae, H, np.asarray(weights, dtype=np.float64)
        self.max_condition = max_condition
        self.f = vae.f_enc.forward_np(H)
        if vae.unit_variance:
            lv = np.zeros_like(self.f)
        else:
            lv = self.f @ vae.store["logvar.W"].value + vae.store["logvar.b"].value
        self.kl_const = 0.5 * np.sum(np.exp(lv) - lv - 1.0, axis=(1, 2))
        self.noise = np.exp(0.5 * lv) * np.asarray(eps, dtype=np.float64).reshape(H.shape)
        s, p = vae.store, vae.f_dec.prefix
        self.W1, self.b1, self.W2, self.b2 = (s[p + k].value for k in ("W1", "b1", "W2", "b2"))
        self.act = vae.f_dec.activation

    def data(self, A: np.ndarray):
        """Weighted ``sum_m w_m (KL_m + rec_m)`` and its gradient in A ([N, N])."""
        N = A.shape[0]
        Mt = np.eye(N) - A.T
        try:
            Minv = np.linalg.inv(Mt)
        except np.linalg.LinAlgError:
            return np.inf, None
        cond = np.abs(Mt).sum(axis=0).max() * np.abs(Minv).sum(axis=0).max()
        if not cond <= self.max_condition:
            return np.inf, None
        mean = Mt @ self.f  # [M, N, Hd]
        Z = mean + self.noise
        Y = Minv @ Z
        pre = Y @ self.W1 + self.b1
        if self.act == "tanh":
            h = np.tanh(pre)
            dact = 1.0 - h * h
        elif self.act == "relu":
            h = np.maximum(pre, 0.0)
            dact = (pre > 0).astype(np.float64)
        else:
            h, dact = pre, 1.0
        R = h @ self.W2 + self.b2 - self.H
        kl = 0.5 * np.sum(mean * mean, axis=(1, 2)) + self.kl_const
        rec = 0.5 * np.sum(R * R, axis=(1, 2))
        w = self.w[:, None, None]
        gY = ((w * R) @ self.W2.T * dact) @ self.W1.T
        gZ = Minv.T @ gY
        gmean = w * mean + gZ
        # mean = f - A^T f  and  Y = (I - A^T)^{-1} Z  give the two A-gradients below
        gA = -np.einsum("mjh,mih->ji", self.f, gmean) + np.einsum("mjh,mih->ji", Y, gZ)
        return float(np.sum(self.w * (kl + rec))), gA


# --------------------------------------------------------------------------- schedule / state


@dataclass
class InnerSchedule:
    lambda0: float = 0.0
    c0: float = 1.0
    eta: float = 10.0
    gamma: float = 0.25
    atol: float = 1e-8
    max_rounds: int = 50
    maxiter: int = 100  # L-BFGS iterations per dual round
    ftol: float = 1e-12
    gtol: float = 1e-9
    c_max: float = 1e16
    edge_threshold: float = 0.3
    l1: float = 0.05
    context: int = 1  # latent columns [t - context + 1, t] serve as samples for snapshot t
    clamp: float = 10.0
    seed: int = 0
    resample_noise: bool = False  # fresh reparameterization noise every dual round

    def __post_init__(self):
        if not self.eta > 1:
            raise ValueError("eta must exceed 1")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.context < 1 or self.max_rounds < 1:
            raise ValueError("context and max_rounds must be >= 1")


@dataclass
class InnerState:
    """Per-timestamp primal/dual state, kept across calls for warm starts."""

    A: np.ndarray  # [T, N, N]
    lam: np.ndarray
    c: np.ndarray
    prev_alpha: np.ndarray
    alpha: np.ndarray
    converged: np.ndarray
    rounds: np.ndarray
    history: list = field(default_factory=list)  # (round, t-indices, lam, c, alpha)
    round_counter: int = 0

    @classmethod
    def fresh(cls, T: int, N: int, schedule: InnerSchedule) -> "InnerState":
        return cls(np.zeros((T, N, N)), np.full(T, schedule.lambda0, float), np.full(T, schedule.c0, float),
                   np.full(T, np.inf), np.zeros(T), np.zeros(T, bool), np.zeros(T, np.int64))

    def reopen(self, ts, A_new=None, schedule: InnerSchedule | None = None) -> None:
        """Mark timestamps for re-optimization, optionally from new starting matrices.

        With ``schedule`` the duals restart from ``(lambda0, c0)``; a saturated
        penalty would otherwise freeze a new, cyclic starting point in place.
        """
        ts = np.asarray(ts, dtype=np.int64)
        if A_new is not None:
            A_new = np.array(A_new, dtype=np.float64)
            np.einsum("tii->ti", A_new)[...] = 0.0
            self.A[ts] = A_new
        if schedule is not None:
            self.lam[ts] = schedule.lambda0
            self.c[ts] = schedule.c0
        self.converged[ts] = False
        self.prev_alpha[ts] = np.inf


@dataclass
class DagSnapshot:
    A: np.ndarray
    t: int
    acyclicity_residual: float
    lam: float
    c: float
    flagged: bool
    projected: np.ndarray
    removals: list
    rounds: int

    def to_dict(self) -> dict:
        return {"t": int(self.t), "alpha": float(self.acyclicity_residual), "lambda": float(self.lam),
                "c": float(self.c), "non_acyclic": bool(self.flagged), "rounds": int(self.rounds),
                "removals": [[int(j), int(i), float(w)] for j, i, w in self.removals]}


@dataclass
class InnerResult:
    snapshots: list
    state: InnerState
    timestamps: np.ndarray


# --------------------------------------------------------------------------- graph helpers


def find_cycle(adj) -> list | None:
    """One directed cycle of the boolean graph ``adj[j, i]`` (j -> i) as an edge list, else None."""
    adj = np.asarray(adj, dtype=bool)
    n = adj.shape[0]
    color = np.zeros(n, np.int8)
    parent = np.full(n, -1)
    succ = [np.flatnonzero(adj[j]) for j in range(n)]
    for root in range(n):
        if color[root]:
            continue
        stack = [(root, 0)]
        color[root] = 1
        while stack:
            v, k = stack[-1]
            if k < len(succ[v]):
                stack[-1] = (v, k + 1)
                w = succ[v][k]
                if color[w] == 0:
                    color[w] = 1
                    parent[w] = v
                    stack.append((w, 0))
                elif color[w] == 1:
                    cyc = [(v, w)]
                    u = v
                    while u != w:
                        cyc.append((parent[u], u))
                        u = parent[u]
                    return cyc[::-1]
            else:
                color[v] = 2
                stack.pop()
    return None


def is_acyclic(adj) -> bool:
    return find_cycle(adj) is None


def hard_project(A, threshold: float = 0.3):
    """Zero entries with ``|A| < threshold`` and the diagonal, then break every
    remaining cycle by deleting its weakest edge. Returns ``(A_proj, removals)``
    with removals as ``(j, i, weight)`` in deletion order."""
    out = np.array(A, dtype=np.float64)
    out[np.abs(out) < threshold] = 0.0
    np.fill_diagonal(out, 0.0)
    removals = []
    while True:
        cyc = find_cycle(out != 0)
        if cyc is None:
            return out, removals
        j, i = min(cyc, key=lambda e: (abs(out[e]), e))
        removals.append((int(j), int(i), float(out[j, i])))
        out[j, i] = 0.0


# --------------------------------------------------------------------------- optimization


def _as_time_major(H) -> np.ndarray:
    from .anomaly import LatentSeries
    if isinstance(H, LatentSeries):
        return H.by_time()
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 3:
        raise ValueError(f"latent input must be [T, N, H_dim], got {H.shape}")
    return H


def optimize_inner(vae: InnerVae, H, schedule: InnerSchedule | None = None, state: InnerState | None = None,
                   timestamps=None, train_vae: bool = True, rounds: int | None = None) -> InnerResult:
    """Augmented-Lagrangian structure search for the selected timestamps.

    ``H`` is a LatentSeries or a time-major array [T, N, H_dim]. Each call runs
    up to ``rounds`` dual rounds (default ``schedule.max_rounds``) on the
    snapshots that have not converged; converged snapshots keep their A fixed.
    After each round: ``lam += c * alpha``, and ``c *= eta`` when
    ``alpha > gamma * previous alpha``.
    """
    sch = schedule or InnerSchedule()
    Hs = _as_time_major(H)
    T, N, Hd = Hs.shape
    if Hd != vae.H_dim:
        raise ValueError(f"latent width {Hd} does not match VAE width {vae.H_dim}")
    st = state or InnerState.fresh(T, N, sch)
    sel = np.arange(T) if timestamps is None else np.unique(np.asarray(timestamps, dtype=np.int64))
    S = sel.size
    n_rounds = sch.max_rounds if rounds is None else rounds
    if not train_vae and S > 1:
        # with the VAE frozen the snapshots decouple; separate solves keep each
        # penalty scale out of the others' line searches
        for t in sel:
            _optimize_frozen(vae, Hs, sch, st, int(t), n_rounds)
        return InnerResult([make_snapshot(st, int(t), sch) for t in sel], st, sel)

    # samples: context columns of every selected snapshot (masked, non-finite columns are skipped)
    usable = np.all(np.isfinite(Hs), axis=(1, 2))
    pos, cols = [], []
    for k, t in enumerate(sel):
        if not usable[t]:
            raise ValueError(f"latent column {t} is not available")
        for u in range(max(0, t - sch.context + 1), t + 1):
            if usable[u]:
                pos.append(k)
                cols.append(u)
    pos = np.asarray(pos, dtype=np.int64)
    counts = np.bincount(pos, minlength=S)
    weights = 1.0 / counts[pos]
    Hm = Hs[np.asarray(cols)]
    M = Hm.shape[0]

    nv = len(vae.store.flat()) if train_vae else 0
    offdiag = ~np.eye(N, dtype=bool)

    for _ in range(n_rounds):
        active = ~st.converged[sel]
        if not active.any():
            break
        r = st.round_counter
        st.round_counter += 1
        eps = np.random.default_rng([sch.seed, r if sch.resample_noise else 0]).standard_normal(Hm.shape)
        lam = st.lam[sel].copy()
        c = st.c[sel].copy()
        A0 = st.A[sel]
        # only off-diagonal entries of active snapshots are optimized; the rest stay at A0
        free = (active[:, None, None] & offdiag[None]).ravel()
        nf = int(free.sum())
        base_p, base_n = np.maximum(A0, 0).ravel(), np.maximum(-A0, 0).ravel()
        x0 = np.concatenate([vae.store.flat() if train_vae else np.zeros(0), base_p[free], base_n[free]])
        lb = np.concatenate([np.full(nv, -np.inf), np.zeros(2 * nf)])
        ub = np.full(nv + 2 * nf, np.inf)

        def unpack(x):
            ap, an = base_p.copy(), base_n.copy()
            ap[free] = x[nv:nv + nf]
            an[free] = x[nv + nf:]
            return ap.reshape(S, N, N), an.reshape(S, N, N)

        def objective(x):
            if train_vae:
                vae.store.set_flat(x[:nv])
            vae.store.zero_grad()
            ap, an = unpack(x)
            A = Tensor(ap - an, requires_grad=True, name="A")
            try:
                kl, rec = _elbo_terms(vae, ad.take(A, pos), Hm, eps)
            except SingularMatrixError:
                return np.inf, np.zeros_like(x)
            data = ad.sum_(ad.mul_const(ad.add(kl, rec), weights))
            alpha = ad.acyclicity(A, sch.clamp)
            pen = ad.sum_(ad.add(ad.mul_const(alpha, lam), ad.mul_const(ad.square(alpha), 0.5 * c)))
            total = ad.add(data, pen)
            ad.backward(total)
            gA = (A.grad if A.grad is not None else np.zeros((S, N, N))).ravel()[free]
            l1 = sch.l1 * (x[nv:].sum())
            gv = vae.store.flat_grad() if train_vae else np.zeros(0)
            g = np.concatenate([gv, gA + sch.l1, -gA + sch.l1])
            return float(total.value) + l1, g

        res = minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=Bounds(lb, ub),
                       options={"maxiter": sch.maxiter, "ftol": sch.ftol, "gtol": sch.gtol})
        x = res.x
        if train_vae:
            vae.store.set_flat(x[:nv])
        ap, an = unpack(x)
        A_new = ap - an
        A_new[:, ~offdiag] = 0.0
        alpha = _kernels().acyclicity_batch(A_new, sch.clamp)[0]
        for k, t in enumerate(sel):
            if not active[k]:
                continue
            st.A[t] = A_new[k]
            st.alpha[t] = alpha[k]
            st.rounds[t] += 1
            st.lam[t] = st.lam[t] + st.c[t] * alpha[k]
            if abs(alpha[k]) > sch.gamma * abs(st.prev_alpha[t]):
                st.c[t] = min(st.c[t] * sch.eta, sch.c_max)
            st.prev_alpha[t] = alpha[k]
            if alpha[k] <= sch.atol:
                st.converged[t] = True
        st.history.append((r, sel[active].copy(), st.lam[sel[active]].copy(), st.c[sel[active]].copy(),
                           alpha[active].copy()))
        logger.debug("inner round %d: max alpha %.3e, active %d", r, float(alpha.max()), int(active.sum()))

    snaps = [make_snapshot(st, int(t), sch) for t in sel]
    return InnerResult(snaps, st, sel)


def _optimize_frozen(vae: InnerVae, Hs: np.ndarray, sch: InnerSchedule, st: InnerState, t: int,
                     n_rounds: int) -> None:
    """Dual rounds for one snapshot with the VAE fixed (numpy objective)."""
    N = Hs.shape[1]
    usable = np.all(np.isfinite(Hs), axis=(1, 2))
    if not usable[t]:
        raise ValueError(f"latent column {t} is not available")
    cols = [u for u in range(max(0, t - sch.context + 1), t + 1) if usable[u]]
    Hm = Hs[cols]
    offdiag = ~np.eye(N, dtype=bool)
    for _ in range(n_rounds):
        if st.converged[t]:
            break
        r = st.round_counter
        st.round_counter += 1
        eps = np.random.default_rng([sch.seed, r if sch.resample_noise else 0]).standard_normal(Hm.shape)
        obj = FrozenObjective(vae, Hm, eps, np.full(len(cols), 1.0 / len(cols)))
        lam, c = st.lam[t], st.c[t]
        A0 = st.A[t]
        x0 = np.concatenate([np.maximum(A0, 0)[offdiag], np.maximum(-A0, 0)[offdiag]])
        nf = x0.size // 2

        def unpack(x):
            A = np.zeros((N, N))
            A[offdiag] = x[:nf] - x[nf:]
            return A

        def objective(x):
            A = unpack(x)
            data, gA = obj.data(A)
            if gA is None:
                return np.inf, np.zeros_like(x)
            alpha, galpha = _kernels().acyclicity_batch(A[None], sch.clamp)
            alpha, galpha = float(alpha[0]), galpha[0]
            g = (gA + (lam + c * alpha) * galpha)[offdiag]
            val = data + lam * alpha + 0.5 * c * alpha * alpha + sch.l1 * x.sum()
            return val, np.concatenate([g + sch.l1, -g + sch.l1])

        res = minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=Bounds(np.zeros(2 * nf), np.inf),
                       options={"maxiter": sch.maxiter, "ftol": sch.ftol, "gtol": sch.gtol})
        A_new = unpack(res.x)
        alpha = float(_kernels().acyclicity_batch(A_new[None], sch.clamp)[0][0])
        st.A[t] = A_new
        st.alpha[t] = alpha
        st.rounds[t] += 1
        st.lam[t] = lam + c * alpha
        if abs(alpha) > sch.gamma * abs(st.prev_alpha[t]):
            st.c[t] = min(c * sch.eta, sch.c_max)
        st.prev_alpha[t] = alpha
        if alpha <= sch.atol:
            st.converged[t] = True
        st.history.append((r, np.array([t]), st.lam[[t]].copy(), st.c[[t]].copy(), np.array([alpha])))


def make_snapshot(st: InnerState, t: int, sch: InnerSchedule) -> DagSnapshot:
    A = st.A[t].copy()
    alpha = acyclicity(A, sch.clamp)
    proj, removals = hard_project(A, sch.edge_threshold)
    return DagSnapshot(A, t, alpha, float(st.lam[t]), float(st.c[t]), bool(alpha > sch.atol), proj, removals,
                       int(st.rounds[t]))


# --------------------------------------------------------------------------- export


def export_snapshots(snapshots, json_path, matrix_path=None, node_ids=None, timestamps=None) -> None:
    """JSON list of per-snapshot residuals/duals plus a TTS file holding A as [N, N, T]."""
    Path(json_path).write_text(json.dumps({"schema": "tbngranger.dag_snapshots/1",
                                           "snapshots": [s.to_dict() for s in snapshots]}, indent=1))
    if matrix_path is not None and snapshots:
        N = snapshots[0].A.shape[0]
        ids = list(node_ids) if node_ids is not None else [f"v{i}" for i in range(N)]
        stamps = list(timestamps) if timestamps is not None else [s.t for s in snapshots]
        vals = np.stack([s.A for s in snapshots], axis=-1)
        tensor.save(TensorSeries(vals, ids, ids, stamps), matrix_path)


def load_snapshot_matrices(path) -> np.ndarray:
    """[N, N, T] TTS file -> [T, N, N] array (float32 precision)."""
    ts = tensor.load(path)
    return np.transpose(ts.values, (2, 0, 1))
