"""Graph-recurrent Granger forecaster over per-timestamp adjacencies.

Every gate of the recurrent cell mixes its input over the graph with a
diffusion polynomial

    W *A X = sum_k  (P_f^k X) theta[k, 1] + (P_b^k X) theta[k, 2]

where ``P_f = D_out^{-1} A`` and ``P_b = D_in^{-1} A^T`` (rows without edges
map to zero rows). ``A[j, i]`` is the probability of edge j -> i. Encoder and
decoder cells have their own gate parameters; the decoder starts from the last
observed latent step and reuses the last input adjacency.

Adjacency probabilities come from a binary edge/no-edge Gumbel-softmax of
logits ``A_inner[t] + offset[t] + summary``: ``offset`` refines each
timestamp's instantaneous graph and ``summary`` is a lag-level graph shared by
all timestamps.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffkit import autodiff as ad
from .diffkit import checkpoint
from .diffkit.autodiff import Tensor
from .diffkit.nn import ParamStore, adam_step
from .inner import find_cycle

logger = logging.getLogger(__name__)

GATES = ("R", "U", "C")
CELLS = ("enc", "dec")


@dataclass
class OuterConfig:
    K: int = 2
    L: int = 24
    tau: int = 24
    hidden: int = 64
    xi: float = 0.5
    candidate: str = "tanh"  # or "identity"
    softmax: str = "binary"  # or "row"
    lr: float = 1e-2
    epochs: int = 20
    batch_size: int = 64
    stride: int = 1
    learn_adjacency: bool = True
    summary_graph: bool = True
    edge_threshold: float = 0.3
    adj_l1: float = 0.1  # weight of the mean edge probability added to the loss
    adj_lr_scale: float = 5.0  # learning-rate multiplier for adjacency refinements
    seed: int = 0

    def __post_init__(self):
        if self.K < 0 or self.L < 1 or self.tau < 0 or self.hidden < 1:
            raise ValueError("need K >= 0, L >= 1, tau >= 0, hidden >= 1")
        if not self.xi > 0:
            raise ValueError("xi must be positive")

    def to_dict(self):
        return asdict(self)


class GrangerModel:
    """Gate parameters ``{cell}.{gate}.theta{k}_{1|2}`` of shape [H_dim + hidden, hidden],
    biases ``{cell}.{gate}.b``, output head ``out.W``/``out.b`` and, once attached,
    adjacency refinements ``adj.offset`` [T, N, N] and ``adj.summary`` [N, N]."""

    def __init__(self, H_dim: int, cfg: OuterConfig, seed: int | None = None):
        self.H_dim = H_dim
        self.cfg = cfg
        self.K, self.L, self.hidden = cfg.K, cfg.L, cfg.hidden
        self.store = ParamStore()
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        F = H_dim + cfg.hidden
        n_terms = 2 * (cfg.K + 1)
        bound = np.sqrt(6.0 / (F * n_terms + cfg.hidden))
        for cell in CELLS:
            for gate in GATES:
                for k in range(cfg.K + 1):
                    for d in (1, 2):
                        self.store.add(f"{cell}.{gate}.theta{k}_{d}", rng.uniform(-bound, bound, (F, cfg.hidden)))
                self.store.add(f"{cell}.{gate}.b", np.full(cfg.hidden, 0.0 if gate == "C" else 1.0))
        b = np.sqrt(6.0 / (cfg.hidden + H_dim))
        self.store.add("out.W", rng.uniform(-b, b, (cfg.hidden, H_dim)))
        self.store.add("out.b", np.zeros(H_dim))
        self.has_adjacency = False

    def attach_adjacency(self, T: int, N: int) -> None:
        if self.has_adjacency:
            return
        self.store.add("adj.offset", np.zeros((T, N, N)))
        self.store.add("adj.summary", np.zeros((N, N)))
        self.has_adjacency = True

    def gate_weight(self, cell: str, gate: str) -> Tensor:
        """Stacked ``[theta0_1; theta0_2; theta1_1; theta1_2; ...]`` matching :func:`diffuse`."""
        parts = [self.store[f"{cell}.{gate}.theta{k}_{d}"] for k in range(self.K + 1) for d in (1, 2)]
        return ad.concat(parts, axis=0)

    def thetas(self, cell: str, gate: str) -> list[np.ndarray]:
        return [self.store[f"{cell}.{gate}.theta{k}_{d}"].value for k in range(self.K + 1) for d in (1, 2)]

    def state(self):
        return self.store.state()

    def checkpoint_bytes(self) -> bytes:
        return checkpoint.dumps(self.state())

    def save(self, path) -> None:
        checkpoint.save(self.state(), path)

    def load_state(self, arrays, strict: bool = True) -> None:
        if "adj.offset" in arrays and not self.has_adjacency:
            off = np.asarray(arrays["adj.offset"])
            N = off.shape[-1]
            self.attach_adjacency(off.size // (N * N), N)
        self.store.load_state(arrays, strict=strict)


# --------------------------------------------------------------------------- graph operators


def transition_matrices(A, canonical: bool = False):
    """``(P_f, P_b) = (D_out^{-1} A, D_in^{-1} A^T)`` for A of shape [B, N, N]."""
    A = ad.const(A)
    return ad.row_normalize(A, canonical), ad.row_normalize(ad.transpose(A), canonical)


def diffuse(Pf, Pb, X, K: int, canonical: bool = False) -> Tensor:
    """``[X, X, P_f X, P_b X, ..., P_f^K X, P_b^K X]`` stacked on the feature axis."""
    X = ad.const(X)
    parts = [X, X]
    xf = xb = X
    for _ in range(K):
        xf = ad.bmm(Pf, xf, canonical)
        xb = ad.bmm(Pb, xb, canonical)
        parts += [xf, xb]
    return ad.concat(parts, axis=-1)


def diffusion_weights(A, X, thetas, K: int, bias=None, canonical: bool = False) -> Tensor:
    """Apply ``sum_k (P_f^k X) theta[k][0] + (P_b^k X) theta[k][1] (+ bias)``.

    ``thetas`` is a list of K+1 pairs ``(theta_k1, theta_k2)``; A is [B, N, N]
    and X is [B, N, F].
    """
    A, X = ad.const(A), ad.const(X)
    if A.value.ndim == 2:
        A = ad.reshape(A, (1,) + A.value.shape)
        X = ad.reshape(X, (1,) + X.value.shape)
        single = True
    else:
        single = False
    if len(thetas) != K + 1:
        raise ValueError(f"need {K + 1} theta pairs, got {len(thetas)}")
    Pf, Pb = transition_matrices(A, canonical)
    W = ad.concat([ad.const(t) for pair in thetas for t in pair], axis=0)
    out = ad.linear(diffuse(Pf, Pb, X, K, canonical), W, canonical)
    if bias is not None:
        out = ad.add_bias(out, bias)
    return ad.reshape(out, out.value.shape[1:]) if single else out


def _cell_step(model: GrangerModel, weights: dict, cell: str, Pf, Pb, H_in, S_prev, canonical=False,
               override=None) -> Tensor:
    K = model.K
    s = model.store
    X = ad.concat([H_in, S_prev], axis=-1)
    Xd = diffuse(Pf, Pb, X, K, canonical)
    override = override or {}

    def gate(name, inp, act):
        if name in override:
            return Tensor(np.full(S_prev.value.shape, float(override[name])))
        return act(ad.add_bias(ad.linear(inp, weights[cell, name], canonical), s[f"{cell}.{name}.b"]))

    R = gate("R", Xd, ad.sigmoid)
    U = gate("U", Xd, ad.sigmoid)
    X2 = ad.concat([H_in, ad.mul(R, S_prev)], axis=-1)
    cand = ad.tanh if model.cfg.candidate == "tanh" else ad.identity
    C = gate("C", diffuse(Pf, Pb, X2, K, canonical), cand)
    one_minus_u = ad.shift(ad.neg(U), 1.0)
    return ad.add(ad.mul(U, S_prev), ad.mul(one_minus_u, C))


def _weights(model: GrangerModel) -> dict:
    return {(c, g): model.gate_weight(c, g) for c in CELLS for g in GATES}


def gru_cell(model: GrangerModel, A_t, H_t, S_prev, cell: str = "enc", canonical: bool = False,
             override: dict | None = None) -> Tensor:
    """One recurrent step: R, U and C gates diffuse over ``A_t`` and
    ``S_t = U * S_prev + (1 - U) * C``. ``override`` pins gates to constants."""
    A_t, H_t, S_prev = ad.const(A_t), ad.const(H_t), ad.const(S_prev)
    single = A_t.value.ndim == 2
    if single:
        A_t = ad.reshape(A_t, (1,) + A_t.value.shape)
        H_t = ad.reshape(H_t, (1,) + H_t.value.shape)
        S_prev = ad.reshape(S_prev, (1,) + S_prev.value.shape)
    Pf, Pb = transition_matrices(A_t, canonical)
    S = _cell_step(model, _weights(model), cell, Pf, Pb, H_t, S_prev, canonical, override)
    return ad.reshape(S, S.value.shape[1:]) if single else S


# --------------------------------------------------------------------------- refinement


def gumbel_edge_probs(logits, xi: float, rng: np.random.Generator | None = None, mode: str = "binary") -> Tensor:
    """Edge probabilities from adjacency logits [..., N, N] with a zeroed diagonal.

    ``binary``: softmax over the pair (edge = logit, no-edge = 0), each with
    its own Gumbel(0, 1) draw, which equals ``sigmoid((logit + g1 - g2) / xi)``.
    ``row``: softmax over each row. ``rng=None`` gives the noise-free value.
    """
    logits = ad.const(logits)
    shape = logits.value.shape
    N = shape[-1]
    mask = np.broadcast_to(1.0 - np.eye(N), shape).copy()
    if mode == "binary":
        z = logits
        if rng is not None:
            g = rng.gumbel(size=shape) - rng.gumbel(size=shape)
            z = ad.add(z, ad.const(g))
        p = ad.sigmoid(ad.scale(z, 1.0 / xi))
    elif mode == "row":
        z = logits
        if rng is not None:
            z = ad.add(z, ad.const(rng.gumbel(size=shape)))
        p = ad.softmax_last(ad.add(ad.scale(z, 1.0 / xi), ad.const((mask - 1.0) * 1e9)))
    else:
        raise ValueError(f"unknown refinement mode {mode!r}")
    return ad.mul_const(p, mask)


@dataclass
class RefinedAdjacency:
    A_outer: np.ndarray
    source_t: int | None
    gumbel_seed: int | None


def refine_adjacency(A_inner, xi: float, seed: int | None = None, mode: str = "binary",
                     source_t: int | None = None) -> RefinedAdjacency:
    """Gumbel-softmax edge probabilities of one inner adjacency (``seed=None``: no noise)."""
    if not xi > 0:
        raise ValueError("xi must be positive")
    rng = None if seed is None else np.random.default_rng(seed)
    p = gumbel_edge_probs(np.asarray(A_inner, dtype=np.float64), xi, rng, mode)
    return RefinedAdjacency(p.value, source_t, seed)


# --------------------------------------------------------------------------- sequence model


def _seq2seq(model: GrangerModel, adjs: list, H, tau: int, canonical: bool = False) -> Tensor:
    """Encoder over L (adjacency, latent) steps, then ``tau`` autoregressive decoder steps.

    ``adjs``: L edge-probability tensors [B, N, N]; ``H``: [B, L, N, H_dim].
    Returns [B, tau, N, H_dim].
    """
    H = ad.const(H)
    B, L, N, Hd = H.value.shape
    if len(adjs) != L or L != model.L:
        raise ValueError(f"model lag is {model.L}; got {L} latent steps and {len(adjs)} adjacencies")
    w = _weights(model)
    S = Tensor(np.zeros((B, N, model.hidden)))
    P = None
    for l in range(L):
        P = transition_matrices(adjs[l], canonical)
        S = _cell_step(model, w, "enc", P[0], P[1], ad.select(H, (slice(None), l)), S, canonical)
    outs = []
    x = ad.select(H, (slice(None), L - 1))
    for _ in range(tau):
        S = _cell_step(model, w, "dec", P[0], P[1], x, S, canonical)
        x = ad.add_bias(ad.linear(S, model.store["out.W"], canonical), model.store["out.b"])
        outs.append(x)
    if not outs:
        return Tensor(np.zeros((B, 0, N, Hd)))
    return ad.stack(outs, axis=1)


def forecast(model: GrangerModel, adjacencies, H, tau: int, canonical: bool = True) -> np.ndarray:
    """Forecast ``tau`` latent steps from L ordered (adjacency, latent) input pairs.

    ``adjacencies`` [B, L, N, N] are refined edge probabilities (or [L, N, N]);
    ``H`` is [B, L, N, H_dim] (or unbatched). With ``canonical=True`` every
    reduction over nodes runs in a label-independent order, so permuting the
    variables permutes the forecast exactly.
    """
    adjacencies = np.asarray(adjacencies, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    single = H.ndim == 3
    if single:
        adjacencies, H = adjacencies[None], H[None]
    if H.shape[1] != model.L or adjacencies.shape[1] != model.L:
        raise ValueError(f"forecast needs exactly L={model.L} input steps, got {H.shape[1]}")
    adjs = [Tensor(np.ascontiguousarray(adjacencies[:, l])) for l in range(model.L)]
    out = _seq2seq(model, adjs, H, tau, canonical).value
    return out[0] if single else out


def mae_loss(pred, target) -> Tensor:
    """Mean absolute error over all cells."""
    return ad.mean(ad.abs_(ad.sub(pred, ad.const(target))))


# --------------------------------------------------------------------------- training


@dataclass
class OuterResult:
    train_curve: list
    val_curve: list
    probs: np.ndarray  # [T, N, N] noise-free edge probabilities
    fine_tuned: np.ndarray  # [T, N, N] inner A + per-timestamp offset
    cyclic: list
    best_epoch: int
    skipped: list = field(default_factory=list)


def adjacency_logits(model: GrangerModel, inner_A: np.ndarray, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    z = ad.const(inner_A[idx])
    if model.has_adjacency and model.cfg.learn_adjacency:
        z = ad.add(z, ad.take(model.store["adj.offset"], idx))
        if model.cfg.summary_graph:
            z = ad.add(z, ad.take(ad.reshape(model.store["adj.summary"], (1,) + inner_A.shape[1:]),
                                  np.zeros(idx.size, dtype=np.int64)))
    return z


def eval_probs(model: GrangerModel, inner_A: np.ndarray, idx=None) -> np.ndarray:
    idx = np.arange(inner_A.shape[0]) if idx is None else idx
    return gumbel_edge_probs(adjacency_logits(model, inner_A, idx).value, model.cfg.xi, None,
                             model.cfg.softmax).value


def fine_tuned_adjacency(model: GrangerModel, inner_A: np.ndarray) -> np.ndarray:
    out = np.array(inner_A, dtype=np.float64)
    if model.has_adjacency and model.cfg.learn_adjacency:
        out = out + model.store["adj.offset"].value
    return out


def cyclic_timestamps(A: np.ndarray, threshold: float) -> list[int]:
    bad = []
    for t in range(A.shape[0]):
        g = np.abs(A[t]) >= threshold
        np.fill_diagonal(g, False)
        if find_cycle(g) is not None:
            bad.append(t)
    return bad


def window_mae(model: GrangerModel, latent: np.ndarray, inner_A: np.ndarray, starts, tau: int | None = None,
               batch: int = 256) -> float:
    """Noise-free MAE over the windows starting at ``starts``."""
    tau = model.cfg.tau if tau is None else tau
    starts = np.asarray(starts, dtype=np.int64)
    if starts.size == 0:
        return float("nan")
    total, count = 0.0, 0
    for b in range(0, starts.size, batch):
        s = starts[b:b + batch]
        pred = predict_windows(model, latent, inner_A, s, tau, canonical=False)
        tgt = np.stack([latent[x + model.L:x + model.L + tau] for x in s])
        total += np.abs(pred - tgt).sum()
        count += pred.size
    return float(total / count)


def predict_windows(model: GrangerModel, latent: np.ndarray, inner_A: np.ndarray, starts, tau: int | None = None,
                    canonical: bool = False) -> np.ndarray:
    """Forecasts [B, tau, N, H_dim] for windows whose inputs are ``latent[s:s+L]``."""
    tau = model.cfg.tau if tau is None else tau
    starts = np.asarray(starts, dtype=np.int64)
    L = model.L
    idx = starts[:, None] + np.arange(L)[None]
    probs = eval_probs(model, inner_A, idx.ravel()).reshape(starts.size, L, *inner_A.shape[1:])
    H = latent[idx]
    return forecast(model, probs, H, tau, canonical)


def train_outer(model: GrangerModel, latent, inner_A, train_starts, val_starts=(), epochs: int | None = None,
                lr: float | None = None, seed: int | None = None) -> OuterResult:
    """Minimize window MAE over gate parameters and adjacency refinements with Adam.

    ``latent`` is time-major [T, N, H_dim]; ``inner_A`` the inner adjacencies
    [T, N, N]. Training windows draw fresh Gumbel noise from a seeded stream;
    validation uses noise-free probabilities. The parameters with the lowest
    validation MAE are restored at the end.
    """
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    lr = cfg.lr if lr is None else lr
    seed = cfg.seed if seed is None else seed
    latent = np.asarray(latent, dtype=np.float64)
    inner_A = np.asarray(inner_A, dtype=np.float64)
    T, N, Hd = latent.shape
    model.attach_adjacency(T, N)
    train_starts = np.asarray(train_starts, dtype=np.int64)
    val_starts = np.asarray(val_starts, dtype=np.int64)
    rng = np.random.default_rng([seed, 1])
    L, tau = model.L, cfg.tau
    train_curve = [window_mae(model, latent, inner_A, train_starts)]
    val_curve = [window_mae(model, latent, inner_A, val_starts)] if val_starts.size else []
    best = (val_curve[0] if val_curve else np.inf, 0, model.store.state())
    skipped = []
    bs = max(1, min(cfg.batch_size, train_starts.size))
    for epoch in range(1, epochs + 1):
        order = train_starts[rng.permutation(train_starts.size)]
        for b in range(0, order.size, bs):
            s = order[b:b + bs]
            model.store.zero_grad()
            adjs = []
            for l in range(L):
                z = adjacency_logits(model, inner_A, s + l)
                adjs.append(gumbel_edge_probs(z, cfg.xi, rng, cfg.softmax))
            H = latent[s[:, None] + np.arange(L)[None]]
            tgt = latent[s[:, None] + L + np.arange(tau)[None]]
            loss = mae_loss(_seq2seq(model, adjs, H, tau), tgt)
            if cfg.adj_l1 and cfg.learn_adjacency:
                loss = ad.add(loss, ad.scale(ad.mean(ad.stack(adjs)), cfg.adj_l1))
            if not np.isfinite(loss.value):
                model.store.load_state(best[2])
                from .anomaly import DivergenceError
                raise DivergenceError(f"outer loss became non-finite at epoch {epoch}", best[2])
            ad.backward(loss)
            skipped += adam_step(model.store, lr, lr_scale={"adj.": cfg.adj_lr_scale})
        train_curve.append(window_mae(model, latent, inner_A, train_starts))
        if val_starts.size:
            v = window_mae(model, latent, inner_A, val_starts)
            val_curve.append(v)
            if v < best[0]:
                best = (v, epoch, model.store.state())
        else:
            best = (np.inf, epoch, model.store.state())
    model.store.load_state(best[2])
    ft = fine_tuned_adjacency(model, inner_A)
    return OuterResult(train_curve, val_curve, eval_probs(model, inner_A), ft,
                       cyclic_timestamps(ft, cfg.edge_threshold), best[1], sorted(set(skipped)))


# --------------------------------------------------------------------------- Granger causes


def granger_scores(model: GrangerModel, adjacencies) -> np.ndarray:
    """``score[j, i]``: Frobenius norm of the effective gate operator block that
    carries variable j into variable i, averaged over gates and adjacencies."""
    adjacencies = np.asarray(adjacencies, dtype=np.float64)
    if adjacencies.ndim == 2:
        adjacencies = adjacencies[None]
    T, N, _ = adjacencies.shape
    K = model.K
    Pf, Pb = (x.value for x in transition_matrices(adjacencies))
    # coef[m, t, i, j] for terms m = (k, direction) in the stacked order
    coef = np.zeros((2 * (K + 1), T, N, N))
    coef[0] = coef[1] = np.eye(N)
    pf = pb = np.broadcast_to(np.eye(N), (T, N, N))
    for k in range(1, K + 1):
        pf = pf @ Pf
        pb = pb @ Pb
        coef[2 * k], coef[2 * k + 1] = pf, pb
    total = np.zeros((T, N, N))
    n = 0
    for cell in CELLS:
        for gate in GATES:
            th = np.stack([t.ravel() for t in model.thetas(cell, gate)])
            G = th @ th.T
            q = np.einsum("mtij,mn,ntij->tij", coef, G, coef)
            total += np.sqrt(np.maximum(q, 0.0))
            n += 1
    return (total / n).mean(axis=0).T


def extract_granger_causes(model: GrangerModel, adjacencies, tolerance: float):
    """Binary ``causes[j, i]`` (j Granger-causes i) where the score reaches ``tolerance``.

    Returns ``(causes, scores)``.
    """
    scores = granger_scores(model, adjacencies)
    return (scores >= tolerance).astype(np.int64), scores
