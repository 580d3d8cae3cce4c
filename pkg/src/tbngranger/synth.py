"""Synthetic tensor series with known causal structure: Lorenz-96 and linear VAR."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .tensor import TensorSeries

BLOWUP = 1e6


class SimulationError(RuntimeError):
    pass


@dataclass
class GroundTruthGraph:
    """Binary parent matrix: ``adjacency[j, i] == 1`` iff j is a causal parent of i."""

    adjacency: np.ndarray
    self_edges: bool = False

    def __post_init__(self):
        a = np.asarray(self.adjacency)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {a.shape}")
        if not np.isin(a, (0, 1)).all():
            raise ValueError("adjacency must be 0/1")
        self.adjacency = a.astype(np.int64)

    @property
    def P(self) -> int:
        return self.adjacency.shape[0]

    def to_json(self) -> str:
        return json.dumps({
            "convention": "adjacency[j][i] = 1 iff variable j is a causal parent of variable i",
            "self_edges": bool(self.self_edges),
            "adjacency": self.adjacency.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "GroundTruthGraph":
        d = json.loads(text)
        if isinstance(d, list):  # bare matrix
            return cls(np.asarray(d), bool(np.trace(np.asarray(d))))
        return cls(np.asarray(d["adjacency"]), bool(d.get("self_edges", False)))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "GroundTruthGraph":
        return cls.from_json(Path(path).read_text())


# --------------------------------------------------------------------------- Lorenz-96


@dataclass
class Lorenz96Config:
    P: int = 10
    T: int = 500
    F: float = 10.0
    dt: float = 0.01
    seed: int = 0
    noise_std: float = 0.0
    substeps: int = 1  # RK4 steps per recorded observation
    burn_in: int = 0  # RK4 steps discarded before the first observation
    init: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.P < 4:
            raise ValueError("Lorenz-96 needs P >= 4 for wrap-around indexing")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.T < 1 or self.substeps < 1 or self.burn_in < 0:
            raise ValueError("T and substeps must be >= 1, burn_in >= 0")


def lorenz96_truth(P: int) -> GroundTruthGraph:
    adj = np.zeros((P, P), dtype=np.int64)
    for i in range(P):
        for off in (-2, -1, 0, 1):
            adj[(i + off) % P, i] = 1
    return GroundTruthGraph(adj, self_edges=True)


def lorenz96_derivative(x: np.ndarray, forcing: float) -> np.ndarray:
    return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + forcing


def simulate_lorenz96(cfg: Lorenz96Config) -> tuple[TensorSeries, GroundTruthGraph]:
    rng = np.random.default_rng(cfg.seed)
    if cfg.init is not None:
        x0 = np.asarray(cfg.init, dtype=np.float64).copy()
        if x0.shape != (cfg.P,):
            raise ValueError(f"init must have shape ({cfg.P},)")
    else:
        x0 = cfg.F + rng.normal(0.0, 0.01, size=cfg.P)
    if cfg.burn_in:
        traj, failed = kernels.lorenz96_rk4(x0, cfg.F, cfg.dt, 2, cfg.burn_in, BLOWUP)
        if failed >= 0:
            raise SimulationError(f"Lorenz-96 diverged during burn-in (|x| > {BLOWUP:g}); try a smaller dt")
        x0 = traj[-1]
    traj, failed = kernels.lorenz96_rk4(x0, cfg.F, cfg.dt, cfg.T, cfg.substeps, BLOWUP)
    if failed >= 0:
        raise SimulationError(
            f"Lorenz-96 diverged at observation {failed} (|x| > {BLOWUP:g}); try a smaller dt (now {cfg.dt})"
        )
    if cfg.noise_std > 0:
        traj = traj + rng.normal(0.0, cfg.noise_std, size=traj.shape)
    values = traj.T[:, None, :]
    ts = TensorSeries.from_array(values, [f"x{i}" for i in range(cfg.P)], ["x"])
    return ts, lorenz96_truth(cfg.P)


# --------------------------------------------------------------------------- VAR


def companion_radius(coefs: np.ndarray) -> float:
    """Spectral radius of the VAR companion matrix for ``coefs[l-1] = W^(l)``."""
    coefs = np.asarray(coefs, dtype=np.float64)
    lag, P, _ = coefs.shape
    comp = np.zeros((lag * P, lag * P))
    comp[:P, :] = np.concatenate(list(coefs), axis=1)
    if lag > 1:
        comp[P:, :-P] = np.eye((lag - 1) * P)
    return float(np.max(np.abs(np.linalg.eigvals(comp))))


def var_truth(coefs: np.ndarray) -> GroundTruthGraph:
    # H_i(t) depends on H_j(t-l) through W^(l)[i, j]; parents are laid out [j, i]
    nz = (np.abs(np.asarray(coefs)).sum(axis=0) != 0).T.astype(np.int64)
    return GroundTruthGraph(nz, self_edges=bool(np.trace(nz)))


def _support_has_cycle(coefs: np.ndarray) -> bool:
    """True when the companion matrix's nonzero pattern contains a directed cycle."""
    lag, P, _ = coefs.shape
    n = lag * P
    S = np.zeros((n, n), dtype=bool)
    S[:P, :] = np.concatenate(list(coefs), axis=1) != 0
    if lag > 1:
        S[P:, :-P] = np.eye((lag - 1) * P, dtype=bool)
    reach = S.copy()
    for _ in range(n):
        if reach.diagonal().any():
            return True
        nxt = (reach.astype(np.int64) @ S.astype(np.int64)) > 0
        if not nxt.any():
            return False
        reach = nxt
    return bool(reach.diagonal().any())


def random_var_coefficients(P: int, lag: int = 1, density: float = 0.2, radius: float = 0.9,
                            seed: int = 0, self_weight: float = 0.0) -> np.ndarray:
    """Sparse random VAR(lag) coefficients rescaled to a target companion radius.

    A draw whose companion matrix is nilpotent (radius 0 at every scale, e.g. an
    acyclic lag-1 graph) cannot be rescaled, so it is redrawn from the same stream.
    """
    rng = np.random.default_rng(seed)
    for _ in range(100):
        coefs = np.zeros((lag, P, P))
        for l in range(lag):
            mask = rng.random((P, P)) < density
            np.fill_diagonal(mask, False)
            signs = rng.choice([-1.0, 1.0], size=(P, P))
            coefs[l] = mask * signs * rng.uniform(0.5, 1.0, size=(P, P))
            if self_weight:
                coefs[l] += np.eye(P) * self_weight / lag
        if _support_has_cycle(coefs):
            break
    else:
        raise ValueError(f"density {density} too low: 100 draws gave no edges or only nilpotent graphs")
    lo, hi = 0.0, 1.0
    while companion_radius(coefs * hi) < radius:
        hi *= 2.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if companion_radius(coefs * mid) < radius:
            lo = mid
        else:
            hi = mid
    return coefs * lo


def simulate_var(P: int, T: int, lag: int, coefs, noise_std: float = 1.0, seed: int = 0,
                 init=None, burn_in: int = 0) -> tuple[TensorSeries, GroundTruthGraph]:
    """Simulate ``H(t) = sum_l W^(l) H(t-l) + e(t)`` with Gaussian ``e``.

    ``coefs`` has shape (lag, P, P) (a single P x P matrix is accepted for
    lag 1). Explosive systems (companion radius > 1) are rejected; a unit
    root only warns.
    """
    coefs = np.asarray(coefs, dtype=np.float64)
    if coefs.ndim == 2:
        coefs = coefs[None]
    if coefs.shape != (lag, P, P):
        raise ValueError(f"coefs must have shape ({lag}, {P}, {P}), got {coefs.shape}")
    radius = companion_radius(coefs)
    if radius > 1.0 + 1e-12:
        raise SimulationError(f"unstable VAR: companion spectral radius {radius:.6g} exceeds 1")
    if radius > 1.0 - 1e-12:
        warnings.warn(f"VAR has a unit root (radius {radius:.6g}); series is not stationary", stacklevel=2)
    rng = np.random.default_rng(seed)
    total = T + burn_in
    if init is None:
        init = rng.normal(0.0, 1.0, size=(lag, P))
    else:
        init = np.asarray(init, dtype=np.float64).reshape(-1, P)
        if init.shape[0] < lag:
            init = np.concatenate([np.zeros((lag - init.shape[0], P)), init])
    noise = rng.normal(0.0, noise_std, size=(total, P)) if noise_std > 0 else np.zeros((total, P))
    h = kernels.var_simulate(coefs, init, noise)[burn_in:]
    ts = TensorSeries.from_array(h.T[:, None, :], [f"v{i}" for i in range(P)], ["h"])
    return ts, var_truth(coefs)


# --------------------------------------------------------------------------- anomalies


def inject_extremes(ts: TensorSeries, rate: float = 0.0045, magnitude: float = 6.0, seed: int = 0,
                    time_range: tuple[int, int] | None = None, scale: np.ndarray | None = None):
    """Add +/- ``magnitude`` standard-deviation spikes to a fraction ``rate`` of cells.

    Each selected (location, time) cell gets a spike on one random feature.
    Returns the perturbed series and the (N, T) 0/1 label grid.
    """
    rng = np.random.default_rng(seed)
    N, D, T = ts.shape
    a, b = time_range if time_range is not None else (0, T)
    if scale is None:
        scale = ts.values.std(axis=(0, 2))
    labels = np.zeros((N, T), dtype=np.int64)
    n_cells = N * (b - a)
    k = max(1, int(round(rate * n_cells)))
    picks = rng.choice(n_cells, size=k, replace=False)
    values = ts.values.copy()
    for p in picks:
        i, t = divmod(int(p), b - a)
        t += a
        d = rng.integers(D)
        values[i, d, t] += rng.choice([-1.0, 1.0]) * magnitude * scale[d]
        labels[i, t] = 1
    return ts.with_values(values), labels
