"""Feature autoencoder (raw features <-> latent width) and reconstruction-error anomaly scoring.

The autoencoder maps the D features of one (location, timestamp) cell to an
H_dim latent vector and back. It is fit on normal train-range cells only; an
extreme cell reconstructs poorly, so its squared reconstruction error is used
as the anomaly score (ranked, not calibrated).
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .diffkit import autodiff as ad
from .diffkit import checkpoint
from .diffkit.nn import Mlp2, ParamStore, adam_step
from .metrics import rank_auc
from .tensor import Range, TensorSeries

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``checkpoint`` holds the last finite parameters."""

    def __init__(self, message: str, checkpoint: dict):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class FeatureAutoencoder:
    store: ParamStore
    encoder: Mlp2
    decoder: Mlp2
    D: int
    H_dim: int
    val_curve: list = field(default_factory=list)
    train_curve: list = field(default_factory=list)

    @classmethod
    def create(cls, D: int, H_dim: int | None = None, hidden: int | None = None, activation: str = "tanh",
               init: str = "glorot", seed: int = 0) -> "FeatureAutoencoder":
        H_dim = D if H_dim is None else H_dim
        hidden = max(D, H_dim) if hidden is None else hidden
        rng = np.random.default_rng(seed)
        store = ParamStore()
        enc = Mlp2.create(store, "enc.", D, hidden, H_dim, rng, activation, init)
        dec = Mlp2.create(store, "dec.", H_dim, hidden, D, rng, activation, init)
        return cls(store, enc, dec, D, H_dim)

    def encode_cells(self, x: np.ndarray) -> np.ndarray:
        """(..., D) -> (..., H_dim), no gradient tracking."""
        return self.encoder.forward_np(x)

    def decode_cells(self, h: np.ndarray) -> np.ndarray:
        return self.decoder.forward_np(h)

    def reconstruct_cells(self, x: np.ndarray) -> np.ndarray:
        return self.decode_cells(self.encode_cells(x))

    def state(self) -> dict:
        return self.store.state()

    def checkpoint_bytes(self) -> bytes:
        return checkpoint.dumps(self.state())

    def digest(self) -> str:
        return hashlib.sha256(self.checkpoint_bytes()).hexdigest()[:16]

    def save(self, path) -> None:
        checkpoint.save(self.state(), path)

    def load_state(self, arrays) -> None:
        self.store.load_state(arrays)


@dataclass
class LatentSeries:
    values: np.ndarray  # [N, H_dim, T]
    source_id: str = ""
    ae_digest: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"latent values must be [N, H_dim, T], got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("latent values must be finite")

    @property
    def N(self):
        return self.values.shape[0]

    @property
    def H_dim(self):
        return self.values.shape[1]

    @property
    def T(self):
        return self.values.shape[2]

    def by_time(self) -> np.ndarray:
        """Values as [T, N, H_dim]."""
        return np.ascontiguousarray(np.transpose(self.values, (2, 0, 1)))


@dataclass
class AnomalyReport:
    scores: np.ndarray  # [N, T']
    labels: np.ndarray | None = None
    auc_roc: float | None = None
    threshold: float | None = None
    space: str = "raw"
    notes: list = field(default_factory=list)

    def decisions(self) -> np.ndarray | None:
        if self.threshold is None:
            return None
        return self.scores > self.threshold

    def confusion(self) -> dict | None:
        pred = self.decisions()
        if pred is None or self.labels is None:
            return None
        y = self.labels.astype(bool)
        return {"tp": int((pred & y).sum()), "fp": int((pred & ~y).sum()),
                "tn": int((~pred & ~y).sum()), "fn": int((~pred & y).sum())}

    def to_dict(self, include_scores: bool = False) -> dict:
        d = {
            "schema": "tbngranger.anomaly_report/1",
            "space": self.space,
            "shape": list(self.scores.shape),
            "auc_roc": self.auc_roc,
            "auc_defined": self.auc_roc is not None,
            "threshold": self.threshold,
            "confusion": self.confusion(),
            "notes": list(self.notes),
        }
        if include_scores:
            d["scores"] = self.scores.tolist()
        return d


def _cells(values: np.ndarray, ranges) -> np.ndarray:
    """[N, D, T] restricted to ``ranges`` -> [cells, D]."""
    if ranges is not None:
        if not ranges:
            return np.zeros((0, values.shape[1]))
        idx = np.concatenate([np.arange(a, b) for a, b in ranges])
        values = values[:, :, idx]
    return np.transpose(values, (0, 2, 1)).reshape(-1, values.shape[1])


def _mse(ae: FeatureAutoencoder, cells: np.ndarray) -> float:
    if cells.shape[0] == 0:
        return float("nan")
    return float(np.mean((ae.reconstruct_cells(cells) - cells) ** 2))


def pretrain(ts: TensorSeries, train_ranges: list[Range] | None = None,
             validation_ranges: list[Range] | None = None, H_dim: int | None = None,
             epochs: int = 200, lr: float = 1e-2, seed: int = 0, hidden: int | None = None,
             activation: str = "tanh", init: str = "glorot", batch_size: int | None = None,
             ae: FeatureAutoencoder | None = None) -> FeatureAutoencoder:
    """Fit the autoencoder on train-range cells with MSE and Adam.

    Only the train (and, for the curve, validation) ranges are sliced out of
    ``ts``; nothing else is read. ``val_curve[e]`` is the validation MSE after
    epoch e (``val_curve[0]`` is at initialization).
    """
    train = _cells(ts.values, train_ranges)
    val = _cells(ts.values, validation_ranges) if validation_ranges else np.zeros((0, ts.D))
    return pretrain_cells(train, val, H_dim, epochs, lr, seed, hidden, activation, init, batch_size, ae)


def pretrain_cells(train: np.ndarray, val: np.ndarray, H_dim: int | None = None, epochs: int = 200,
                   lr: float = 1e-2, seed: int = 0, hidden: int | None = None, activation: str = "tanh",
                   init: str = "glorot", batch_size: int | None = None,
                   ae: FeatureAutoencoder | None = None) -> FeatureAutoencoder:
    """:func:`pretrain` on explicit [cells, D] train/validation matrices."""
    if ae is None:
        ae = FeatureAutoencoder.create(train.shape[1], H_dim, hidden, activation, init, seed)
    rng = np.random.default_rng(seed + 1)
    bs = train.shape[0] if not batch_size else min(batch_size, train.shape[0])
    ae.train_curve = [_mse(ae, train)]
    ae.val_curve = [_mse(ae, val)]
    good = ae.store.state()
    for epoch in range(epochs):
        order = rng.permutation(train.shape[0]) if bs < train.shape[0] else np.arange(train.shape[0])
        for s in range(0, train.shape[0], bs):
            batch = train[order[s:s + bs]]
            ae.store.zero_grad()
            x = ad.const(batch)
            rec = ae.decoder(ae.encoder(x))
            loss = ad.mean(ad.square(ad.sub(rec, x)))
            if not np.isfinite(loss.value):
                ae.store.load_state(good)
                raise DivergenceError(f"autoencoder loss became non-finite at epoch {epoch}", good)
            ad.backward(loss)
            adam_step(ae.store, lr)
        tr = _mse(ae, train)
        if not np.isfinite(tr):
            ae.store.load_state(good)
            raise DivergenceError(f"autoencoder loss became non-finite at epoch {epoch}", good)
        good = ae.store.state()
        ae.train_curve.append(tr)
        ae.val_curve.append(_mse(ae, val))
    return ae


def encode(ae: FeatureAutoencoder, ts: TensorSeries, source_id: str = "") -> LatentSeries:
    if ts.D != ae.D:
        raise ValueError(f"series has D={ts.D}, autoencoder expects D={ae.D}")
    x = np.transpose(ts.values, (0, 2, 1))
    h = ae.encode_cells(x)
    return LatentSeries(np.transpose(h, (0, 2, 1)), source_id, ae.digest())


def decode(ae: FeatureAutoencoder, latent: LatentSeries, like: TensorSeries | None = None) -> TensorSeries:
    if latent.H_dim != ae.H_dim:
        raise ValueError(f"latent has H_dim={latent.H_dim}, autoencoder expects {ae.H_dim}")
    x = np.transpose(ae.decode_cells(np.transpose(latent.values, (0, 2, 1))), (0, 2, 1))
    if like is not None:
        if like.N != latent.N or like.T != latent.T:
            raise ValueError("template series does not match latent shape")
        return like.with_values(x)
    return TensorSeries.from_array(x)


def cell_scores(ae: FeatureAutoencoder, series, space: str = "raw") -> np.ndarray:
    """Per (location, timestamp) mean squared reconstruction error -> [N, T]."""
    if space == "raw":
        if isinstance(series, LatentSeries):
            x = np.transpose(ae.decode_cells(np.transpose(series.values, (0, 2, 1))), (0, 2, 1))
        else:
            x = series.values
        x = np.transpose(x, (0, 2, 1))
        return np.mean((ae.reconstruct_cells(x) - x) ** 2, axis=-1)
    if space == "latent":
        if isinstance(series, LatentSeries):
            h = np.transpose(series.values, (0, 2, 1))
        else:
            h = ae.encode_cells(np.transpose(series.values, (0, 2, 1)))
        return np.mean((ae.encode_cells(ae.decode_cells(h)) - h) ** 2, axis=-1)
    raise ValueError(f"unknown scoring space {space!r}")


def fit_threshold(normal_scores, q: float = 0.995) -> float:
    return float(np.quantile(np.asarray(normal_scores, dtype=np.float64).ravel(), q))


def score_anomalies(ae: FeatureAutoencoder, series, labels=None, threshold: float | None = None,
                    space: str = "raw") -> AnomalyReport:
    scores = cell_scores(ae, series, space)
    rep = AnomalyReport(scores, None, None, threshold, space)
    if labels is not None:
        y = np.asarray(labels).astype(np.int64)
        if y.shape != scores.shape:
            raise ValueError(f"labels {y.shape} not aligned with scores {scores.shape}")
        rep.labels = y
        rep.auc_roc = rank_auc(scores, y)
        if rep.auc_roc is None:
            rep.notes.append("labels are all one class; AUC-ROC undefined")
    return rep


def read_labels_csv(path, location_ids, timestamps) -> np.ndarray:
    """Label CSV rows ``location_id,timestamp,label`` -> [N, T] 0/1 grid (missing = 0)."""
    import csv

    loc = {l: i for i, l in enumerate(location_ids)}
    tix = {int(t): k for k, t in enumerate(timestamps)}
    grid = np.zeros((len(location_ids), len(timestamps)), dtype=np.int64)
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "location_id":
                continue
            l, t, v = row[0].strip(), int(row[1]), int(row[2])
            if l not in loc or t not in tix:
                raise ValueError(f"label ({l}, {t}) is not on the series grid")
            grid[loc[l], tix[t]] = v
    return grid


def write_labels_csv(path, labels, location_ids, timestamps) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["location_id", "timestamp", "label"])
        for i, l in enumerate(location_ids):
            for k, t in enumerate(timestamps):
                w.writerow([l, int(t), int(labels[i, k])])
