"""Structure and forecast metrics, persistence/VAR baselines, blend and report files."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics import balanced_accuracy, rank_auc
from .tensor import NormStats, TensorSeries, windows

REPORT_SCHEMA = "tbngranger.report/1"


# --------------------------------------------------------------------------- structure


@dataclass
class StructureScore:
    auroc: float | None
    accuracy: float
    threshold: float
    f1: float
    diagonal_included: bool
    sweep: list = field(default_factory=list)  # (threshold, accuracy, balanced accuracy, f1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["auroc_defined"] = self.auroc is not None
        return d


def _f1(pred, y) -> float:
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def score_structure(predicted, truth, include_diagonal: bool = False, validation_mask=None) -> StructureScore:
    """AUROC of edge scores against a parent matrix ``truth[j, i]``, plus accuracy
    at the threshold maximizing balanced accuracy on the validation cells
    (all scored cells when no mask is given)."""
    pred = np.asarray(predicted, dtype=np.float64)
    y = np.asarray(getattr(truth, "adjacency", truth)).astype(bool)
    if pred.shape != y.shape:
        raise ValueError(f"predicted {pred.shape} and truth {y.shape} differ")
    cells = np.ones_like(y) if include_diagonal else ~np.eye(y.shape[0], dtype=bool)
    val = cells if validation_mask is None else (cells & np.asarray(validation_mask, dtype=bool))
    held = cells if validation_mask is None else (cells & ~np.asarray(validation_mask, dtype=bool))
    auroc = rank_auc(pred[cells], y[cells])
    sweep = []
    best = (-1.0, np.inf)
    for thr in np.unique(pred[val]):
        p = pred[val] >= thr
        bal = balanced_accuracy(p, y[val])
        sweep.append((float(thr), float((p == y[val]).mean()), bal, _f1(p, y[val])))
        if bal > best[0]:
            best = (bal, float(thr))
    thr = best[1]
    p = pred[held] >= thr
    return StructureScore(auroc, float((p == y[held]).mean()), thr, _f1(p, y[held]), include_diagonal, sweep)


def changed_cell_fraction(A1, A2, atol: float = 0.0) -> float:
    """Fraction of all N x N cells whose values differ between two adjacencies."""
    A1, A2 = np.asarray(A1), np.asarray(A2)
    if A1.shape != A2.shape:
        raise ValueError("adjacency shapes differ")
    return float(np.count_nonzero(np.abs(A1 - A2) > atol) / A1.size)


# --------------------------------------------------------------------------- forecasts


def persistence_blend(forecast, last_window, a: float):
    """``a * forecast + (1 - a) * last_window`` elementwise (TensorSeries or arrays)."""
    if not 0.0 <= a <= 1.0:
        raise ValueError("blend weight must lie in [0, 1]")
    f = forecast.values if isinstance(forecast, TensorSeries) else np.asarray(forecast, dtype=np.float64)
    p = last_window.values if isinstance(last_window, TensorSeries) else np.asarray(last_window, dtype=np.float64)
    if f.shape != p.shape:
        raise ValueError(f"shape mismatch: forecast {f.shape} vs persistence {p.shape}")
    out = a * f + (1.0 - a) * p
    return forecast.with_values(out) if isinstance(forecast, TensorSeries) else out


def select_blend(forecast, persistence, truth, grid=None):
    """Blend weight on ``grid`` (default 0, 0.1, ..., 1) with the lowest MAE; returns (a, maes)."""
    grid = np.round(np.linspace(0, 1, 11), 10) if grid is None else np.asarray(grid, float)
    truth = np.asarray(truth, dtype=np.float64)
    maes = [float(np.mean(np.abs(persistence_blend(forecast, persistence, a) - truth))) for a in grid]
    return float(grid[int(np.argmin(maes))]), maes


@dataclass
class ForecastScore:
    mae: float
    rmse: float
    mae_per_feature: list
    rmse_per_feature: list
    mae_raw: float | None = None
    mae_raw_per_feature: list | None = None
    baselines: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def score_forecast(pred, truth, stats: NormStats | None = None) -> ForecastScore:
    """MAE/RMSE over [N, D, T] grids in normalized units; with ``stats`` the
    raw-unit MAE is the per-feature normalized MAE times the feature std."""
    p = pred.values if isinstance(pred, TensorSeries) else np.asarray(pred, dtype=np.float64)
    y = truth.values if isinstance(truth, TensorSeries) else np.asarray(truth, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"misaligned grids: {p.shape} vs {y.shape}")
    if p.ndim != 3:
        raise ValueError("expected [N, D, T] grids")
    if isinstance(pred, TensorSeries) and isinstance(truth, TensorSeries) and pred.timestamps != truth.timestamps:
        raise ValueError("prediction and truth timestamps differ")
    err = p - y
    mae_f = np.abs(err).mean(axis=(0, 2))
    rmse_f = np.sqrt((err ** 2).mean(axis=(0, 2)))
    out = ForecastScore(float(np.abs(err).mean()), float(np.sqrt((err ** 2).mean())), mae_f.tolist(),
                        rmse_f.tolist())
    if stats is not None:
        std = np.where(stats.constant, 1.0, stats.std)
        raw_f = mae_f * std
        out.mae_raw_per_feature = raw_f.tolist()
        out.mae_raw = float(raw_f.mean())
    return out


def _stitch(ts: TensorSeries, pairs, blocks) -> tuple[TensorSeries, TensorSeries]:
    starts = [tgt.start for _, tgt in pairs]
    stops = [tgt.stop for _, tgt in pairs]
    pred = np.concatenate(blocks, axis=2)
    idx = np.concatenate([np.arange(a, b) for a, b in zip(starts, stops)])
    stamps = [ts.timestamps[i] for i in idx]
    if np.any(np.diff(idx) != 1):
        raise ValueError("target windows are not contiguous; use the default stride")
    return (TensorSeries(pred, ts.location_ids, ts.feature_names, stamps),
            TensorSeries(ts.values[:, :, idx], ts.location_ids, ts.feature_names, stamps))


def baseline_persistence(ts: TensorSeries, L: int, tau: int, start: int = 0, stop: int | None = None):
    """Copy-last-window forecasts: target ``[s+L, s+L+tau)`` predicted by
    ``[s+L-tau, s+L)``. Returns (prediction, target) over the stitched targets."""
    if tau > L:
        raise ValueError("persistence needs tau <= L")
    pairs = windows(ts, L, tau, start=start, stop=stop)
    if not pairs:
        raise ValueError(pairs.diagnostic)
    blocks = [ts.values[:, :, tgt.start - tau:tgt.start] for _, tgt in pairs]
    return _stitch(ts, pairs, blocks)


@dataclass
class VarModel:
    coef: np.ndarray  # [(N*D)*L + 1, N*D]
    L: int

    def step(self, history: np.ndarray) -> np.ndarray:
        """history [L, N*D] oldest first -> next [N*D]."""
        feats = np.concatenate([history[::-1].ravel(), [1.0]])
        return feats @ self.coef


def fit_var(ts: TensorSeries, L: int, train_ranges=None) -> VarModel:
    """Least-squares VAR(L) with intercept on the train ranges."""
    X = ts.values.reshape(ts.N * ts.D, ts.T).T  # [T, N*D]
    ranges = train_ranges or [(0, ts.T)]
    rows, ys = [], []
    for a, b in ranges:
        for t in range(a + L, b):
            rows.append(np.concatenate([X[t - L:t][::-1].ravel(), [1.0]]))
            ys.append(X[t])
    if not rows:
        raise ValueError("train ranges are too short for the VAR lag")
    coef, *_ = np.linalg.lstsq(np.asarray(rows), np.asarray(ys), rcond=None)
    return VarModel(coef, L)


def baseline_var(ts: TensorSeries, L: int, tau: int = 1, train_ranges=None, start: int = 0,
                 stop: int | None = None, model: VarModel | None = None):
    """Iterated least-squares VAR(L) forecasts over the same windows as
    :func:`baseline_persistence`. Returns (prediction, target)."""
    model = model or fit_var(ts, L, train_ranges)
    X = ts.values.reshape(ts.N * ts.D, ts.T).T
    pairs = windows(ts, L, tau, start=start, stop=stop)
    if not pairs:
        raise ValueError(pairs.diagnostic)
    blocks = []
    for inp, tgt in pairs:
        hist = X[inp.start:inp.stop].copy()
        out = []
        for _ in range(tau):
            nxt = model.step(hist)
            out.append(nxt)
            hist = np.vstack([hist[1:], nxt])
        blocks.append(np.asarray(out).T.reshape(ts.N, ts.D, tau))
    return _stitch(ts, pairs, blocks)


# --------------------------------------------------------------------------- reports


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def _flatten(d, prefix=""):
    for k in sorted(d):
        v = d[k]
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        elif isinstance(v, (int, float, str, bool)) or v is None:
            yield key, v


def emit_report(manifest: dict, scores: dict, out_dir, adjacency_pair=None, auroc_grid=None,
                wallclock_keys=("wall_clock", "started", "finished")) -> dict:
    """Write ``report.json``, ``metrics.csv`` and PNG plots to ``out_dir``.

    ``adjacency_pair`` is ``(A1, A2)`` for a heat-map comparison with the
    changed-cell fraction; ``auroc_grid`` maps ``(P, T)`` to AUROC values.
    Wall-clock fields are dropped so identical runs give identical files.
    Returns the report dictionary.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def strip(d):
        if isinstance(d, dict):
            return {k: strip(v) for k, v in d.items() if k not in wallclock_keys}
        if isinstance(d, list):
            return [strip(v) for v in d]
        return d

    report = {"schema": REPORT_SCHEMA, "config_hash": manifest.get("config_hash"),
              "metrics": strip(_plain(manifest.get("metrics", {}))), "scores": strip(_plain(scores))}
    files = {"report": "report.json", "metrics_csv": "metrics.csv"}

    curves = manifest.get("curves", {})
    if curves:
        fig, ax = plt.subplots(figsize=(6, 4))
        for name in sorted(curves):
            ys = [np.nan if v is None else v for v in curves[name]]
            if ys:
                ax.plot(np.arange(len(ys)), ys, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "loss_curves.png", metadata={"Software": None})
        plt.close(fig)
        files["loss_curves"] = "loss_curves.png"

    if adjacency_pair is not None:
        A1, A2 = (np.asarray(a, dtype=np.float64) for a in adjacency_pair)
        frac = changed_cell_fraction(A1, A2)
        report["adjacency_changed_fraction"] = frac
        fig, axes = plt.subplots(1, 2, figsize=(8, 4))
        lim = max(np.abs(A1).max(), np.abs(A2).max(), 1e-12)
        for ax, A, title in zip(axes, (A1, A2), ("first", "second")):
            ax.imshow(A, cmap="coolwarm", vmin=-lim, vmax=lim)
            ax.set_title(title)
        fig.suptitle(f"changed cells: {frac:.4f}")
        fig.savefig(out / "adjacency_pair.png", metadata={"Software": None})
        plt.close(fig)
        files["adjacency_pair"] = "adjacency_pair.png"

    if auroc_grid:
        Ps = sorted({p for p, _ in auroc_grid})
        Ts = sorted({t for _, t in auroc_grid})
        grid = np.full((len(Ps), len(Ts)), np.nan)
        for (p, t), v in auroc_grid.items():
            grid[Ps.index(p), Ts.index(t)] = v
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(grid, vmin=0, vmax=1, cmap="viridis")
        ax.set_xticks(range(len(Ts)), [str(t) for t in Ts])
        ax.set_yticks(range(len(Ps)), [str(p) for p in Ps])
        ax.set_xlabel("T")
        ax.set_ylabel("P")
        fig.colorbar(im)
        fig.savefig(out / "auroc_grid.png", metadata={"Software": None})
        plt.close(fig)
        report["auroc_grid"] = [[int(p), int(t), float(v)] for (p, t), v in sorted(auroc_grid.items())]
        files["auroc_grid"] = "auroc_grid.png"

    report["files"] = files
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in _flatten({"metrics": report["metrics"], "scores": report["scores"]}):
            w.writerow([k, v])
    return report
