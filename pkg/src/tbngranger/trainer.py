"""End-to-end orchestration: autoencoder pretraining, interleaved inner/outer
rounds with cycle re-projection, test-phase forecasting and anomaly scoring.

Configuration is a TOML file with a top-level ``[run]`` table and ``[split]``,
``[ae]``, ``[inner]``, ``[outer]`` and ``[anomaly]`` tables (see README).
Every table that drives randomness must set ``seed`` explicitly.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import anomaly, evalkit, inner, outer, tensor
from .diffkit import checkpoint
from .synth import GroundTruthGraph
from .tensor import NormStats, SplitSpec, TensorSeries

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = "tbngranger.manifest/1"


# --------------------------------------------------------------------------- config


@dataclass
class SplitSection:
    train: float = 0.7
    validation: float = 0.1
    train_ranges: list | None = None
    validation_ranges: list | None = None
    test_ranges: list | None = None

    def resolve(self, T: int) -> SplitSpec:
        if self.train_ranges is not None:
            return SplitSpec(tuple(map(tuple, self.train_ranges)), tuple(map(tuple, self.validation_ranges or [])),
                             tuple(map(tuple, self.test_ranges or [])))
        return SplitSpec.chronological(T, self.train, self.validation)


@dataclass
class AeSection:
    H_dim: int | None = None
    hidden: int | None = None
    epochs: int = 200
    lr: float = 1e-2
    activation: str = "tanh"
    init: str = "glorot"
    batch_size: int | None = None
    seed: int = 0


@dataclass
class InnerSection:
    rounds: int = 5  # dual rounds per interleave round
    max_rounds: int = 50
    maxiter: int = 100
    context: int = 1
    l1: float = 0.05
    edge_threshold: float = 0.3
    hidden: int | None = None
    unit_variance: bool = False
    lambda0: float = 0.0
    c0: float = 1.0
    eta: float = 10.0
    gamma: float = 0.25
    atol: float = 1e-8
    finish: bool = True  # after the last round, continue unconverged snapshots up to max_rounds
    resample_noise: bool = False
    seed: int = 0

    def schedule(self) -> inner.InnerSchedule:
        return inner.InnerSchedule(self.lambda0, self.c0, self.eta, self.gamma, self.atol, self.max_rounds,
                                   self.maxiter, edge_threshold=self.edge_threshold, l1=self.l1,
                                   context=self.context, seed=self.seed, resample_noise=self.resample_noise)


@dataclass
class OuterSection:
    K: int = 2
    L: int = 24
    tau: int = 24
    hidden: int = 64
    xi: float = 0.5
    candidate: str = "tanh"
    softmax: str = "binary"
    lr: float = 1e-2
    epochs: int = 20
    batch_size: int = 64
    stride: int = 1
    learn_adjacency: bool = True
    summary_graph: bool = True
    edge_threshold: float = 0.3
    adj_l1: float = 0.1
    adj_lr_scale: float = 5.0
    static_random_adjacency: bool = False  # control: fixed random graph in place of inner snapshots
    seed: int = 0

    def model_config(self) -> outer.OuterConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(outer.OuterConfig)}
        if self.static_random_adjacency:
            kw["learn_adjacency"] = False
        return outer.OuterConfig(**kw)


@dataclass
class AnomalySection:
    space: str = "raw"
    quantile: float = 0.995


@dataclass
class RunConfig:
    input: str
    output_dir: str
    rounds: int = 3
    labels: str | None = None
    truth: str | None = None
    normalize: bool = True
    blend_grid: int = 11
    split: SplitSection = field(default_factory=SplitSection)
    ae: AeSection = field(default_factory=AeSection)
    inner: InnerSection = field(default_factory=InnerSection)
    outer: OuterSection = field(default_factory=OuterSection)
    anomaly: AnomalySection = field(default_factory=AnomalySection)

    def __post_init__(self):
        if self.rounds < 1 or self.inner.rounds < 1:
            raise ValueError("interleave counts R and E must be >= 1")
        if self.outer.epochs < 0:
            raise ValueError("outer epochs F must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict, require_seeds: bool = False) -> "RunConfig":
        d = dict(d)
        run = dict(d.pop("run", {}))
        sections = {"split": SplitSection, "ae": AeSection, "inner": InnerSection, "outer": OuterSection,
                    "anomaly": AnomalySection}
        kw = {}
        for name, typ in sections.items():
            raw = d.pop(name, None)
            if raw is None:
                raw = run.pop(name, None)
            raw = dict(raw or {})
            if require_seeds and "seed" in {f.name for f in fields(typ)} and "seed" not in raw:
                raise ValueError(f"[{name}] must set an explicit seed")
            unknown = set(raw) - {f.name for f in fields(typ)}
            if unknown:
                raise ValueError(f"unknown keys in [{name}]: {sorted(unknown)}")
            kw[name] = typ(**raw)
        run.update(d)
        unknown = set(run) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown keys in [run]: {sorted(unknown)}")
        return cls(**run, **kw)

    @classmethod
    def from_toml(cls, path) -> "RunConfig":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
        cfg = cls.from_dict(d, require_seeds=True)
        base = Path(path).parent
        for key in ("input", "labels", "truth", "output_dir"):
            v = getattr(cfg, key)
            if v is not None and not Path(v).is_absolute():
                setattr(cfg, key, str(base / v))
        return cfg


# --------------------------------------------------------------------------- access guard


class AccessViolation(RuntimeError):
    pass


class AccessGuard:
    """Hands out series columns by split kind; test columns stay locked until
    :meth:`unlock`. Every read is logged."""

    def __init__(self, ts: TensorSeries, split: SplitSpec):
        split.check(ts.T)
        self._ts = ts
        self.split = split
        self.unlocked = False
        self.log: list[tuple[str, int]] = []

    def indices(self, kind: str) -> np.ndarray:
        return self.split.indices(kind)

    def read(self, kind: str) -> np.ndarray:
        """Values [N, D, len(kind indices)] of one split kind."""
        if kind == "test" and not self.unlocked:
            raise AccessViolation("test-range data requested before the test phase")
        idx = self.indices(kind)
        self.log.append((kind, int(idx.size)))
        return self._ts.values[:, :, idx]

    def masked(self, kinds) -> np.ndarray:
        """Full-length [N, D, T] array with columns outside ``kinds`` set to NaN."""
        out = np.full(self._ts.values.shape, np.nan)
        for kind in kinds:
            idx = self.indices(kind)
            if idx.size:
                out[:, :, idx] = self.read(kind)
        return out

    def unlock(self) -> None:
        self.unlocked = True


# --------------------------------------------------------------------------- manifest


@dataclass
class RunManifest:
    config_hash: str
    config: dict
    phases: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    violation_log: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)
    status: str = "running"

    def add_phase(self, name: str, seconds: float, **info) -> None:
        self.phases.append({"name": name, "wall_clock": round(seconds, 3), **info})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = MANIFEST_SCHEMA
        return evalkit._plain(d)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def thread_info() -> dict:
    from . import kernels

    info = {"kernel_backend": kernels.BACKEND}
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        info[var] = os.environ.get(var)
    try:
        from threadpoolctl import threadpool_info

        info["blas_threads"] = [p.get("num_threads") for p in threadpool_info()]
    except ImportError:
        pass
    return info


# --------------------------------------------------------------------------- helpers


def window_starts(split_ranges, L: int, tau: int, stride: int) -> np.ndarray:
    """Starts of windows whose input and target both lie inside one interval."""
    out = []
    for a, b in split_ranges:
        out.extend(range(a, b - L - tau + 1, stride))
    return np.asarray(out, dtype=np.int64)


def _latent_time_major(ae: anomaly.FeatureAutoencoder, X: np.ndarray) -> np.ndarray:
    """Normalized [N, D, T] (NaN where locked) -> latent [T, N, H_dim]."""
    return np.ascontiguousarray(ae.encode_cells(np.transpose(X, (2, 0, 1))))


def _decode_windows(ae, pred: np.ndarray) -> np.ndarray:
    """[B, tau, N, H_dim] latent forecasts -> [N, D, B*tau] stitched normalized features."""
    B, tau, N, _ = pred.shape
    x = ae.decode_cells(pred)  # [B, tau, N, D]
    return np.transpose(x.reshape(B * tau, N, -1), (1, 2, 0))


def _targets(X: np.ndarray, starts, L: int, tau: int) -> np.ndarray:
    cols = np.concatenate([np.arange(s + L, s + L + tau) for s in starts])
    return X[:, :, cols]


def _persistence(X: np.ndarray, starts, L: int, tau: int) -> np.ndarray:
    cols = np.concatenate([np.arange(s + L - tau, s + L) for s in starts])
    return X[:, :, cols]


def _mae(a, b) -> float:
    return float(np.mean(np.abs(a - b)))


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(evalkit._plain(obj), indent=1, sort_keys=True))


# --------------------------------------------------------------------------- run


def run(config: RunConfig) -> RunManifest:
    """Execute all phases and write artifacts into ``config.output_dir``."""
    cfg = config
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(cfg.hash(), cfg.to_dict(), environment=thread_info())
    man_path = out / "manifest.json"
    try:
        _run(cfg, out, man)
        man.status = "complete"
    except Exception as exc:
        man.status = "failed"
        man.violation_log.append({"event": "abort", "phase": man.phases[-1]["name"] if man.phases else None,
                                  "error": f"{type(exc).__name__}: {exc}"})
        man.write(man_path)
        raise
    man.write(man_path)
    return man


def _run(cfg: RunConfig, out: Path, man: RunManifest) -> None:
    ts = tensor.load(cfg.input)
    split = cfg.split.resolve(ts.T)
    guard = AccessGuard(ts, split)
    train_t, val_t, test_t = (split.indices(k) for k in ("train", "validation", "test"))
    known_t = np.sort(np.concatenate([train_t, val_t]))
    T, N = ts.T, ts.N
    metrics = man.metrics

    # ---- phase 1: normalization + autoencoder pretraining (train ranges only)
    t0 = time.perf_counter()
    train_block = guard.read("train")
    if cfg.normalize:
        stats = tensor.fit_stats(TensorSeries.from_array(train_block, ts.location_ids, ts.feature_names))
    else:
        stats = NormStats(np.zeros(ts.D), np.ones(ts.D), np.zeros(ts.D, bool))
    mean = np.where(stats.constant, 0.0, stats.mean)[None, :, None]
    std = np.where(stats.constant, 1.0, stats.std)[None, :, None]

    def norm(x):
        return (x - mean) / std

    val_block = guard.read("validation") if val_t.size else np.zeros((N, ts.D, 0))
    to_cells = lambda x: np.transpose(x, (0, 2, 1)).reshape(-1, ts.D)  # noqa: E731
    ae = anomaly.pretrain_cells(to_cells(norm(train_block)), to_cells(norm(val_block)), cfg.ae.H_dim,
                                cfg.ae.epochs, cfg.ae.lr, cfg.ae.seed, cfg.ae.hidden, cfg.ae.activation,
                                cfg.ae.init, cfg.ae.batch_size)
    ae.save(out / "ae.ckpt")
    man.checkpoints["ae"] = "ae.ckpt"
    man.curves["ae_train_mse"] = ae.train_curve
    man.curves["ae_val_mse"] = ae.val_curve
    metrics["ae"] = {"train_mse": ae.train_curve[-1], "val_mse": ae.val_curve[-1]}
    _write_json(out / "norm_stats.json", stats.to_dict())
    man.add_phase("pretrain", time.perf_counter() - t0, reads=list(guard.log))

    # ---- phase 2: interleaved inner / outer rounds on train + validation timestamps
    t0 = time.perf_counter()
    X_known = norm(guard.masked(("train", "validation")))
    latent = _latent_time_major(ae, X_known)  # NaN on locked columns
    Hd = ae.H_dim
    sch = cfg.inner.schedule()
    vae = inner.InnerVae.create(Hd, cfg.inner.hidden, cfg.inner.seed, unit_variance=cfg.inner.unit_variance)
    state = inner.InnerState.fresh(T, N, sch)
    ocfg = cfg.outer.model_config()
    model = outer.GrangerModel(Hd, ocfg)
    L, tau = ocfg.L, ocfg.tau
    train_starts = window_starts(split.train_ranges, L, tau, ocfg.stride)
    val_starts = window_starts(split.validation_ranges, L, tau, tau)
    if cfg.outer.epochs > 0 and train_starts.size == 0:
        raise ValueError(f"train ranges hold no window of L + tau = {L + tau} steps")
    static_A = None
    if cfg.outer.static_random_adjacency:
        rng = np.random.default_rng([cfg.outer.seed, 99])
        # logits of a fixed random graph: strong edges with the density of a sparse graph
        g = (rng.random((N, N)) < 0.3).astype(float)
        np.fill_diagonal(g, 0.0)
        static_A = np.broadcast_to(np.where(g > 0, 3.0, -3.0), (T, N, N)).copy()
    outer_runs = []
    for r in range(cfg.rounds):
        inner.optimize_inner(vae, latent, sch, state, timestamps=train_t, train_vae=True, rounds=cfg.inner.rounds)
        if val_t.size:
            inner.optimize_inner(vae, latent, sch, state, timestamps=val_t, train_vae=False,
                                 rounds=cfg.inner.rounds)
        if cfg.outer.epochs > 0:
            A_in = static_A if static_A is not None else state.A
            res = outer.train_outer(model, latent, A_in, train_starts, val_starts, epochs=cfg.outer.epochs,
                                    seed=cfg.outer.seed + r)
            outer_runs.append(res)
            man.curves[f"outer_train_mae_round{r}"] = res.train_curve
            man.curves[f"outer_val_mae_round{r}"] = res.val_curve
            bad = [int(t) for t in res.cyclic if t in set(known_t.tolist())] if static_A is None else []
            if bad:
                man.violation_log.append({"event": "reprojection", "round": r, "timestamps": bad})
                start = np.stack([inner.hard_project(res.fine_tuned[t], sch.edge_threshold)[0] for t in bad])
                state.reopen(bad, start, sch)
                inner.optimize_inner(vae, latent, sch, state, timestamps=bad, train_vae=False,
                                     rounds=cfg.inner.rounds)
                model.store["adj.offset"].value[bad] = 0.0
    if cfg.inner.finish:
        todo = known_t[~state.converged[known_t]]
        if todo.size:
            inner.optimize_inner(vae, latent, sch, state, timestamps=todo, train_vae=False)
    vae.save(out / "vae.ckpt")
    man.checkpoints["vae"] = "vae.ckpt"
    man.add_phase("interleave", time.perf_counter() - t0, rounds=cfg.rounds)

    # ---- validation forecasts (blend weight selection)
    A_eval = static_A if static_A is not None else state.A
    model.attach_adjacency(T, N)
    blend_a = 1.0
    if val_starts.size:
        pv = outer.predict_windows(model, latent, A_eval, val_starts, tau)
        Xv_pred = _decode_windows(ae, pv)
        Xv_true = _targets(X_known, val_starts, L, tau)
        Xv_pers = _persistence(X_known, val_starts, L, tau)
        blend_a, val_maes = evalkit.select_blend(Xv_pred, Xv_pers, Xv_true,
                                                 np.round(np.linspace(0, 1, cfg.blend_grid), 10))
        metrics["validation"] = {"mae_model": val_maes[-1], "mae_persistence": val_maes[0],
                                 "blend_a": blend_a, "mae_blend": min(val_maes), "blend_curve": val_maes}

    # ---- phase 3: test phase
    t0 = time.perf_counter()
    guard.unlock()
    X_all = norm(guard.masked(("train", "validation", "test")))
    latent_all = _latent_time_major(ae, X_all)
    if test_t.size:
        inner.optimize_inner(vae, latent_all, sch, state, timestamps=test_t, train_vae=False)
    snap_t = np.sort(np.concatenate([known_t, test_t]))
    snaps = [inner.make_snapshot(state, int(t), sch) for t in snap_t]
    inner.export_snapshots(snaps, out / "snapshots.json", out / "snapshots.tts", ts.location_ids,
                           [ts.timestamps[t] for t in snap_t])
    man.artifacts["snapshots"] = "snapshots.json"
    man.artifacts["snapshot_matrices"] = "snapshots.tts"
    flagged = [s.t for s in snaps if s.flagged]
    metrics["inner"] = {"snapshots": len(snaps), "non_acyclic": len(flagged),
                        "max_alpha": max((s.acyclicity_residual for s in snaps), default=0.0),
                        "removed_edges": sum(len(s.removals) for s in snaps)}
    if flagged:
        man.violation_log.append({"event": "non_acyclic_snapshots", "timestamps": flagged})

    A_eval = static_A if static_A is not None else state.A
    test_starts = window_starts(split.test_ranges, L, tau, tau)
    if test_starts.size:
        pt = outer.predict_windows(model, latent_all, A_eval, test_starts, tau)
        Xt_pred = _decode_windows(ae, pt)
        Xt_true = _targets(X_all, test_starts, L, tau)
        Xt_pers = _persistence(X_all, test_starts, L, tau)
        Xt_blend = evalkit.persistence_blend(Xt_pred, Xt_pers, blend_a)
        lat_true = np.stack([latent_all[s + L:s + L + tau] for s in test_starts])
        sc = evalkit.score_forecast(Xt_pred, Xt_true, stats)
        metrics["test"] = {
            "mae": sc.mae, "rmse": sc.rmse, "mae_raw": sc.mae_raw, "mae_latent": _mae(pt, lat_true),
            "mae_persistence": _mae(Xt_pers, Xt_true), "mae_blend": _mae(Xt_blend, Xt_true),
            "blend_a": blend_a, "windows": int(test_starts.size),
            # reported only, never used for selection
            "blend_curve": evalkit.select_blend(Xt_pred, Xt_pers, Xt_true,
                                                np.round(np.linspace(0, 1, cfg.blend_grid), 10))[1],
        }
        cols = np.concatenate([np.arange(s + L, s + L + tau) for s in test_starts])
        raw_pred = Xt_pred * std + mean
        tensor.save(TensorSeries(raw_pred, ts.location_ids, ts.feature_names, [ts.timestamps[c] for c in cols]),
                    out / "forecast_test.tts")
        man.artifacts["forecast"] = "forecast_test.tts"

    model.save(out / "granger.ckpt")
    _write_json(out / "granger.json", {"H_dim": Hd, "T": T, "N": N, "outer": ocfg.to_dict()})
    man.checkpoints["granger"] = "granger.ckpt"

    probs = outer.eval_probs(model, A_eval, train_t) if train_t.size else np.zeros((0, N, N))
    gscores = outer.granger_scores(model, probs) if probs.size else np.zeros((N, N))
    np.savetxt(out / "granger_scores.csv", gscores, delimiter=",", fmt="%.17g")
    man.artifacts["granger_scores"] = "granger_scores.csv"
    if cfg.truth:
        truth = GroundTruthGraph.load(cfg.truth)
        metrics["structure"] = evalkit.score_structure(gscores, truth).to_dict()
        metrics["structure"].pop("sweep")

    # ---- anomaly scoring
    if cfg.labels:
        # observed test cells are scored; the threshold is the normal-cell quantile on validation
        labels = anomaly.read_labels_csv(cfg.labels, ts.location_ids, ts.timestamps)
        thr = None
        if val_t.size:
            normal_val = anomaly.cell_scores(ae, TensorSeries.from_array(X_all[:, :, val_t]), cfg.anomaly.space)
            thr = anomaly.fit_threshold(normal_val[labels[:, val_t] == 0], cfg.anomaly.quantile)
        rep = anomaly.score_anomalies(ae, TensorSeries.from_array(X_all[:, :, test_t]), labels[:, test_t], thr,
                                      cfg.anomaly.space)
        _write_json(out / "anomaly_report.json", rep.to_dict())
        man.artifacts["anomaly_report"] = "anomaly_report.json"
        metrics["anomaly"] = {"auc_roc": rep.auc_roc, "threshold": thr, "confusion": rep.confusion()}
    man.add_phase("test", time.perf_counter() - t0)

    _write_json(out / "metrics.json", metrics)
    man.artifacts["metrics"] = "metrics.json"


# --------------------------------------------------------------------------- prediction from a run directory


class Predictor:
    """Forecast new data with the artifacts of a finished run."""

    def __init__(self, run_dir, config: RunConfig | None = None):
        d = Path(run_dir)
        meta = json.loads((d / "granger.json").read_text())
        man = json.loads((d / "manifest.json").read_text())
        self.cfg = config or RunConfig.from_dict({k: v for k, v in man["config"].items()})
        self.stats = NormStats.from_dict(json.loads((d / "norm_stats.json").read_text()))
        ae_state = checkpoint.load(d / "ae.ckpt")
        D = ae_state["enc.W1"].shape[0]
        self.ae = anomaly.FeatureAutoencoder.create(D, self.cfg.ae.H_dim, self.cfg.ae.hidden, self.cfg.ae.activation)
        self.ae.load_state(ae_state)
        self.vae = inner.InnerVae.create(meta["H_dim"], self.cfg.inner.hidden, unit_variance=self.cfg.inner.unit_variance)
        self.vae.store.load_state(checkpoint.load(d / "vae.ckpt"))
        self.model = outer.GrangerModel(meta["H_dim"], outer.OuterConfig(**meta["outer"]))
        self.model.load_state(checkpoint.load(d / "granger.ckpt"))

    def forecast(self, ts: TensorSeries, tau: int | None = None) -> TensorSeries:
        model = self.model
        L = model.L
        tau = model.cfg.tau if tau is None else tau
        if ts.T < L:
            raise ValueError(f"input has {ts.T} steps; the model needs L={L}")
        x = tensor.normalize(ts, self.stats).values[:, :, -L:]
        lat = _latent_time_major(self.ae, x)
        sch = self.cfg.inner.schedule()
        res = inner.optimize_inner(self.vae, lat, sch, timestamps=np.arange(L), train_vae=False)
        # new timestamps have no learned per-timestamp offsets; the summary graph still applies
        logits = res.state.A + (model.store["adj.summary"].value if model.has_adjacency else 0.0)
        probs = outer.gumbel_edge_probs(logits, model.cfg.xi, None, model.cfg.softmax).value
        pred = outer.forecast(model, probs[None], lat[None], tau)
        X = _decode_windows(self.ae, pred)
        std = np.where(self.stats.constant, 1.0, self.stats.std)[None, :, None]
        mean = np.where(self.stats.constant, 0.0, self.stats.mean)[None, :, None]
        step = ts.timestamps[1] - ts.timestamps[0] if ts.T > 1 else 1
        stamps = [ts.timestamps[-1] + step * (k + 1) for k in range(tau)]
        return TensorSeries(X * std + mean, ts.location_ids, ts.feature_names, stamps)
