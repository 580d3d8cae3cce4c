"""``tts`` command line: data inspection, simulation, training, forecasting, scoring."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import anomaly, evalkit, synth, tensor, trainer
from .diffkit import checkpoint
from .tensor import NormStats, SplitSpec


def _cmd_inspect(args) -> int:
    ts = tensor.load(args.file, nan_policy=args.nan_policy)
    v = ts.values
    info = {
        "shape": {"N": ts.N, "D": ts.D, "T": ts.T},
        "location_ids": list(ts.location_ids),
        "feature_names": list(ts.feature_names),
        "timestamps": {"first": ts.timestamps[0], "last": ts.timestamps[-1]} if ts.T else None,
        "min": float(np.nanmin(v)) if v.size else None,
        "max": float(np.nanmax(v)) if v.size else None,
        "nan_cells": int(np.isnan(v).sum()),
    }
    print(json.dumps(info, indent=1))
    return 0


def _cmd_simulate(args) -> int:
    if args.system == "lorenz96":
        cfg = synth.Lorenz96Config(P=args.p, T=args.t, F=args.f, dt=args.dt, seed=args.seed,
                                   noise_std=args.noise, substeps=args.substeps, burn_in=args.burn_in)
        ts, truth = synth.simulate_lorenz96(cfg)
    else:
        coefs = synth.random_var_coefficients(args.p, args.lag, args.density, args.radius, args.seed)
        ts, truth = synth.simulate_var(args.p, args.t, args.lag, coefs, args.noise, args.seed,
                                       burn_in=args.burn_in)
    if args.extremes:
        ts, labels = synth.inject_extremes(ts, args.extremes, args.magnitude, args.seed + 1)
        if args.labels:
            anomaly.write_labels_csv(args.labels, labels, ts.location_ids, ts.timestamps)
    tensor.save(ts, args.out)
    if args.truth:
        truth.save(args.truth)
    print(f"wrote {args.out} with shape {ts.shape}")
    return 0


def _split_for(ts, args) -> SplitSpec:
    return SplitSpec.chronological(ts.T, args.train_frac, args.val_frac)


def _cmd_pretrain(args) -> int:
    ts = tensor.load(args.input)
    split = _split_for(ts, args)
    stats = tensor.fit_stats(ts, split.train_ranges)
    norm = tensor.normalize(ts, stats)
    ae = anomaly.pretrain(norm, list(split.train_ranges), list(split.validation_ranges), args.h_dim,
                          args.epochs, args.lr, args.seed, args.hidden)
    ae.save(args.out)
    Path(args.out).with_suffix(".json").write_text(json.dumps({
        "D": ae.D, "H_dim": ae.H_dim, "hidden": ae.encoder.n_hidden, "activation": ae.encoder.activation,
        "norm_stats": stats.to_dict(), "val_curve": evalkit._plain(ae.val_curve),
        "split": split.to_dict(), "digest": ae.digest()}, indent=1))
    print(f"validation MSE {ae.val_curve[0]:.6g} -> {ae.val_curve[-1]:.6g}")
    return 0


def _load_ae(path):
    """Autoencoder plus the normalization stats saved next to it (if any)."""
    path = Path(path)
    arrays = checkpoint.load(path)
    meta_path = path.with_suffix(".json")
    stats = None
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        ae = anomaly.FeatureAutoencoder.create(meta["D"], meta["H_dim"], meta["hidden"], meta["activation"])
        stats = NormStats.from_dict(meta["norm_stats"])
    else:
        W1 = arrays["enc.W1"]
        ae = anomaly.FeatureAutoencoder.create(W1.shape[0], arrays["enc.W2"].shape[1], W1.shape[1])
        stats_path = path.parent / "norm_stats.json"
        if stats_path.exists():
            stats = NormStats.from_dict(json.loads(stats_path.read_text()))
    ae.load_state(arrays)
    return ae, stats


def _cmd_detect(args) -> int:
    ts = tensor.load(args.forecast)
    ae, stats = _load_ae(args.ae or Path(args.forecast).parent / "ae.ckpt")
    if stats is not None:
        ts = tensor.normalize(ts, stats)
    labels = anomaly.read_labels_csv(args.labels, ts.location_ids, ts.timestamps) if args.labels else None
    rep = anomaly.score_anomalies(ae, ts, labels, args.threshold, args.space)
    Path(args.report).write_text(json.dumps(evalkit._plain(rep.to_dict(args.scores)), indent=1, sort_keys=True))
    print(f"AUC-ROC: {rep.auc_roc if rep.auc_roc is not None else 'undefined'}")
    return 0


def _cmd_train(args) -> int:
    cfg = trainer.RunConfig.from_toml(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    man = trainer.run(cfg)
    print(json.dumps(evalkit._plain(man.metrics), indent=1, sort_keys=True))
    return 0


def _cmd_forecast(args) -> int:
    model_path = Path(args.model)
    run_dir = model_path if model_path.is_dir() else model_path.parent
    pred = trainer.Predictor(run_dir).forecast(tensor.load(args.input), args.tau)
    tensor.save(pred, args.out)
    print(f"wrote {args.out} with shape {pred.shape}")
    return 0


def _cmd_eval(args) -> int:
    mpath = Path(args.manifest)
    run_dir = mpath if mpath.is_dir() else mpath.parent
    manifest = json.loads((run_dir / "manifest.json").read_text() if mpath.is_dir() else mpath.read_text())
    scores = {}
    adjacency_pair = None
    gpath = run_dir / "granger_scores.csv"
    if args.truth and gpath.exists():
        truth = synth.GroundTruthGraph.load(args.truth)
        s = evalkit.score_structure(np.loadtxt(gpath, delimiter=",", ndmin=2), truth)
        scores["structure"] = s.to_dict()
    spath = run_dir / "snapshots.tts"
    if spath.exists():
        from .inner import load_snapshot_matrices

        A = load_snapshot_matrices(spath)
        if A.shape[0] >= 2:
            adjacency_pair = (A[-2], A[-1])
    rep = evalkit.emit_report(manifest, scores, args.report, adjacency_pair)
    print(json.dumps({"files": rep["files"], "scores": rep["scores"]}, indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tts", description="Tensor time series causal forecasting toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("inspect", help="print shape and metadata of a TTS file")
    s.add_argument("file")
    s.add_argument("--nan-policy", choices=("reject", "ffill"), default="reject")
    s.set_defaults(fn=_cmd_inspect)

    s = sub.add_parser("simulate", help="generate a synthetic series with known causal structure")
    s.add_argument("system", choices=("lorenz96", "var"))
    s.add_argument("--p", type=int, default=10)
    s.add_argument("--t", type=int, default=500)
    s.add_argument("--f", type=float, default=10.0, help="Lorenz-96 forcing")
    s.add_argument("--dt", type=float, default=0.01)
    s.add_argument("--substeps", type=int, default=10)
    s.add_argument("--lag", type=int, default=2, help="VAR order")
    s.add_argument("--density", type=float, default=0.2)
    s.add_argument("--radius", type=float, default=0.9)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--burn-in", type=int, default=500)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--extremes", type=float, default=0.0, help="rate of injected extreme cells")
    s.add_argument("--magnitude", type=float, default=6.0)
    s.add_argument("--labels", help="label CSV for injected extremes")
    s.add_argument("--out", required=True)
    s.add_argument("--truth")
    s.set_defaults(fn=_cmd_simulate)

    s = sub.add_parser("pretrain-ae", help="fit the feature autoencoder on train ranges")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--h-dim", type=int)
    s.add_argument("--hidden", type=int)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--train-frac", type=float, default=0.7)
    s.add_argument("--val-frac", type=float, default=0.1)
    s.set_defaults(fn=_cmd_pretrain)

    s = sub.add_parser("detect", help="score cells by autoencoder reconstruction error")
    s.add_argument("--forecast", required=True, help="TTS file to score")
    s.add_argument("--ae", help="autoencoder checkpoint (default: ae.ckpt beside the forecast file)")
    s.add_argument("--labels")
    s.add_argument("--threshold", type=float)
    s.add_argument("--space", choices=("raw", "latent"), default="raw")
    s.add_argument("--scores", action="store_true", help="include per-cell scores in the report")
    s.add_argument("--report", required=True)
    s.set_defaults(fn=_cmd_detect)

    for name in ("train", "run"):
        s = sub.add_parser(name, help="run the full pipeline from a TOML config")
        s.add_argument("--config", required=True)
        s.add_argument("--output-dir")
        s.set_defaults(fn=_cmd_train)

    s = sub.add_parser("forecast", help="forecast the steps after an input series with a trained run")
    s.add_argument("--model", required=True, help="run directory or its granger.ckpt")
    s.add_argument("--input", required=True)
    s.add_argument("--tau", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_forecast)

    s = sub.add_parser("eval", help="write report files for a finished run")
    s.add_argument("--manifest", required=True, help="manifest.json or run directory")
    s.add_argument("--truth")
    s.add_argument("--report", required=True, help="output directory")
    s.set_defaults(fn=_cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (tensor.TTSError, ValueError, FileNotFoundError, checkpoint.CheckpointError) as exc:
        print(f"tts: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
