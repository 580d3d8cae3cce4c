import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbngranger import evalkit, synth, tensor
from tbngranger.tensor import TensorSeries


def test_structure_perfect_and_inverted():
    truth = synth.lorenz96_truth(10)
    s = evalkit.score_structure(truth.adjacency.astype(float), truth)
    assert s.auroc == 1.0 and s.accuracy == 1.0 and s.f1 == 1.0
    assert evalkit.score_structure(1.0 - truth.adjacency, truth).auroc == 0.0


def test_structure_random_null():
    truth = synth.lorenz96_truth(10)
    rng = np.random.default_rng(0)
    off = ~np.eye(10, dtype=bool)
    from tbngranger.metrics import rank_auc
    y = truth.adjacency[off]
    aucs = [rank_auc(rng.random(y.size), y) for _ in range(10_000)]
    assert abs(np.mean(aucs) - 0.5) <= 0.02


def test_structure_undefined_for_single_class():
    s = evalkit.score_structure(np.random.default_rng(0).random((4, 4)), np.zeros((4, 4), int))
    assert s.auroc is None and not s.to_dict()["auroc_defined"]


def test_structure_diagonal_flag_and_shape():
    truth = synth.lorenz96_truth(6)
    pred = truth.adjacency.astype(float)
    pred[np.diag_indices(6)] = 0.0
    assert evalkit.score_structure(pred, truth).auroc == 1.0
    assert evalkit.score_structure(pred, truth, include_diagonal=True).auroc < 1.0
    with pytest.raises(ValueError):
        evalkit.score_structure(np.zeros((5, 5)), truth)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_structure_auroc_monotone_invariant(seed):
    rng = np.random.default_rng(seed)
    truth = synth.lorenz96_truth(7)
    w = rng.normal(size=(7, 7))
    assert evalkit.score_structure(w, truth).auroc == evalkit.score_structure(np.tanh(w) * 3 + 1, truth).auroc


def test_blend_examples():
    f, p = np.full((2, 1, 3), 2.0), np.full((2, 1, 3), 4.0)
    np.testing.assert_array_equal(evalkit.persistence_blend(f, p, 1.0), f)
    np.testing.assert_array_equal(evalkit.persistence_blend(f, p, 0.0), p)
    np.testing.assert_array_equal(evalkit.persistence_blend(f, p, 0.5), 3.0)
    with pytest.raises(ValueError):
        evalkit.persistence_blend(f, p[:, :, :2], 0.5)
    with pytest.raises(ValueError):
        evalkit.persistence_blend(f, p, 1.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_blend_is_between_inputs(seed, a):
    rng = np.random.default_rng(seed)
    f, p = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4))
    out = evalkit.persistence_blend(f, p, a)
    assert (out >= np.minimum(f, p) - 1e-15).all() and (out <= np.maximum(f, p) + 1e-15).all()


def test_blend_on_tensor_series():
    ts = TensorSeries.from_array(np.ones((2, 1, 3)))
    out = evalkit.persistence_blend(ts, ts.with_values(np.zeros((2, 1, 3))), 0.25)
    assert isinstance(out, TensorSeries)
    np.testing.assert_array_equal(out.values, 0.25)


def test_select_blend_endpoints_bound():
    rng = np.random.default_rng(1)
    y = rng.normal(size=(2, 1, 50))
    a, maes = evalkit.select_blend(y + 0.3, y + rng.normal(size=y.shape), y)
    assert min(maes) <= min(maes[0], maes[-1]) + 1e-12
    assert len(maes) == 11 and a in np.round(np.linspace(0, 1, 11), 10)


def test_forecast_score_examples():
    y = np.random.default_rng(0).normal(size=(3, 2, 5))
    assert evalkit.score_forecast(y, y).mae == 0.0
    assert evalkit.score_forecast(y + 1, y).mae == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        evalkit.score_forecast(y, y[:, :, :4])


def test_raw_mae_is_normalized_times_std():
    rng = np.random.default_rng(2)
    raw = TensorSeries.from_array(rng.normal(size=(3, 2, 40)) * np.array([1.0, 7.0])[None, :, None] + 5)
    stats = tensor.fit_stats(raw, [(0, 40)])
    n = tensor.normalize(raw, stats).values
    pred = n + rng.normal(size=n.shape) * 0.1
    sc = evalkit.score_forecast(pred, n, stats)
    raw_pred = pred * stats.std[None, :, None] + stats.mean[None, :, None]
    direct = np.abs(raw_pred - raw.values).mean(axis=(0, 2))
    np.testing.assert_allclose(sc.mae_raw_per_feature, direct, rtol=1e-10)


def test_persistence_baseline_copies_last_window():
    ts = TensorSeries.from_array(np.arange(20.0).reshape(1, 1, 20))
    pred, tgt = evalkit.baseline_persistence(ts, L=4, tau=2)
    np.testing.assert_array_equal(pred.values, tgt.values - 2)
    assert pred.timestamps == tgt.timestamps


def test_var_baseline_exact_on_noiseless_var():
    coefs = synth.random_var_coefficients(4, 2, density=0.5, radius=0.95, seed=3)
    ts, _ = synth.simulate_var(4, 300, 2, coefs, noise_std=0.0, seed=3,
                               init=np.random.default_rng(0).normal(size=(2, 4)))
    pred, tgt = evalkit.baseline_var(ts, L=2, tau=3, train_ranges=[(0, 200)], start=200)
    assert np.abs(pred.values - tgt.values).mean() < 1e-6


def test_changed_cell_fraction():
    A = np.random.default_rng(0).random((238, 238))
    assert evalkit.changed_cell_fraction(A, A) == 0.0
    B = A + (1 - np.eye(238))
    assert evalkit.changed_cell_fraction(A, B) == (238 ** 2 - 238) / 238 ** 2


def _manifest():
    return {"config_hash": "abc", "metrics": {"test": {"mae": 0.5}, "phases": [{"name": "p", "wall_clock": 1.2}]},
            "curves": {"outer_val_mae_round0": [1.0, 0.5, 0.4]}}


def test_report_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    pair = (rng.random((5, 5)), rng.random((5, 5)))
    digests = []
    for d, wall in (("a", 1.2), ("b", 9.9)):
        man = _manifest()
        man["metrics"]["phases"][0]["wall_clock"] = wall
        rep = evalkit.emit_report(man, {"structure": {"auroc": 0.9}}, tmp_path / d, pair, {(10, 500): 0.8})
        digests.append({k: hashlib.sha256((tmp_path / d / f).read_bytes()).hexdigest()
                        for k, f in rep["files"].items()})
    assert digests[0] == digests[1]
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert rep["schema"] == evalkit.REPORT_SCHEMA and rep["auroc_grid"] == [[10, 500, 0.8]]
    assert "wall_clock" not in json.dumps(rep)
