import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbngranger import tensor
from tbngranger.tensor import NormStats, SplitSpec, TensorSeries, TTSError


def _raw_file(N, D, T, payload, locs=None, feats=None, stamps=None):
    meta = {
        "location_ids": locs if locs is not None else [f"l{i}" for i in range(N)],
        "feature_names": feats if feats is not None else [f"f{i}" for i in range(D)],
        "timestamps": stamps if stamps is not None else list(range(T)),
    }
    mb = json.dumps(meta, separators=(",", ":")).encode()
    return (b"TTS1" + struct.pack("<QQQ", N, D, T) + struct.pack("<Q", len(mb)) + mb
            + np.asarray(payload, dtype="<f4").tobytes())


def test_load_known_payload():
    ts = tensor.loads(_raw_file(2, 1, 3, [1, 2, 3, 4, 5, 6]))
    assert ts.shape == (2, 1, 3)
    assert ts.values[1][0][2] == 6
    assert ts.values[0][0][0] == 1


def test_header_axis_mismatch():
    with pytest.raises(TTSError) as e:
        tensor.loads(_raw_file(2, 1, 3, [0] * 6, locs=["a", "b", "c"]))
    assert e.value.code == "axis_mismatch"


@pytest.mark.parametrize("blob, code", [
    (b"XXXX" + b"\0" * 40, "malformed_header"),
    (b"TTS", "malformed_header"),
])
def test_malformed_header(blob, code):
    with pytest.raises(TTSError) as e:
        tensor.loads(blob)
    assert e.value.code == code


def test_distinct_error_codes():
    with pytest.raises(TTSError) as e:
        tensor.loads(_raw_file(1, 1, 3, [0, 0, 0], stamps=[0, 2, 1]))
    assert e.value.code == "non_monotone_timestamps"
    with pytest.raises(TTSError) as e:
        tensor.loads(_raw_file(1, 1, 3, [0, np.nan, 0]))
    assert e.value.code == "nan_payload"
    with pytest.raises(TTSError) as e:
        tensor.loads(_raw_file(1, 1, 3, [0, 0, 0])[:-2])
    assert e.value.code == "truncated"
    with pytest.raises(TTSError) as e:
        tensor.loads(_raw_file(1, 1, 3, [0, 0, 0], stamps=[0, 1, 3]))
    assert e.value.code == "non_uniform_stride"


def test_nan_forward_fill():
    ts = tensor.loads(_raw_file(1, 1, 4, [1, np.nan, np.nan, 4]), nan_policy="ffill")
    np.testing.assert_array_equal(ts.values[0, 0], [1, 1, 1, 4])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_roundtrip_bytes(N, D, T, seed):
    rng = np.random.default_rng(seed)
    blob = _raw_file(N, D, T, rng.normal(size=N * D * T))
    assert tensor.dumps(tensor.loads(blob)) == blob


def test_save_load_file(tmp_path):
    ts = TensorSeries.from_array(np.arange(12.0).reshape(2, 2, 3))
    tensor.save(ts, tmp_path / "x.tts")
    back = tensor.load(tmp_path / "x.tts")
    np.testing.assert_array_equal(back.values, ts.values)
    assert back.timestamps == ts.timestamps


def test_normalize_constant_feature_flagged():
    ts = TensorSeries.from_array(np.array([[[2.0, 2.0, 2.0]]]))
    stats = tensor.fit_stats(ts)
    assert stats.constant[0]
    assert stats.warnings
    np.testing.assert_array_equal(tensor.normalize(ts, stats).values, ts.values)


def test_normalize_formula():
    ts = TensorSeries.from_array(np.array([[[0.0, 2.0]]]))
    stats = NormStats(np.array([1.0]), np.array([1.0]), np.array([False]))
    np.testing.assert_array_equal(tensor.normalize(ts, stats).values[0, 0], [-1.0, 1.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_denormalize_inverse(seed):
    rng = np.random.default_rng(seed)
    ts = TensorSeries.from_array(rng.normal(3.0, 5.0, size=(3, 2, 9)))
    stats = tensor.fit_stats(ts, [(0, 6)])
    back = tensor.denormalize(tensor.normalize(ts, stats), stats)
    np.testing.assert_allclose(back.values, ts.values, rtol=1e-12, atol=1e-12)


def test_stats_use_train_ranges_only():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(2, 2, 20))
    s1 = tensor.fit_stats(TensorSeries.from_array(v), [(0, 10)])
    v2 = v.copy()
    v2[:, :, 10:] += 100.0
    s2 = tensor.fit_stats(TensorSeries.from_array(v2), [(0, 10)])
    np.testing.assert_array_equal(s1.mean, s2.mean)
    np.testing.assert_array_equal(s1.std, s2.std)


def test_windows_examples():
    ts = TensorSeries.from_array(np.zeros((1, 1, 48)))
    w = tensor.windows(ts, 24, 24)
    assert len(w) == 1
    assert (w[0][0].start, w[0][0].stop, w[0][1].start, w[0][1].stop) == (0, 24, 24, 48)
    assert len(tensor.windows(TensorSeries.from_array(np.zeros((1, 1, 72))), 24, 24, stride=24)) == 2
    short = tensor.windows(TensorSeries.from_array(np.zeros((1, 1, 10))), 24, 1)
    assert len(short) == 0 and "shorter" in short.diagnostic


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 10), st.integers(1, 10), st.integers(1, 5))
def test_windows_stay_in_bounds(T, L, tau, stride):
    ts = TensorSeries.from_array(np.zeros((1, 1, T)))
    for inp, tgt in tensor.windows(ts, L, tau, stride=stride):
        assert 0 <= inp.start and inp.stop == tgt.start and tgt.stop <= T


def test_split_spec_rules():
    with pytest.raises(ValueError):
        SplitSpec(((0, 10),), ((5, 12),))
    s = SplitSpec.chronological(100, 0.7, 0.1)
    assert s.train_ranges == ((0, 70),) and s.validation_ranges == ((70, 80),) and s.test_ranges == ((80, 100),)
    assert SplitSpec.from_dict(s.to_dict()) == s
    with pytest.raises(ValueError):
        s.check(90)


def test_rotating_splits_disjoint():
    groups = tensor.rotating_splits(100, 5)
    assert len(groups) == 4
    for g in groups:
        idx = np.concatenate([g.indices(k) for k in ("train", "validation", "test")])
        assert np.unique(idx).size == idx.size == 100
