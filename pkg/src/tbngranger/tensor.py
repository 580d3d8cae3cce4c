"""Tensor time series container, TTS file format, normalization and windowing.

A tensor time series holds ``values[N, D, T]``: N locations, D features and
T uniformly spaced integer timestamps (hours).

TTS layout (all little-endian)::

    b"TTS1"
    u64 N, u64 D, u64 T
    u64 meta_len, meta_len bytes of UTF-8 JSON
        {"location_ids": [...], "feature_names": [...], "timestamps": [...]}
    N*D*T float32, row-major with N outermost and T innermost

Metadata is written as compact JSON with keys in the order above, so a file
produced by :func:`save` round-trips byte for byte.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"TTS1"
_HEADER = struct.Struct("<4sQQQ")
_U64 = struct.Struct("<Q")


class TTSError(ValueError):
    """Invalid tensor time series. ``code`` identifies the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


@dataclass(frozen=True, eq=False)
class TensorSeries:
    values: np.ndarray
    location_ids: tuple[str, ...]
    feature_names: tuple[str, ...]
    timestamps: tuple[int, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "location_ids", tuple(str(s) for s in self.location_ids))
        object.__setattr__(self, "feature_names", tuple(str(s) for s in self.feature_names))
        object.__setattr__(self, "timestamps", tuple(int(t) for t in self.timestamps))
        _validate(self)
        values.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]

    @property
    def T(self) -> int:
        return self.values.shape[2]

    @classmethod
    def from_array(cls, values, location_ids=None, feature_names=None, timestamps=None, start=0):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3:
            raise TTSError("axis_mismatch", f"expected a 3-axis array, got shape {values.shape}")
        N, D, T = values.shape
        return cls(
            values,
            location_ids if location_ids is not None else [f"loc{i}" for i in range(N)],
            feature_names if feature_names is not None else [f"f{d}" for d in range(D)],
            timestamps if timestamps is not None else list(range(start, start + T)),
        )

    def with_values(self, values) -> "TensorSeries":
        return TensorSeries(values, self.location_ids, self.feature_names, self.timestamps)

    def slice_time(self, start: int, end: int) -> "TensorSeries":
        if not 0 <= start < end <= self.T:
            raise IndexError(f"time slice [{start}, {end}) outside [0, {self.T})")
        return TensorSeries(
            self.values[:, :, start:end], self.location_ids, self.feature_names, self.timestamps[start:end]
        )


def _validate(ts: TensorSeries) -> None:
    v = ts.values
    if v.ndim != 3:
        raise TTSError("axis_mismatch", f"values must have 3 axes, got {v.ndim}")
    N, D, T = v.shape
    for name, meta, n in (("location_ids", ts.location_ids, N), ("feature_names", ts.feature_names, D),
                          ("timestamps", ts.timestamps, T)):
        if len(meta) != n:
            raise TTSError("axis_mismatch", f"{name} has {len(meta)} entries but the axis has length {n}")
    stamps = np.asarray(ts.timestamps, dtype=np.int64)
    if T > 1:
        steps = np.diff(stamps)
        if np.any(steps <= 0):
            raise TTSError("non_monotone_timestamps", "timestamps must be strictly increasing")
        if np.any(steps != steps[0]):
            raise TTSError("non_uniform_stride", "timestamps must have a uniform stride")
    if not np.all(np.isfinite(v)):
        raise TTSError("nan_payload", "values contain NaN or Inf")


def forward_fill(values: np.ndarray) -> np.ndarray:
    """Fill non-finite cells with the last finite value along the time axis."""
    out = np.array(values, dtype=np.float64)
    bad = ~np.isfinite(out)
    if bad[..., 0].any():
        raise TTSError("nan_payload", "cannot forward-fill: series starts with a missing value")
    for t in range(1, out.shape[-1]):
        m = bad[..., t]
        out[..., t][m] = out[..., t - 1][m]
    return out


def _meta_bytes(ts: TensorSeries) -> bytes:
    meta = {
        "location_ids": list(ts.location_ids),
        "feature_names": list(ts.feature_names),
        "timestamps": list(ts.timestamps),
    }
    return json.dumps(meta, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def dumps(ts: TensorSeries) -> bytes:
    meta = _meta_bytes(ts)
    payload = np.ascontiguousarray(ts.values, dtype="<f4").tobytes()
    return _HEADER.pack(MAGIC, ts.N, ts.D, ts.T) + _U64.pack(len(meta)) + meta + payload


def loads(data: bytes, nan_policy: str = "reject") -> TensorSeries:
    if len(data) < _HEADER.size + _U64.size:
        raise TTSError("malformed_header", "file too short for a TTS header")
    magic, N, D, T = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TTSError("malformed_header", f"bad magic {magic!r}")
    pos = _HEADER.size
    (meta_len,) = _U64.unpack_from(data, pos)
    pos += _U64.size
    if pos + meta_len > len(data):
        raise TTSError("malformed_header", "metadata block runs past end of file")
    try:
        meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
        locs, feats, stamps = meta["location_ids"], meta["feature_names"], meta["timestamps"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise TTSError("malformed_header", f"unreadable metadata: {exc}") from None
    pos += meta_len
    if len(locs) != N or len(feats) != D or len(stamps) != T:
        raise TTSError(
            "axis_mismatch",
            f"header declares N={N}, D={D}, T={T} but metadata lists "
            f"{len(locs)} locations, {len(feats)} features, {len(stamps)} timestamps",
        )
    expected = N * D * T * 4
    if len(data) - pos != expected:
        raise TTSError("truncated", f"payload has {len(data) - pos} bytes, expected {expected}")
    values = np.frombuffer(data, dtype="<f4", count=N * D * T, offset=pos).astype(np.float64).reshape(N, D, T)
    if not np.all(np.isfinite(values)):
        if nan_policy == "ffill":
            values = forward_fill(values)
        else:
            raise TTSError("nan_payload", "payload contains NaN or Inf")
    return TensorSeries(values, locs, feats, stamps)


def save(ts: TensorSeries, path) -> None:
    Path(path).write_bytes(dumps(ts))


def load(path, nan_policy: str = "reject") -> TensorSeries:
    """Read and validate a TTS file. ``nan_policy`` is ``"reject"`` or ``"ffill"``."""
    return loads(Path(path).read_bytes(), nan_policy=nan_policy)


# --------------------------------------------------------------------------- splits

Range = tuple[int, int]


@dataclass(frozen=True)
class SplitSpec:
    train_ranges: tuple[Range, ...]
    validation_ranges: tuple[Range, ...] = ()
    test_ranges: tuple[Range, ...] = ()

    def __post_init__(self):
        for name in ("train_ranges", "validation_ranges", "test_ranges"):
            object.__setattr__(self, name, tuple((int(a), int(b)) for a, b in getattr(self, name)))
        spans = sorted(self.all_ranges())
        for a, b in spans:
            if not 0 <= a < b:
                raise ValueError(f"bad interval [{a}, {b})")
        for (a0, b0), (a1, b1) in zip(spans, spans[1:]):
            if a1 < b0:
                raise ValueError(f"intervals [{a0}, {b0}) and [{a1}, {b1}) overlap")

    def all_ranges(self) -> list[Range]:
        return [*self.train_ranges, *self.validation_ranges, *self.test_ranges]

    def check(self, T: int) -> None:
        for a, b in self.all_ranges():
            if b > T:
                raise ValueError(f"interval [{a}, {b}) exceeds series length {T}")

    def indices(self, kind: str) -> np.ndarray:
        ranges = {"train": self.train_ranges, "validation": self.validation_ranges, "test": self.test_ranges}[kind]
        if not ranges:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(a, b) for a, b in ranges])

    @classmethod
    def chronological(cls, T: int, train: float = 0.7, validation: float = 0.1) -> "SplitSpec":
        a = int(round(T * train))
        b = int(round(T * (train + validation)))
        return cls(((0, a),), ((a, b),) if b > a else (), ((b, T),) if T > b else ())

    def to_dict(self) -> dict:
        return {k: [list(r) for r in getattr(self, k)] for k in ("train_ranges", "validation_ranges", "test_ranges")}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(*(tuple(tuple(r) for r in d.get(k, ())) for k in ("train_ranges", "validation_ranges", "test_ranges")))


def rotating_splits(T: int, n_blocks: int = 5) -> list[SplitSpec]:
    """Leave-one-block-out groups over ``n_blocks`` equal time blocks.

    Group g tests on block g, validates on block g-1 (cyclically) and trains
    on the remaining blocks, giving ``n_blocks - 1`` groups.
    """
    edges = np.linspace(0, T, n_blocks + 1).round().astype(int)
    blocks = [(int(edges[i]), int(edges[i + 1])) for i in range(n_blocks)]
    groups = []
    for g in range(n_blocks - 1):
        val = (g - 1) % n_blocks
        train = [blocks[(g + k) % n_blocks] for k in range(1, n_blocks - 1)]
        groups.append(SplitSpec(tuple(sorted(train)), (blocks[val],), (blocks[g],)))
    return groups


# --------------------------------------------------------------------------- normalization


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "constant": self.constant.tolist(),
                "warnings": list(self.warnings)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float),
                   np.asarray(d["constant"], bool), list(d.get("warnings", [])))


def fit_stats(ts: TensorSeries, train_ranges: Sequence[Range] | None = None) -> NormStats:
    """Per-feature mean/std pooled over locations and the train time ranges."""
    if train_ranges:
        idx = np.concatenate([np.arange(a, b) for a, b in train_ranges])
        block = ts.values[:, :, idx]
    else:
        block = ts.values
    flat = np.moveaxis(block, 1, 0).reshape(ts.D, -1)
    mean = flat.mean(axis=1)
    std = flat.std(axis=1)
    constant = ~(std > 0)
    notes = []
    for d in np.flatnonzero(constant):
        notes.append(f"feature {ts.feature_names[d]!r} is constant on the train ranges; passed through unscaled")
        logger.warning(notes[-1])
    return NormStats(mean, std, constant, notes)


def normalize(ts: TensorSeries, stats: NormStats) -> TensorSeries:
    mean = np.where(stats.constant, 0.0, stats.mean)
    std = np.where(stats.constant, 1.0, stats.std)
    return ts.with_values((ts.values - mean[None, :, None]) / std[None, :, None])


def denormalize(ts: TensorSeries, stats: NormStats) -> TensorSeries:
    mean = np.where(stats.constant, 0.0, stats.mean)
    std = np.where(stats.constant, 1.0, stats.std)
    return ts.with_values(ts.values * std[None, :, None] + mean[None, :, None])


# --------------------------------------------------------------------------- windowing


@dataclass(frozen=True, eq=False)
class SeriesWindow:
    source: TensorSeries = field(repr=False)
    start: int
    length: int

    def __post_init__(self):
        if self.start < 0 or self.length < 1 or self.start + self.length > self.source.T:
            raise IndexError(f"window [{self.start}, {self.start + self.length}) outside [0, {self.source.T})")

    @property
    def stop(self) -> int:
        return self.start + self.length

    @property
    def values(self) -> np.ndarray:
        return self.source.values[:, :, self.start:self.stop]


class WindowList(list):
    """List of (input, target) window pairs; ``diagnostic`` explains an empty result."""

    diagnostic: str | None = None


def windows(ts: TensorSeries, L: int, horizon: int, stride: int | None = None,
            start: int = 0, stop: int | None = None) -> WindowList:
    """Chronological (input, target) pairs with the input directly before the target.

    ``stride`` defaults to ``horizon`` so that targets never overlap. Pairs are
    confined to ``[start, stop)``.
    """
    if L < 1 or horizon < 1:
        raise ValueError("L and horizon must be >= 1")
    stride = horizon if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be >= 1")
    stop = ts.T if stop is None else stop
    out = WindowList()
    s = start
    while s + L + horizon <= stop:
        out.append((SeriesWindow(ts, s, L), SeriesWindow(ts, s + L, horizon)))
        s += stride
    if not out:
        out.diagnostic = (
            f"series span {stop - start} is shorter than L + horizon = {L + horizon}; no windows produced"
        )
        logger.warning(out.diagnostic)
    return out
