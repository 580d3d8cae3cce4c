"""Parameters, optimizers and the two-layer MLP used throughout the models."""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)


class Param(Tensor):
    """Trainable leaf; ``grad`` accumulates across backward passes until cleared."""

    __slots__ = ()

    def __init__(self, value, name: str | None = None):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True, name=name)


class ParamStore:
    """Named parameter slots plus Adam moments and step count."""

    def __init__(self):
        self.params: OrderedDict[str, Param] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Param:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Param(value, name)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((prefix + k, p.value.copy()) for k, p in self.params.items())

    def load_state(self, arrays: dict, prefix: str = "", strict: bool = True) -> None:
        for k, p in self.params.items():
            key = prefix + k
            if key not in arrays:
                if strict:
                    raise KeyError(f"checkpoint lacks parameter {key!r}")
                continue
            a = np.asarray(arrays[key], dtype=np.float64)
            if a.size != p.value.size:
                raise ValueError(f"parameter {key!r}: checkpoint has {a.size} values, model needs {p.value.size}")
            p.value = a.reshape(p.value.shape).copy()

    def flat(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.params.values()]) if self.params else np.zeros(0)

    def set_flat(self, x: np.ndarray) -> None:
        pos = 0
        for p in self.params.values():
            n = p.value.size
            p.value = x[pos:pos + n].reshape(p.value.shape).copy()
            pos += n

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([
            (p.grad if p.grad is not None else np.zeros_like(p.value)).ravel() for p in self.params.values()
        ]) if self.params else np.zeros(0)


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, names=None, lr_scale: dict | None = None) -> list[str]:
    """One Adam update of every slot with a gradient. Returns skipped (non-finite) slots.

    ``lr_scale`` maps slot-name prefixes to learning-rate multipliers.
    """
    store.step_count += 1
    t = store.step_count
    skipped = []
    for name, p in store.params.items():
        if names is not None and name not in names:
            continue
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            skipped.append(name)
            logger.warning("non-finite gradient for %s; slot skipped", name)
            continue
        m = store.m.get(name)
        v = store.v.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        store.m[name], store.v[name] = m, v
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        rate = lr
        if lr_scale:
            for prefix, mult in lr_scale.items():
                if name.startswith(prefix):
                    rate = lr * mult
        p.value = p.value - rate * mhat / (np.sqrt(vhat) + eps)
    return skipped


def sgd_step(store: ParamStore, lr: float = 1e-2) -> list[str]:
    skipped = []
    for name, p in store.params.items():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            skipped.append(name)
            continue
        p.value = p.value - lr * p.grad
    return skipped


ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu, "identity": ad.identity}


@dataclass
class Mlp2:
    """``act(x W1 + b1) W2 + b2`` along the last axis; parameters live in a store."""

    store: ParamStore
    prefix: str
    n_in: int
    n_hidden: int
    n_out: int
    activation: str = "tanh"

    @classmethod
    def create(cls, store: ParamStore, prefix: str, n_in: int, n_hidden: int, n_out: int,
               rng: np.random.Generator, activation: str = "tanh", init: str = "glorot") -> "Mlp2":
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if init == "identity":
            if not n_in == n_hidden == n_out:
                raise ValueError("identity init needs n_in == n_hidden == n_out")
            W1, W2 = np.eye(n_in), np.eye(n_in)
        else:
            W1 = rng.uniform(-1, 1, (n_in, n_hidden)) * np.sqrt(6.0 / (n_in + n_hidden))
            W2 = rng.uniform(-1, 1, (n_hidden, n_out)) * np.sqrt(6.0 / (n_hidden + n_out))
        store.add(prefix + "W1", W1)
        store.add(prefix + "b1", np.zeros(n_hidden))
        store.add(prefix + "W2", W2)
        store.add(prefix + "b2", np.zeros(n_out))
        return cls(store, prefix, n_in, n_hidden, n_out, activation)

    def __call__(self, x) -> Tensor:
        s, p = self.store, self.prefix
        h = ACTIVATIONS[self.activation](ad.add_bias(ad.linear(x, s[p + "W1"]), s[p + "b1"]))
        return ad.add_bias(ad.linear(h, s[p + "W2"]), s[p + "b2"])

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        s, p = self.store, self.prefix
        h = x @ s[p + "W1"].value + s[p + "b1"].value
        if self.activation == "tanh":
            h = np.tanh(h)
        elif self.activation == "relu":
            h = np.maximum(h, 0.0)
        return h @ s[p + "W2"].value + s[p + "b2"].value


def value_and_grad(fn, store: ParamStore, *args, **kwargs):
    """Run ``fn`` (returning a scalar Tensor), backprop, return (value, flat gradient)."""
    store.zero_grad()
    out = fn(*args, **kwargs)
    ad.backward(out)
    return float(out.value), store.flat_grad()
