"""Two-layer ReLU MLP with hand-written backward pass.

Inputs may be a single vector ``(in,)`` or a batch ``(n, in)``; gradients are
summed over the batch.  Multiply-adds are tallied into the active
:class:`FlopCounter`, if any.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FrozenParameterError
from .linalg import DTYPE

_counter: contextvars.ContextVar = contextvars.ContextVar("flop_counter", default=None)


class FlopCounter:
    def __init__(self):
        self.madds = 0

    def add(self, n: int) -> None:
        self.madds += int(n)


@contextmanager
def count_flops():
    counter = FlopCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def tally(n: int) -> None:
    c = _counter.get()
    if c is not None:
        c.add(n)


PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class MlpCache:
    x: np.ndarray
    pre: np.ndarray
    act: np.ndarray
    squeeze: bool


class Mlp2:
    """``y = W2 relu(W1 x + b1) + b2``; ReLU'(0) is taken as 0."""

    def __init__(self, W1, b1, W2, b2):
        self.W1 = np.array(W1, dtype=DTYPE)
        self.b1 = np.array(b1, dtype=DTYPE)
        self.W2 = np.array(W2, dtype=DTYPE)
        self.b2 = np.array(b2, dtype=DTYPE)
        h, i = self.W1.shape
        o = self.W2.shape[0]
        if self.b1.shape != (h,) or self.W2.shape != (o, h) or self.b2.shape != (o,):
            raise DimensionError("inconsistent Mlp2 parameter shapes")
        self._frozen = False

    @classmethod
    def init(cls, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator,
             zero_output: bool = False) -> "Mlp2":
        W1 = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(hidden, in_dim))
        if zero_output:
            W2 = np.zeros((out_dim, hidden))
        else:
            W2 = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(out_dim, hidden))
        return cls(W1, np.zeros(hidden), W2, np.zeros(out_dim))

    @classmethod
    def zeros(cls, in_dim: int, hidden: int, out_dim: int) -> "Mlp2":
        return cls(np.zeros((hidden, in_dim)), np.zeros(hidden), np.zeros((out_dim, hidden)), np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[0]

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "Mlp2":
        for name in PARAM_NAMES:
            getattr(self, name).flags.writeable = False
        self._frozen = True
        return self

    def __setattr__(self, name, value):
        if name in PARAM_NAMES and getattr(self, "_frozen", False):
            raise FrozenParameterError(f"cannot reassign {name} of a frozen Mlp2")
        super().__setattr__(name, value)

    def parameters(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "Mlp2":
        return Mlp2(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        squeeze = x.ndim == 1
        X = x[None, :] if squeeze else x
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise DimensionError(f"Mlp2 expects input dim {self.in_dim}, got {x.shape}")
        pre = X @ self.W1.T + self.b1
        act = np.maximum(pre, 0.0)
        y = act @ self.W2.T + self.b2
        tally(X.shape[0] * (self.hidden * self.in_dim + self.out_dim * self.hidden))
        cache = MlpCache(X, pre, act, squeeze)
        return (y[0] if squeeze else y), cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache: MlpCache, dy, need_dx: bool = True):
        """Return ``(grads, dx)``; ``dx`` is None when ``need_dx`` is false."""
        dY = np.asarray(dy, dtype=DTYPE)
        if cache.squeeze:
            dY = dY[None, :]
        n = cache.x.shape[0]
        if dY.shape != (n, self.out_dim) or cache.pre.shape != (n, self.hidden):
            raise DimensionError("stale cache or upstream gradient shape mismatch")
        grads = {
            "W2": dY.T @ cache.act,
            "b2": dY.sum(axis=0),
        }
        dA = dY @ self.W2
        dH = dA * (cache.pre > 0.0)
        grads["W1"] = dH.T @ cache.x
        grads["b1"] = dH.sum(axis=0)
        work = 2 * self.out_dim * self.hidden + self.hidden * self.in_dim
        dx = None
        if need_dx:
            dx = dH @ self.W1
            work += self.hidden * self.in_dim
            if cache.squeeze:
                dx = dx[0]
        tally(n * work)
        return grads, dx

    def relu_pattern(self, cache: MlpCache) -> np.ndarray:
        return cache.pre > 0.0


def mlp2_forward(m: Mlp2, x):
    return m.forward(x)


def mlp2_backward(m: Mlp2, cache: MlpCache, dy):
    return m.backward(cache, dy)


def zero_grads(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def add_grads(into: dict, grads: dict, prefix: str = "") -> dict:
    for k, g in grads.items():
        key = prefix + k
        if key in into:
            into[key] = into[key] + g
        else:
            into[key] = g
    return into
