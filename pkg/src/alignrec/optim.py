"""AdamW with decoupled weight decay, plus an EMA parameter shadow."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FrozenParameterError, NonFiniteError


@dataclass
class OptimState:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def tensors(self, prefix: str) -> dict:
        out = {}
        for k in sorted(self.m):
            out[f"{prefix}m/{k}"] = self.m[k]
            out[f"{prefix}v/{k}"] = self.v[k]
        return out

    def meta(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps, "step": self.step}

    @classmethod
    def restore(cls, meta: dict, tensors: dict, prefix: str) -> "OptimState":
        st = cls(**meta)
        for key, arr in tensors.items():
            if key.startswith(prefix + "m/"):
                st.m[key[len(prefix) + 2:]] = arr.copy()
            elif key.startswith(prefix + "v/"):
                st.v[key[len(prefix) + 2:]] = arr.copy()
        return st


def adamw_step(params: dict, grads: dict, state: OptimState) -> dict:
    """Update ``params`` in place and return them.

    Only names present in ``grads`` are touched.  Decay is applied to the
    pre-update value: ``p -= lr * (mhat / (sqrt(vhat) + eps) + wd * p)``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        p = params[name]
        if p.shape != g.shape:
            raise DimensionError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        if not p.flags.writeable:
            raise FrozenParameterError(f"parameter {name} is frozen")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p
        p -= state.lr * update
    return params


class EMA:
    """Exponential moving average of a set of named arrays."""

    def __init__(self, params: dict, decay: float):
        self.decay = decay
        self.shadow = {k: v.copy() for k, v in params.items()}

    def update(self, params: dict) -> None:
        d = self.decay
        for k, v in params.items():
            s = self.shadow[k]
            s *= d
            s += (1.0 - d) * v


def ema_update(shadow: float, value: float, decay: float) -> float:
    return decay * shadow + (1.0 - decay) * value
