"""Online gated residual adapter.

The adapter ``g`` is a two-layer ReLU MLP ``(d + d_s) -> d -> d`` applied to
``[cf embedding; window summary]``; its output is added to the frozen base
latent, scaled by a sigmoid gate:

    z = z_base + sigmoid(w . [e; s]) * g([e; s])

Items and users use separate gate vectors.  By default the MLP itself is
shared between the two entity types (``cfg.shared_adapter``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .config import SUMMARY_DIM
from .errors import DimensionError, ValidationError
from .linalg import DTYPE, sigmoid
from .nn import Mlp2, tally
from .optim import EMA, OptimState
from .types import Interactions, JointLatent

SUMMARY_LANES = (
    "log_count",
    "count_share",
    "popularity_percentile",
    "share_delta",
    "co_cosine",
    "recency_count",
    "unique_counterparts",
    "bias",
)


@dataclass(frozen=True)
class WindowSummary:
    vector: np.ndarray
    window_id: int
    entity_id: object

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=DTYPE)
        if v.shape != (SUMMARY_DIM,) or not np.all(np.isfinite(v)):
            raise ValidationError("window summary must be a finite 8-vector")
        object.__setattr__(self, "vector", v)


def _safe_unit(X):
    n = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, n, out=np.zeros_like(X), where=n > 0)


class WindowSummarizer:
    """Summary vectors for every user and item of one window.

    ``events`` are the interactions inside the window, ``prev_events`` those
    of the preceding window (for the popularity delta).  ``span`` is the
    window's ``(start, end)`` time; the recency half-life is half its length.
    """

    def __init__(self, events: Interactions, n_users: int, n_items: int,
                 item_cf: np.ndarray, user_cf: np.ndarray,
                 prev_events: Interactions | None = None, span: tuple | None = None):
        self.n_users = n_users
        self.n_items = n_items
        self.total = len(events)
        if self.total == 0:
            self.users = np.zeros((n_users, SUMMARY_DIM))
            self.items = np.zeros((n_items, SUMMARY_DIM))
            return
        if span is None:
            span = (float(events.times.min()), float(events.times.max()))
        start, end = span
        half = (end - start) / 2.0
        if half > 0:
            w = np.exp2(-(end - events.times) / half)
        else:
            w = np.ones(self.total)
        prev = prev_events if prev_events is not None else Interactions.empty()

        inc = sparse.csr_matrix((np.ones(self.total), (events.users, events.items)),
                                shape=(n_users, n_items))
        inc.data[:] = 1.0  # duplicates collapse to presence
        self.users = self._lanes(events.users, prev.users, n_users, w, inc, "user", item_cf, user_cf)
        self.items = self._lanes(events.items, prev.items, n_items, w, inc, "item", item_cf, user_cf)

    def _lanes(self, ent, prev_ent, n, w, inc, kind, item_cf, user_cf):
        total = self.total
        count = np.bincount(ent, minlength=n).astype(DTYPE)
        out = np.zeros((n, SUMMARY_DIM))
        out[:, 0] = np.log1p(count)
        out[:, 1] = count / total
        sorted_counts = np.sort(count)
        out[:, 2] = np.searchsorted(sorted_counts, count, side="left") / n
        prev_share = np.zeros(n)
        if len(prev_ent):
            prev_share = np.bincount(prev_ent, minlength=n) / len(prev_ent)
        out[:, 3] = out[:, 1] - prev_share
        out[:, 5] = np.bincount(ent, weights=w, minlength=n)
        presence = inc if kind == "user" else inc.T.tocsr()
        out[:, 6] = np.diff(presence.indptr) / total
        out[:, 7] = 1.0

        active = np.flatnonzero(count)
        if active.size:
            unit_items = _safe_unit(item_cf)
            if kind == "user":
                sub = presence[active]                      # active users x items
                own = _safe_unit(user_cf[active])
                sims = np.asarray(sub.multiply(own @ unit_items.T).sum(axis=1)).ravel()
                k = np.diff(sub.indptr)
                tally(int(sub.nnz) * item_cf.shape[1])
            else:
                co = (inc.T @ inc).tocsr()
                co.setdiag(0.0)
                co.eliminate_zeros()
                co.data[:] = 1.0
                co = co[active]                             # active items x items
                own = unit_items[active]
                sims = np.asarray(co.multiply(own @ unit_items.T).sum(axis=1)).ravel()
                k = np.diff(co.indptr)
            out[active, 4] = np.divide(sims, k, out=np.zeros_like(sims), where=k > 0)
        return out

    def summary(self, kind: str, idx: int, window_id: int = 0, entity_id=None) -> WindowSummary:
        table = self.users if kind == "user" else self.items
        return WindowSummary(table[idx], window_id, idx if entity_id is None else entity_id)


def summarize_window(events: Interactions, entity: int, kind: str, catalog,
                     prev_events: Interactions | None = None, span: tuple | None = None,
                     window_id: int = 0) -> WindowSummary:
    """Summary of one user (``kind="user"``) or item within a window."""
    if kind not in ("user", "item"):
        raise ValidationError("kind must be 'user' or 'item'")
    s = WindowSummarizer(events, catalog.n_users, catalog.n_items, catalog.item_feats["cf"],
                         catalog.user_cf, prev_events, span)
    eid = (catalog.user_ids if kind == "user" else catalog.item_ids)[entity]
    return s.summary(kind, entity, window_id, eid)


def window_counts(events: Interactions, entity: int, kind: str) -> int:
    ent = events.users if kind == "user" else events.items
    return int(np.sum(ent == entity))


# -- gate, residual and stability ---------------------------------------------------

def gate(entity_features, summary, gate_w) -> float:
    x = np.concatenate([np.asarray(entity_features, DTYPE), np.asarray(summary, DTYPE)])
    gate_w = np.asarray(gate_w, DTYPE)
    if gate_w.shape != x.shape:
        raise DimensionError(f"gate vector {gate_w.shape} vs input {x.shape}")
    return float(sigmoid(gate_w @ x))


def dynamic_latent(base: JointLatent, entity_features, summary, state: "AdapterState",
                   kind: str = "item", use_ema: bool = False) -> JointLatent:
    if base.kind != "base":
        raise ValidationError("dynamic_latent expects a base latent")
    x = np.concatenate([np.asarray(entity_features, DTYPE), np.asarray(summary, DTYPE)])
    g_mlp, w = state.mlp_and_gate(kind, use_ema)
    if x.shape[0] != g_mlp.in_dim or base.dim != g_mlp.out_dim:
        raise DimensionError("adapter input or base latent has the wrong dim")
    alpha = float(sigmoid(w @ x))
    return JointLatent(base.vector + alpha * g_mlp(x), "dynamic")


def residual_forward(mlp: Mlp2, gate_w, X):
    """Gated residual ``sigmoid(X w) * g(X)`` for a batch of adapter inputs.

    Returns ``(residual, alpha, pattern, backward)``; ``backward(dr)`` gives
    ``(mlp_grads, d_gate_w)``.  Inputs are treated as constants.
    """
    out, cache = mlp.forward(X)
    alpha = sigmoid(X @ gate_w)
    tally(X.shape[0] * X.shape[1])

    def backward(dr):
        dalpha = np.sum(dr * out, axis=1)
        grads, _ = mlp.backward(cache, alpha[:, None] * dr, need_dx=False)
        dz = dalpha * alpha * (1.0 - alpha)
        tally(X.shape[0] * (X.shape[1] + out.shape[1]))
        return grads, X.T @ dz

    return alpha[:, None] * out, alpha, cache.pre > 0.0, backward


def ewc_penalty(params: dict, anchor: dict, importance: dict) -> float:
    total = 0.0
    for k, theta in params.items():
        if k in anchor:
            diff = theta - anchor[k]
            total += float(np.sum(importance[k] * diff * diff))
    return total


def stability_loss(z, z_base, weights, params: dict | None = None, anchor: dict | None = None,
                   importance: dict | None = None) -> float:
    """``|z - z_base|^2 / (2 sigma^2) + lambda_ewc * sum F (theta - theta*)^2``.

    The first term is the KL divergence between equal-variance isotropic
    Gaussians centred on ``z`` and ``z_base``.
    """
    if weights.sigma_sq <= 0:
        raise ValidationError("sigma_sq must be positive")
    z = np.asarray(z, DTYPE)
    zb = np.asarray(z_base, DTYPE)
    if z.shape != zb.shape:
        raise DimensionError("z and z_base differ in shape")
    diff = z - zb
    kl = float(np.sum(diff * diff)) / (2.0 * weights.sigma_sq)
    if params is None or anchor is None or importance is None:
        return kl
    return kl + weights.lambda_ewc * ewc_penalty(params, anchor, importance)


def fisher_from_grads(per_sample: list[dict]) -> dict:
    """Diagonal Fisher estimate: mean over samples of squared gradients."""
    if not per_sample:
        raise ValidationError("Fisher estimation needs a non-empty sample")
    out = {k: np.zeros_like(v) for k, v in per_sample[0].items()}
    for g in per_sample:
        for k, v in g.items():
            out[k] += v * v
    n = float(len(per_sample))
    return {k: v / n for k, v in out.items()}


# -- replay buffer ------------------------------------------------------------------

class ReplayBuffer:
    """FIFO ring buffer of ``(user, pos_item, neg_item, window_id, event)``
    tuples.  ``event`` is the position of the source interaction in the log,
    which lets a replayed tuple recover the history it was trained with."""

    FIELDS = ("user", "pos", "neg", "window", "event")

    def __init__(self, capacity: int = 1024):
        if capacity <= 0:
            raise ValidationError("replay capacity must be positive")
        self.capacity = capacity
        self._data = np.zeros((capacity, len(self.FIELDS)), dtype=np.int64)
        self._head = 0   # index of the oldest tuple
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def extend(self, tuples) -> None:
        tuples = np.asarray(tuples, dtype=np.int64).reshape(-1, len(self.FIELDS))
        for row in tuples[-self.capacity:] if len(tuples) > self.capacity else tuples:
            if self._size < self.capacity:
                self._data[(self._head + self._size) % self.capacity] = row
                self._size += 1
            else:
                self._data[self._head] = row
                self._head = (self._head + 1) % self.capacity

    def contents(self) -> np.ndarray:
        """Tuples oldest first."""
        idx = (self._head + np.arange(self._size)) % self.capacity
        return self._data[idx].copy()

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self._size == 0 or n <= 0:
            return np.zeros((0, len(self.FIELDS)), dtype=np.int64)
        n = min(n, self._size)
        pick = np.sort(rng.choice(self._size, size=n, replace=False))
        return self.contents()[pick]

    def windows(self) -> set:
        return set(int(w) for w in self.contents()[:, 3])

    def tensors(self, prefix="replay.") -> dict:
        return {prefix + "contents": self.contents()}

    @classmethod
    def restore(cls, capacity: int, contents: np.ndarray) -> "ReplayBuffer":
        buf = cls(capacity)
        buf.extend(contents)
        return buf


# -- adapter state ---------------------------------------------------------------

class AdapterState:
    """Trainable adapter parameters plus EMA shadow, EWC anchors and replay."""

    def __init__(self, cfg, rng):
        d, ds, h = cfg.d, cfg.d_s, cfg.adapter_width
        self.cfg = cfg
        self.g = Mlp2.init(d + ds, h, d, rng, zero_output=True)
        self.g_user = None if cfg.shared_adapter else Mlp2.init(d + ds, h, d, rng, zero_output=True)
        self.gate_item = np.zeros(d + ds)
        self.gate_user = np.zeros(d + ds)
        self.replay = ReplayBuffer(cfg.replay_capacity)
        self.optim = OptimState(lr=cfg.lr_adapter, weight_decay=cfg.weight_decay, beta1=cfg.beta1,
                                beta2=cfg.beta2, eps=cfg.eps)
        self.ema = EMA(self.params(), cfg.ema_decay)
        self.ewc_anchor: dict = {}
        self.ewc_importance: dict = {}
        self.window_counter = 0

    def params(self) -> dict:
        out = {f"adapter.g.{k}": v for k, v in self.g.parameters().items()}
        if self.g_user is not None:
            out.update({f"adapter.gu.{k}": v for k, v in self.g_user.parameters().items()})
        out["adapter.gate_item"] = self.gate_item
        out["adapter.gate_user"] = self.gate_user
        return out

    def _view(self, arrays: dict, prefix: str) -> Mlp2:
        return Mlp2(*(arrays[f"{prefix}.{k}"] for k in ("W1", "b1", "W2", "b2")))

    def mlp_and_gate(self, kind: str, use_ema: bool = False):
        arrays = self.ema.shadow if use_ema else self.params()
        if kind == "user":
            g = self._view(arrays, "adapter.gu" if self.g_user is not None else "adapter.g")
            return g, arrays["adapter.gate_user"]
        return self._view(arrays, "adapter.g"), arrays["adapter.gate_item"]

    def serving_arrays(self) -> dict:
        return self.ema.shadow if self.cfg.serve_ema else self.params()

    def refresh_anchor(self, importance: dict) -> None:
        self.ewc_anchor = {k: v.copy() for k, v in self.params().items()}
        self.ewc_importance = {k: np.asarray(v, DTYPE).copy() for k, v in importance.items()}

    def tensors(self) -> dict:
        out = dict(self.params())
        out.update({"ema/" + k: v for k, v in self.ema.shadow.items()})
        out.update({"ewc_anchor/" + k: v for k, v in self.ewc_anchor.items()})
        out.update({"ewc_importance/" + k: v for k, v in self.ewc_importance.items()})
        out.update(self.optim.tensors("adam/"))
        out.update(self.replay.tensors())
        return out

    def meta(self) -> dict:
        return {"optim": self.optim.meta(), "window_counter": self.window_counter}

    def load(self, tensors: dict, meta: dict) -> None:
        for k, v in self.params().items():
            v[...] = tensors[k]
        self.ema.shadow = {k: tensors["ema/" + k].copy() for k in self.params()}
        self.ewc_anchor = {k[len("ewc_anchor/"):]: v.copy() for k, v in tensors.items()
                           if k.startswith("ewc_anchor/")}
        self.ewc_importance = {k[len("ewc_importance/"):]: v.copy() for k, v in tensors.items()
                               if k.startswith("ewc_importance/")}
        self.optim = OptimState.restore(meta["optim"], {k: v for k, v in tensors.items() if k.startswith("adam/")},
                                        "adam/")
        self.replay = ReplayBuffer.restore(self.cfg.replay_capacity, tensors["replay.contents"])
        self.window_counter = int(meta["window_counter"])


def online_update(system, new, window_id: int, **kwargs):
    """One online pass for ``window_id``; see :func:`alignrec.training.online_update`."""
    from .training import online_update as _update

    return _update(system, new, window_id, **kwargs)


def estimate_fisher(system, tuples) -> dict:
    from .training import estimate_fisher as _fisher

    return _fisher(system, tuples)
