"""Offline pretraining and online adapter updates."""

from __future__ import annotations

import numpy as np

from .adapter import fisher_from_grads, residual_forward
from .data import user_history
from .errors import NonFiniteError, ValidationError
from .linalg import seeded_rng
from .nn import Mlp2, count_flops
from .optim import OptimState, adamw_step
from .system import TupleBatch


def sample_negatives(pos, n_items: int, rng) -> np.ndarray:
    """One uniform negative per positive, never equal to it."""
    pos = np.asarray(pos, dtype=np.int64)
    if n_items < 2:
        raise ValidationError("negative sampling needs at least 2 items")
    neg = rng.integers(0, n_items - 1, size=pos.shape)
    return neg + (neg >= pos)


def training_tuples(system, inter, rng, s_user=None, s_pos=None, s_neg=None, hist=None, anchor=None) -> TupleBatch:
    """Tuples for every event of ``inter``; history comes from ``inter`` itself
    unless given."""
    cfg = system.cfg
    n = len(inter)
    if hist is None:
        keys = np.arange(n)
        hist, anchor = user_history(inter.users, inter.items, keys, inter.users, keys, cfg.L)
    neg = sample_negatives(inter.items, system.catalog.n_items, rng)
    z = np.zeros((n, cfg.d_s))
    return TupleBatch(inter.users.copy(), inter.items.copy(), neg, hist, anchor,
                      z if s_user is None else s_user, z if s_pos is None else s_pos,
                      z if s_neg is None else s_neg)


def _dropout_masks(system, rng):
    p = system.cfg.modality_dropout
    if p <= 0:
        return None
    n = system.catalog.n_items
    return {m: rng.random(n) < p for m in ("txt", "vis", "aud")}


def pretrain(system, train, epochs: int | None = None, log=None) -> list:
    """Train fusion, projectors and evidence encoder on ``train``, then freeze.

    Ranking uses BPR with one fresh negative per positive each epoch.
    Returns the mean training loss of every epoch.
    """
    cfg = system.cfg
    if len(train) == 0:
        raise ValidationError("pretraining needs a non-empty interaction set")
    epochs = cfg.epochs if epochs is None else epochs
    rng = system.rng
    keys = np.arange(len(train))
    hist, anchor = user_history(train.users, train.items, keys, train.users, keys, cfg.L)
    opt = {"base": OptimState(lr=cfg.lr_base, weight_decay=cfg.weight_decay, beta1=cfg.beta1,
                              beta2=cfg.beta2, eps=cfg.eps),
           "proj": OptimState(lr=cfg.lr_proj, weight_decay=cfg.weight_decay, beta1=cfg.beta1,
                              beta2=cfg.beta2, eps=cfg.eps)}
    groups = ("base", "proj")
    params = {g: system.group_params(g) for g in groups}
    losses = []
    for epoch in range(epochs):
        tuples = training_tuples(system, train, rng, hist=hist, anchor=anchor)
        perm = rng.permutation(len(train))
        total, count = 0.0, 0
        for start in range(0, len(perm), cfg.batch):
            idx = perm[start:start + cfg.batch]
            loss, grads, _, _ = system.objective(tuples.take(idx), groups=groups, adapter=False,
                                                 drop=_dropout_masks(system, rng))
            for g in groups:
                adamw_step(params[g], {k: v for k, v in grads.items() if k in params[g]}, opt[g])
            total += loss * len(idx)
            count += len(idx)
        losses.append(total / count)
        if log is not None:
            log(f"epoch {epoch + 1}/{epochs} loss {losses[-1]:.5f}")
    system.freeze_offline()
    system.refresh_tables()
    system.trained = True
    system.history = losses
    return losses


def estimate_fisher(system, tuples: TupleBatch) -> dict:
    """Diagonal Fisher of the adapter: mean squared per-tuple ranking gradient."""
    if len(tuples) == 0:
        raise ValidationError("Fisher estimation needs a non-empty sample")
    per = []
    for i in range(len(tuples)):
        _, g, _, _ = system.objective(tuples.take(np.array([i])), groups=("adapter",), terms=("rank",))
        per.append(g)
    return fisher_from_grads(per)


def online_update(system, new: TupleBatch, window_id: int, rows=None, resolve=None, rng=None) -> dict:
    """One online pass over the new tuples plus a replay sample.

    ``rows`` are the replay records ``(user, pos, neg, window, event)`` of
    ``new``; ``resolve(records)`` rebuilds a :class:`TupleBatch` for replayed
    records.  Only adapter parameters change.  Returns loss statistics.
    """
    cfg = system.cfg
    st = system.adapter
    rng = seeded_rng([cfg.seed, window_id, 7]) if rng is None else rng
    if len(new) == 0:
        st.window_counter += 1
        return {"steps": 0, "loss": float("nan")}
    if len(st.replay) and resolve is not None:
        sample = st.replay.sample(cfg.fisher_samples, rng)
        importance = estimate_fisher(system, resolve(sample))
    else:
        importance = {k: np.zeros_like(v) for k, v in st.params().items()}
    st.refresh_anchor(importance)

    batch = new
    if len(st.replay) and resolve is not None and cfg.replay_sample > 0:
        batch = TupleBatch.concat([new, resolve(st.replay.sample(cfg.replay_sample, rng))])
    params = st.params()
    losses = []
    for _ in range(cfg.online_epochs):
        perm = rng.permutation(len(batch))
        for start in range(0, len(perm), cfg.batch):
            loss, grads, _, _ = system.objective(batch.take(perm[start:start + cfg.batch]), groups=("adapter",))
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite online loss in window {window_id}")
            adamw_step(params, grads, st.optim)
            st.ema.update(params)
            losses.append(loss)
    if rows is not None:
        st.replay.extend(rows)
    st.window_counter += 1
    return {"steps": len(losses), "loss": float(np.mean(losses))}


def adapter_step_flops(d: int, batch: int = 64, d_s: int = 8, hidden: int | None = None, seed: int = 0) -> int:
    """Multiply-adds of one adapter forward+backward on ``batch`` inputs."""
    rng = seeded_rng(seed)
    h = d if hidden is None else hidden
    g = Mlp2.init(d + d_s, h, d, rng)
    w = rng.normal(size=d + d_s)
    X = rng.normal(size=(batch, d + d_s))
    with count_flops() as fc:
        r, _, _, back = residual_forward(g, w, X)
        back(np.ones_like(r))
    return fc.madds
