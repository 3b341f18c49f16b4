"""Evidence extraction, evidence soft tokens and faithfulness.

Evidence for a (user, item) pair is the item's top-k collaborative
neighbours (cosine over frozen CF embeddings) plus the item's attributes
weighted by a bilinear attention against the user latent.  The encoded
evidence matrix has ``E`` rows: the first ``min(k, E // 2)`` rows hold
neighbours, then up to ``m_attr`` attribute rows, then zeros.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .linalg import DTYPE, softmax
from .nn import Mlp2


@dataclass(frozen=True)
class EvidencePack:
    neighbors: tuple = ()     # ((item_index, similarity), ...) sorted desc
    attributes: tuple = ()    # ((attr_index, weight), ...) sorted desc

    def __post_init__(self):
        nb = tuple((int(i), float(s)) for i, s in self.neighbors)
        at = tuple((int(a), float(w)) for a, w in self.attributes)
        sims = [s for _, s in nb]
        if any(b > a for a, b in zip(sims, sims[1:])):
            raise ValidationError("neighbours must be sorted by similarity, descending")
        ws = [w for _, w in at]
        if any(w < 0 or w > 1 for w in ws) or sum(ws) > 1.0 + 1e-9:
            raise ValidationError("attribute weights must form a sub-distribution")
        object.__setattr__(self, "neighbors", nb)
        object.__setattr__(self, "attributes", at)

    @property
    def empty(self) -> bool:
        return not self.neighbors and not self.attributes

    def to_json(self, catalog=None) -> dict:
        if catalog is None:
            return {"neighbors": [list(n) for n in self.neighbors],
                    "attributes": [list(a) for a in self.attributes]}
        return {
            "neighbors": [{"item_id": catalog.item_ids[i], "title": catalog.item_titles[i], "similarity": s}
                          for i, s in self.neighbors],
            "attributes": [{"attr_id": a, "name": catalog.attr_names[a], "weight": w}
                           for a, w in self.attributes],
        }


# -- neighbours --------------------------------------------------------------

def _unit_safe(X):
    X = np.asarray(X, DTYPE)
    n = np.linalg.norm(X, axis=-1, keepdims=True)
    return np.divide(X, n, out=np.zeros_like(X), where=n > 0)


def _order_desc(sims: np.ndarray, ids: np.ndarray) -> np.ndarray:
    return np.lexsort((ids, -sims))


def top_k_neighbors(item: int, catalog_cf, k: int) -> list:
    """Exact top-``k`` items by cosine to ``item``; ties go to the lower index."""
    cf = np.asarray(catalog_cf, DTYPE)
    n = cf.shape[0]
    if n < 2:
        raise ValidationError("neighbour search needs at least 2 catalog items")
    if k < 1:
        raise ValidationError("k must be >= 1")
    U = _unit_safe(cf)
    sims = U @ U[item]
    ids = np.arange(n)
    keep = ids != item
    sims, ids = sims[keep], ids[keep]
    order = _order_desc(sims, ids)[:k]
    return [(int(ids[o]), float(sims[o])) for o in order]


def neighbor_table(catalog_cf, k: int, block: int = 1024):
    """``(idx, sims)`` arrays of shape (n, k) for every item at once."""
    cf = np.asarray(catalog_cf, DTYPE)
    n = cf.shape[0]
    if n < 2:
        raise ValidationError("neighbour search needs at least 2 catalog items")
    k = min(k, n - 1)
    U = _unit_safe(cf)
    idx = np.zeros((n, k), dtype=np.int64)
    sims = np.zeros((n, k))
    ids = np.arange(n)
    for start in range(0, n, block):
        rows = np.arange(start, min(n, start + block))
        S = U[rows] @ U.T
        S[np.arange(len(rows)), rows] = -np.inf
        for r, i in enumerate(rows):
            order = np.lexsort((ids, -S[r]))[:k]
            idx[i] = order
            sims[i] = S[r, order]
    return idx, sims


# -- attribute attention --------------------------------------------------------

def attend_attributes(user_latent, item_attrs, attr_table, W_a, m_attr: int = 4) -> list:
    """Softmax attention of the user latent over an item's attributes.

    ``score_a = user . W_a . table[a]``; the ``m_attr`` largest weights are
    kept (ties to the lower attribute id) without renormalisation.
    """
    attrs = np.asarray(tuple(item_attrs), dtype=np.int64)
    if attrs.size == 0:
        return []
    u = np.asarray(user_latent, DTYPE)
    scores = (u @ W_a) @ np.asarray(attr_table, DTYPE)[attrs].T
    w = softmax(scores)
    order = np.lexsort((attrs, -w))[:m_attr]
    return [(int(attrs[o]), float(w[o])) for o in order]


# -- encoder ---------------------------------------------------------------------

class EvidenceEncoder:
    """Row encoders for neighbours (``[z_base; sim]``) and attributes
    (``[embedding; weight]``), the learned attribute table and ``W_a``."""

    def __init__(self, nbr: Mlp2, attr: Mlp2, table: np.ndarray, W_a: np.ndarray):
        self.nbr = nbr
        self.attr = attr
        self.table = np.asarray(table, DTYPE)
        self.W_a = np.asarray(W_a, DTYPE)

    @classmethod
    def init(cls, cfg, n_attrs: int, rng) -> "EvidenceEncoder":
        d = cfg.d
        nbr = Mlp2.init(d + 1, cfg.hidden, cfg.d_ell, rng)
        attr = Mlp2.init(d + 1, cfg.hidden, cfg.d_ell, rng)
        table = rng.normal(0.0, 1.0 / np.sqrt(d), size=(max(n_attrs, 1), d))
        W_a = np.eye(d) + rng.normal(0.0, 0.1 / np.sqrt(d), size=(d, d))
        return cls(nbr, attr, table, W_a)

    def freeze(self):
        self.nbr.freeze()
        self.attr.freeze()
        self.table.flags.writeable = False
        self.W_a.flags.writeable = False
        return self

    def params(self, prefix="evid.") -> dict:
        out = {f"{prefix}nbr.{k}": v for k, v in self.nbr.parameters().items()}
        out.update({f"{prefix}attr.{k}": v for k, v in self.attr.parameters().items()})
        out[f"{prefix}table"] = self.table
        out[f"{prefix}W_a"] = self.W_a
        return out


def layout(E: int, k: int, m_attr: int) -> tuple[int, int]:
    """Number of neighbour rows and attribute rows in an ``E``-row block."""
    n_nbr = min(k, E // 2)
    return n_nbr, max(0, min(m_attr, E - n_nbr))


def encode_evidence(pack: EvidencePack, encoder: EvidenceEncoder, item_latents, E: int) -> np.ndarray:
    """``(E, d_ell)`` evidence tokens for one pack; an empty pack gives zeros.

    ``item_latents`` maps item index to its base latent (array indexable).
    """
    d_ell = encoder.nbr.out_dim
    out = np.zeros((E, d_ell))
    if pack.empty or E == 0:
        return out
    nbrs = sorted(pack.neighbors, key=lambda t: (-t[1], t[0]))[:E // 2]
    for r, (i, s) in enumerate(nbrs):
        out[r] = encoder.nbr(np.concatenate([np.asarray(item_latents[i], DTYPE), [s]]))
    start = len(nbrs)
    attrs = sorted(pack.attributes, key=lambda t: (-t[1], t[0]))[:E - start]
    for r, (a, w) in enumerate(attrs):
        out[start + r] = encoder.attr(np.concatenate([encoder.table[a], [w]]))
    return out


@dataclass
class EvidenceBatch:
    """Batched evidence inputs for ``B`` requests."""

    valid: np.ndarray        # (B,) anchor present
    nbr_idx: np.ndarray      # (B, kn) item indices
    nbr_sims: np.ndarray     # (B, kn)
    attr_idx: np.ndarray     # (B, A)
    attr_valid: np.ndarray   # (B, A)


def evidence_forward(enc: EvidenceEncoder, h, zb_nbr, eb: EvidenceBatch, n_attr_rows: int):
    """Sum of evidence rows per request and a backward closure.

    ``zb_nbr`` is ``(B, kn, d)``.  Returns ``(evid_sum, signature, backward)``
    where ``backward(d_sum)`` gives ``(grads, dh, dzb_nbr)``.
    """
    B = h.shape[0]
    d_ell = enc.nbr.out_dim
    evid = np.zeros((B, d_ell))
    sig = []
    vb = np.flatnonzero(eb.valid)
    kn = eb.nbr_idx.shape[1]

    nbr_cache = None
    if kn and vb.size:
        X = np.concatenate([zb_nbr[vb], eb.nbr_sims[vb][..., None]], axis=2).reshape(-1, zb_nbr.shape[2] + 1)
        out, nbr_cache = enc.nbr.forward(X)
        evid[vb] += out.reshape(vb.size, kn, d_ell).sum(axis=1)
        sig.append(nbr_cache.pre > 0)

    attr_state = None
    if n_attr_rows and vb.size and eb.attr_idx.shape[1]:
        aidx = eb.attr_idx[vb]
        aval = eb.attr_valid[vb]
        hw = h[vb] @ enc.W_a
        T = enc.table[aidx]                                  # (V, A, d)
        sc = np.einsum("vd,vad->va", hw, T)
        sc = np.where(aval, sc, -np.inf)
        has = aval.any(axis=1)
        w = np.zeros_like(sc)
        w[has] = softmax(sc[has], axis=1)
        # rank by weight desc, attribute id asc; keep the top n_attr_rows valid ones
        order = np.lexsort((aidx, -w), axis=1)
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.arange(order.shape[1])[None, :].repeat(order.shape[0], 0), axis=1)
        kept = aval & (rank < n_attr_rows)
        sig.append(kept)
        kv, ka = np.nonzero(kept)
        acache = None
        if kv.size:
            X = np.concatenate([T[kv, ka], w[kv, ka][:, None]], axis=1)
            out, acache = enc.attr.forward(X)
            np.add.at(evid, vb[kv], out)
            sig.append(acache.pre > 0)
        attr_state = (vb, aidx, aval, hw, T, w, kv, ka, acache, has)

    def backward(d_sum, need_dh=True):
        grads = {}
        dh = np.zeros_like(h) if need_dh else None
        dzb = np.zeros_like(zb_nbr)
        if nbr_cache is not None:
            dout = np.repeat(d_sum[vb], kn, axis=0)
            g, dX = enc.nbr.backward(nbr_cache, dout)
            grads.update({f"nbr.{k}": v for k, v in g.items()})
            dzb[vb] = dX.reshape(vb.size, kn, -1)[..., :-1]
        if attr_state is not None:
            vb_, aidx, aval, hw, T, w, kv, ka, acache, has = attr_state
            dT = np.zeros_like(T)
            dw = np.zeros_like(w)
            if acache is not None:
                g, dX = enc.attr.backward(acache, d_sum[vb_[kv]])
                grads.update({f"attr.{k}": v for k, v in g.items()})
                dT[kv, ka] += dX[:, :-1]
                dw[kv, ka] = dX[:, -1]
            dsc = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
            dsc = np.where(aval, dsc, 0.0)
            dhw = np.einsum("va,vad->vd", dsc, T)
            dT += dsc[..., None] * hw[:, None, :]
            grads["W_a"] = h[vb_].T @ dhw
            dtable = np.zeros_like(enc.table)
            np.add.at(dtable, aidx[aval], dT[aval])
            grads["table"] = dtable
            if need_dh:
                dh[vb_] += dhw @ enc.W_a.T
        return grads, dh, dzb

    return evid, sig, backward


# -- faithfulness -------------------------------------------------------------------

def faithfulness_loss(acc_with: float, acc_without: float, delta: float = 0.05, mode: str = "prose") -> float:
    """Hinge on the accuracy gained from evidence.

    ``prose`` mode penalises evidence whose removal costs less than
    ``delta``: ``max(0, acc_without - acc_with + delta)``.  ``formula`` mode
    is the literal ``max(0, acc_with - acc_without - delta)``.
    """
    if mode == "prose":
        return max(0.0, acc_without - acc_with + delta)
    if mode == "formula":
        return max(0.0, acc_with - acc_without - delta)
    raise ValidationError(f"unknown faithfulness mode {mode!r}")


def faithfulness_metric(score_fn, requests) -> tuple[float, float, float]:
    """Hit@1 with evidence, with evidence zeroed, and their difference.

    ``score_fn(requests, zero_evidence)`` returns a ``(R, C)`` score matrix
    whose column 0 is the positive candidate.  ``requests.cands`` holds the
    candidate item ids used to break score ties (lower id first).
    """
    from .metrics import positive_rank

    if len(requests) == 0:
        raise ValidationError("faithfulness needs a non-empty evaluation set")
    hits = []
    for zero in (False, True):
        ranks = positive_rank(np.asarray(score_fn(requests, zero)), requests.cands)
        hits.append(float(np.mean(ranks == 1)))
    return hits[0], hits[1], hits[0] - hits[1]


# -- cache ------------------------------------------------------------------------

DAY = 86400.0


@dataclass
class EvidenceCache:
    """Per-item neighbour/attribute dictionaries persisted as JSON."""

    built_at: float
    entries: dict = field(default_factory=dict)
    max_age: float = DAY

    def is_stale(self, now: float | None = None) -> bool:
        now = time.time() if now is None else now
        return now - self.built_at > self.max_age

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps({"built_at": self.built_at, "max_age": self.max_age,
                                   "entries": self.entries}, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "EvidenceCache":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(raw["built_at"], raw["entries"], raw.get("max_age", DAY))

    @classmethod
    def build(cls, catalog, k: int, now: float | None = None, max_age: float = DAY) -> "EvidenceCache":
        idx, sims = neighbor_table(catalog.item_feats["cf"], k)
        entries = {}
        for i, iid in enumerate(catalog.item_ids):
            entries[str(iid)] = {
                "neighbors": [[catalog.item_ids[j], float(s)] for j, s in zip(idx[i], sims[i])],
                "attributes": list(catalog.item_attrs[i]),
            }
        return cls(time.time() if now is None else now, entries, max_age)


def load_or_rebuild(path, catalog, k: int, now: float | None = None, force: bool = False) -> EvidenceCache:
    path = Path(path)
    if not force and path.exists():
        cache = EvidenceCache.load(path)
        if not cache.is_stale(now):
            return cache
    cache = EvidenceCache.build(catalog, k, now)
    cache.save(path)
    return cache
