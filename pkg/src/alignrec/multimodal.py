"""Side-modality projection, masked contrastive alignment and fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError, ZeroNormError
from .linalg import DTYPE, logsumexp, softmax
from .nn import Mlp2
from .types import ItemRecord, JointLatent

SIDE_MODALITIES = ("txt", "vis", "aud")
# Modalities added to the fused latent as projected residuals; text already
# enters through the base fuser.
RESIDUAL_MODALITIES = ("vis", "aud")
BASE_PAIRS = (("cf", "txt"), ("cf", "vis"), ("txt", "vis"))
AUDIO_PAIRS = (("cf", "aud"), ("txt", "aud"))


def modality_pairs(audio_pairs: bool = True) -> tuple:
    return BASE_PAIRS + (AUDIO_PAIRS if audio_pairs else ())


class ModalityProjector:
    """One ``dim(m) -> d`` MLP per side modality; cf is already in R^d."""

    def __init__(self, projectors: dict):
        self.projectors = dict(projectors)
        outs = {p.out_dim for p in self.projectors.values()}
        if len(outs) > 1:
            raise DimensionError("all modality projectors must share an output dim")

    @classmethod
    def init(cls, cfg, dims: dict, rng) -> "ModalityProjector":
        return cls({m: Mlp2.init(dims[m], cfg.hidden, cfg.d, rng) for m in SIDE_MODALITIES})

    def freeze(self):
        for p in self.projectors.values():
            p.freeze()
        return self

    def modules(self) -> dict:
        return {f"proj_{m}": p for m, p in self.projectors.items()}

    def __getitem__(self, m: str) -> Mlp2:
        try:
            return self.projectors[m]
        except KeyError:
            raise ValidationError(f"unknown modality {m!r}") from None


def project(projector: ModalityProjector, modality: str, feature) -> np.ndarray:
    mlp = projector[modality]
    feature = np.asarray(feature, dtype=DTYPE)
    if feature.shape[-1] != mlp.in_dim:
        raise DimensionError(f"{modality} feature has dim {feature.shape[-1]}, expected {mlp.in_dim}")
    return mlp(feature)


def _normalize(X):
    n = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(n == 0.0):
        raise ZeroNormError("InfoNCE input has a zero-norm embedding")
    return X / n, n


def info_nce_with_grad(anchors, positives, tau: float):
    """Loss and gradients w.r.t. both inputs.

    ``-(1/n) sum_i log softmax_j(cos(a_i, p_j) / tau)[i]``.
    """
    A = np.asarray(anchors, dtype=DTYPE)
    P = np.asarray(positives, dtype=DTYPE)
    if A.ndim != 2 or A.shape != P.shape:
        raise DimensionError(f"anchors {A.shape} and positives {P.shape} must match")
    n = A.shape[0]
    if n < 2:
        raise ValidationError("InfoNCE needs at least 2 pairs")
    if tau <= 0:
        raise ValidationError("temperature must be positive")
    Ah, an = _normalize(A)
    Ph, pn = _normalize(P)
    S = (Ah @ Ph.T) / tau
    loss = float(np.mean(logsumexp(S, axis=1) - np.diag(S)))
    dS = softmax(S, axis=1)
    dS[np.diag_indices(n)] -= 1.0
    dS /= n
    dAh = dS @ Ph / tau
    dPh = dS.T @ Ah / tau
    dA = (dAh - Ah * np.sum(dAh * Ah, axis=1, keepdims=True)) / an
    dP = (dPh - Ph * np.sum(dPh * Ph, axis=1, keepdims=True)) / pn
    return loss, dA, dP


def info_nce(anchors, positives, tau: float) -> float:
    return info_nce_with_grad(anchors, positives, tau)[0]


@dataclass
class ContrastiveBatch:
    """Per-modality ``(n, d)`` embeddings of ``item_ids``; rows of
    unavailable modalities are ignored."""

    item_ids: list
    embeddings: dict
    tau: float = 0.1
    available: dict = field(default=None)

    def __post_init__(self):
        n = len(self.item_ids)
        if self.available is None:
            self.available = {m: np.ones(n, dtype=bool) for m in self.embeddings}
        if self.tau <= 0:
            raise ValidationError("temperature must be positive")


def masked_mm_loss_with_grad(batch: ContrastiveBatch, masks: dict | None = None, audio_pairs: bool = True):
    """Sum over modality pairs of InfoNCE on the items holding both.

    A zero-norm embedding has no direction, so its item is ineligible for
    the pairs involving that modality.  Returns ``(loss, grads)`` where ``grads[m]`` is ``(n, d)`` and is exactly
    zero on rows where ``m`` is unavailable.
    """
    masks = batch.available if masks is None else masks
    n = len(batch.item_ids)
    grads = {m: np.zeros((n, e.shape[1])) for m, e in batch.embeddings.items()}
    total = 0.0
    for m1, m2 in modality_pairs(audio_pairs):
        if m1 not in batch.embeddings or m2 not in batch.embeddings:
            continue
        e1, e2 = batch.embeddings[m1], batch.embeddings[m2]
        ok = np.any(e1 != 0.0, axis=1) & np.any(e2 != 0.0, axis=1)
        rows = np.flatnonzero(np.asarray(masks[m1], bool) & np.asarray(masks[m2], bool) & ok)
        if rows.size < 2:
            continue
        loss, d1, d2 = info_nce_with_grad(e1[rows], e2[rows], batch.tau)
        total += loss
        grads[m1][rows] += d1
        grads[m2][rows] += d2
    return total, grads


def masked_mm_loss(batch: ContrastiveBatch, masks: dict | None = None, audio_pairs: bool = True) -> float:
    return masked_mm_loss_with_grad(batch, masks, audio_pairs)[0]


def side_residual(projector: ModalityProjector, feats: dict, masks: dict, modalities=RESIDUAL_MODALITIES):
    """Sum of projected side features over available modalities.

    Returns ``(residual, backward)``; ``backward(dres)`` yields projector
    gradients.  Unavailable rows are never projected.
    """
    n = next(iter(masks.values())).shape[0]
    d = next(iter(projector.projectors.values())).out_dim
    res = np.zeros((n, d))
    caches = {}
    for m in modalities:
        rows = np.flatnonzero(masks[m])
        if rows.size == 0:
            continue
        out, cache = projector[m].forward(feats[m][rows])
        res[rows] += out
        caches[m] = (rows, cache)

    def backward(dres):
        grads = {}
        for m, (rows, cache) in caches.items():
            g, _ = projector[m].backward(cache, dres[rows], need_dx=False)
            for k, v in g.items():
                grads[f"proj_{m}.{k}"] = v
        return grads

    backward.signature = [caches[m][1].pre > 0.0 for m in sorted(caches)]
    return res, backward


def degrade_missing(item: ItemRecord, base, projector: ModalityProjector | None) -> JointLatent:
    """Fuse ``item`` using only its available modalities.

    Masked modalities contribute the zero vector before fusion (text) or are
    skipped (vis/aud residuals).
    """
    from .base_aligner import encode_item_base

    z = encode_item_base(base, item).vector.copy()
    if projector is not None:
        feats = {m: (item.feature(m) if item.mask.has(m) else np.zeros(projector[m].in_dim))[None, :]
                 for m in RESIDUAL_MODALITIES}
        masks = {m: np.array([item.mask.has(m)]) for m in RESIDUAL_MODALITIES}
        res, _ = side_residual(projector, feats, masks)
        z = z + res[0]
    if not np.all(np.isfinite(z)):
        raise ValidationError(f"non-finite fused latent for item {item.item_id!r}")
    return JointLatent(z, "base")
