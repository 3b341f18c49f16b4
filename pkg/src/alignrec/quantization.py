"""Product quantization of item latents.

A latent of dimension ``d`` is split into ``M`` contiguous subvectors of
length ``d / M``; each subvector is stored as the index of its nearest
centroid among ``K``.  Centroids come from per-subspace k-means with
k-means++ seeding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import DimensionError, NotTrainedError, ValidationError
from .linalg import DTYPE, seeded_rng

CHUNK = 2048


@dataclass
class PQCodebook:
    M: int
    K: int
    centroids: np.ndarray          # (M, K, d / M)
    trained: bool = False
    sse_history: list = field(default_factory=list)   # per subspace, per iteration

    def __post_init__(self):
        if self.M < 1 or self.K < 1:
            raise ValidationError("M and K must be positive")
        self.centroids = np.asarray(self.centroids, DTYPE)
        if self.centroids.ndim != 3 or self.centroids.shape[:2] != (self.M, self.K):
            raise DimensionError(f"centroids must have shape ({self.M}, {self.K}, d/M)")
        if not np.all(np.isfinite(self.centroids)):
            raise ValidationError("centroids must be finite")

    @property
    def sub_dim(self) -> int:
        return self.centroids.shape[2]

    @property
    def d(self) -> int:
        return self.M * self.sub_dim

    def save(self, path, codes=None) -> None:
        tensors = {"centroids": self.centroids}
        if codes is not None:
            tensors["codes"] = np.asarray(codes, dtype=np.int64)
        checkpoint.save(path, tensors, {"kind": "pq", "M": self.M, "K": self.K, "trained": self.trained,
                                        "sse_history": self.sse_history})

    @classmethod
    def load(cls, path) -> tuple["PQCodebook", np.ndarray | None]:
        tensors, meta = checkpoint.load(path)
        if meta.get("kind") != "pq":
            raise ValidationError(f"{path} is not a codebook file")
        cb = cls(meta["M"], meta["K"], tensors["centroids"], meta["trained"], meta["sse_history"])
        return cb, tensors.get("codes")


@dataclass(frozen=True)
class PQCode:
    indices: tuple

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))


def _sq_dists(X, C):
    """``(n, K)`` squared Euclidean distances by explicit differences."""
    out = np.empty((X.shape[0], C.shape[0]))
    for s in range(0, X.shape[0], CHUNK):
        diff = X[s:s + CHUNK, None, :] - C[None, :, :]
        out[s:s + CHUNK] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeans_pp(X, K, rng):
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[chosen[0]][None, :])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a centre already; pick any unused row
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(X, X[nxt][None, :])[:, 0])
    return X[chosen].copy()


def _lloyd(X, C, iters):
    history = []
    K = C.shape[0]
    for _ in range(iters):
        dist = _sq_dists(X, C)
        assign = np.argmin(dist, axis=1)
        history.append(float(dist[np.arange(X.shape[0]), assign].sum()))
        counts = np.bincount(assign, minlength=K)
        sums = np.zeros_like(C)
        np.add.at(sums, assign, X)
        nonempty = counts > 0
        C = C.copy()
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        for k in np.flatnonzero(~nonempty):
            big = int(np.argmax(counts))
            members = np.flatnonzero(assign == big)
            far = members[np.argmax(_sq_dists(X[members], C[big][None, :])[:, 0])]
            C[k] = X[far]
            assign[far] = k
            counts[big] -= 1
            counts[k] = 1
    dist = _sq_dists(X, C)
    history.append(float(dist.min(axis=1).sum()))
    return C, history


def train_codebook(latents, M: int = 8, K: int = 256, iters: int = 20, seed: int = 0) -> PQCodebook:
    """Per-subspace k-means.  ``sse_history[m]`` lists the within-cluster SSE
    after each assignment step plus the final one; it never increases."""
    X = np.asarray(latents, DTYPE)
    if X.ndim != 2:
        raise DimensionError("latents must be a 2-D array")
    n, d = X.shape
    if M < 1 or d % M:
        raise DimensionError(f"d={d} is not divisible by M={M}")
    if K < 1:
        raise ValidationError("K must be positive")
    if n < K:
        raise ValidationError(f"need at least K={K} vectors, got {n}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("latents must be finite")
    ds = d // M
    cents = np.empty((M, K, ds))
    history = []
    for m in range(M):
        sub = np.ascontiguousarray(X[:, m * ds:(m + 1) * ds])
        init = _kmeans_pp(sub, K, seeded_rng([seed, m]))
        cents[m], h = _lloyd(sub, init, iters)
        history.append(h)
    return PQCodebook(M, K, cents, True, history)


def _check(codebook: PQCodebook):
    if not codebook.trained:
        raise NotTrainedError("codebook has not been trained")


def encode_batch(codebook: PQCodebook, latents) -> np.ndarray:
    """``(n, M)`` nearest-centroid indices; ties go to the lowest index."""
    _check(codebook)
    X = np.atleast_2d(np.asarray(latents, DTYPE))
    if X.shape[1] != codebook.d:
        raise DimensionError(f"latents must have dim {codebook.d}")
    ds = codebook.sub_dim
    codes = np.empty((X.shape[0], codebook.M), dtype=np.int64)
    for m in range(codebook.M):
        codes[:, m] = np.argmin(_sq_dists(X[:, m * ds:(m + 1) * ds], codebook.centroids[m]), axis=1)
    return codes


def encode(codebook: PQCodebook, latent) -> PQCode:
    x = np.asarray(latent, DTYPE)
    if x.ndim != 1:
        raise DimensionError("encode takes one latent; use encode_batch for many")
    return PQCode(encode_batch(codebook, x[None, :])[0])


def decode_batch(codebook: PQCodebook, codes) -> np.ndarray:
    codes = np.atleast_2d(np.asarray(codes))
    if codes.shape[1] != codebook.M:
        raise DimensionError(f"codes must have {codebook.M} entries")
    if codes.size and (codes.min() < 0 or codes.max() >= codebook.K):
        raise ValidationError(f"code index out of range [0, {codebook.K})")
    parts = [codebook.centroids[m][codes[:, m]] for m in range(codebook.M)]
    return np.concatenate(parts, axis=1)


def decode(codebook: PQCodebook, code) -> np.ndarray:
    idx = code.indices if isinstance(code, PQCode) else code
    return decode_batch(codebook, np.asarray(idx)[None, :])[0]


def code_bits(K: int) -> int:
    return max(1, math.ceil(math.log2(K)))


def memory_ratio(d: int, M: int, K: int) -> float:
    """Bytes of a float64 latent over bytes of its packed code."""
    return (d * 8) / (M * code_bits(K) / 8)


def reconstruction_mse(codebook: PQCodebook, latents) -> float:
    X = np.asarray(latents, DTYPE)
    return float(np.mean((X - decode_batch(codebook, encode_batch(codebook, X))) ** 2))
