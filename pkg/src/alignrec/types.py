"""Per-entity domain records.

The training and serving paths work on dense arrays (see
:class:`alignrec.data.Catalog`); these records are the per-entity view used by
single-item operations, the CLI and tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable

import numpy as np

from .errors import DimensionError, ValidationError
from .linalg import DTYPE

MODALITIES = ("cf", "txt", "vis", "aud")


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=DTYPE)
        if v.ndim != 1 or v.size == 0:
            raise DimensionError(f"feature vector must be non-empty 1-D, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("feature vector has non-finite entries")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ModalityMask:
    cf: bool = True
    txt: bool = False
    vis: bool = False
    aud: bool = False

    def has(self, modality: str) -> bool:
        return bool(getattr(self, modality))

    def as_array(self) -> np.ndarray:
        return np.array([self.cf, self.txt, self.vis, self.aud], dtype=bool)

    @classmethod
    def from_array(cls, flags) -> "ModalityMask":
        return cls(*(bool(f) for f in flags))

    def without(self, *modalities: str) -> "ModalityMask":
        flags = {m: self.has(m) and m not in modalities for m in MODALITIES}
        return ModalityMask(**flags)


@dataclass(frozen=True)
class ItemRecord:
    item_id: Hashable
    features: dict
    mask: ModalityMask
    attributes: tuple = ()

    def __post_init__(self):
        present = {m for m in MODALITIES if self.mask.has(m)}
        if set(self.features) != present:
            raise ValidationError(
                f"item {self.item_id!r}: features {sorted(self.features)} do not match mask {sorted(present)}")
        object.__setattr__(self, "attributes", tuple(self.attributes))

    def feature(self, modality: str):
        """Raw feature array, or None when the modality is masked."""
        fv = self.features.get(modality)
        return None if fv is None else fv.values


@dataclass(frozen=True)
class UserRecord:
    user_id: Hashable
    cf_embedding: FeatureVector
    history: tuple = ()

    def __post_init__(self):
        hist = tuple((i, float(t)) for i, t in self.history)
        ts = [t for _, t in hist]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValidationError(f"user {self.user_id!r}: history timestamps decrease")
        object.__setattr__(self, "history", hist)


@dataclass(frozen=True)
class JointLatent:
    vector: np.ndarray
    kind: str = "base"

    def __post_init__(self):
        if self.kind not in ("base", "dynamic"):
            raise ValueError(f"unknown latent kind {self.kind!r}")
        v = np.array(self.vector, dtype=DTYPE)
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@dataclass
class Interactions:
    """Parallel arrays of (user index, item index, timestamp), time ordered."""

    users: np.ndarray
    items: np.ndarray
    times: np.ndarray
    event_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.times = np.asarray(self.times, dtype=DTYPE)
        if self.event_ids is None:
            self.event_ids = np.arange(len(self.users), dtype=np.int64)
        self.event_ids = np.asarray(self.event_ids, dtype=np.int64)
        if not (len(self.users) == len(self.items) == len(self.times) == len(self.event_ids)):
            raise DimensionError("interaction arrays differ in length")

    def __len__(self) -> int:
        return len(self.users)

    def take(self, idx) -> "Interactions":
        idx = np.asarray(idx)
        return Interactions(self.users[idx], self.items[idx], self.times[idx], self.event_ids[idx])

    @classmethod
    def empty(cls) -> "Interactions":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z.astype(DTYPE), z)
