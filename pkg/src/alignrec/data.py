"""Datasets: dense catalog arrays, on-disk format, ingestion and synthetic data.

A dataset directory holds::

    manifest.json        counts, dims, file names, and which item ids appear
                         in each modality file (this is the modality mask)
    interactions.tsv     user_id <TAB> item_id <TAB> unix_timestamp
    users.bin            user CF embeddings   (feature-record format)
    item_<m>.bin         one file per modality m in cf/txt/vis/aud
    attributes.tsv       item_id <TAB> comma-separated attribute ids
    attr_vocab.tsv       attribute_id <TAB> name
    titles.tsv           item_id <TAB> title          (optional)

Feature-record files start with ``b"ALRFEAT\\0"``, uint32 version and uint32
record count, followed by records of (uint32 id length, UTF-8 id, uint32 dim,
dim little-endian float64 values).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (DanglingIdError, DimMismatchError, TimestampOrderError, ValidationError)
from .linalg import DTYPE, seeded_rng
from .types import MODALITIES, FeatureVector, Interactions, ItemRecord, ModalityMask, UserRecord

FEAT_MAGIC = b"ALRFEAT\0"
FEAT_VERSION = 1

GENRES = ("Sci-Fi", "Drama", "Comedy", "Thriller", "Documentary", "Animation", "Romance",
          "Horror", "Space", "Survival", "Mystery", "Fantasy", "Action", "Music", "History",
          "Sports")


def sort_ids(ids) -> list:
    ids = list(ids)
    try:
        return sorted(ids, key=lambda s: (int(s), s))
    except (TypeError, ValueError):
        return sorted(ids, key=str)


@dataclass
class Catalog:
    """Dense per-entity arrays; row order follows ``item_ids`` / ``user_ids``.

    Masked modality rows are stored as zeros and must never be read without
    consulting ``item_mask``.
    """

    item_ids: list
    user_ids: list
    item_feats: dict
    item_mask: np.ndarray
    user_cf: np.ndarray
    item_attrs: list
    attr_names: list
    item_titles: list = None

    def __post_init__(self):
        self.item_mask = np.asarray(self.item_mask, dtype=bool)
        if self.item_titles is None:
            self.item_titles = [str(i) for i in self.item_ids]
        self.item_attrs = [tuple(int(a) for a in attrs) for attrs in self.item_attrs]
        self._item_index = {iid: n for n, iid in enumerate(self.item_ids)}
        self._user_index = {uid: n for n, uid in enumerate(self.user_ids)}

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_attrs(self) -> int:
        return len(self.attr_names)

    def dims(self) -> dict:
        return {m: self.item_feats[m].shape[1] for m in MODALITIES}

    def item_index(self, item_id) -> int:
        try:
            return self._item_index[item_id]
        except KeyError:
            raise DanglingIdError(f"unknown item id {item_id!r}") from None

    def user_index(self, user_id) -> int:
        try:
            return self._user_index[user_id]
        except KeyError:
            raise DanglingIdError(f"unknown user id {user_id!r}") from None

    def modality_flag(self, m: str) -> np.ndarray:
        return self.item_mask[:, MODALITIES.index(m)]

    def item_record(self, idx: int) -> ItemRecord:
        mask = ModalityMask.from_array(self.item_mask[idx])
        feats = {m: FeatureVector(self.item_feats[m][idx]) for m in MODALITIES if mask.has(m)}
        return ItemRecord(self.item_ids[idx], feats, mask, self.item_attrs[idx])

    def padded_attrs(self) -> tuple[np.ndarray, np.ndarray]:
        """``(attr_idx, valid)`` arrays of shape (n_items, max_attrs)."""
        width = max([len(a) for a in self.item_attrs] + [1])
        idx = np.zeros((self.n_items, width), dtype=np.int64)
        valid = np.zeros((self.n_items, width), dtype=bool)
        for i, attrs in enumerate(self.item_attrs):
            idx[i, :len(attrs)] = attrs
            valid[i, :len(attrs)] = True
        return idx, valid

    def with_modalities_dropped(self, *modalities: str, items=None) -> "Catalog":
        """Copy with the given modalities masked (for ``items`` or all items)."""
        mask = self.item_mask.copy()
        feats = {m: a.copy() for m, a in self.item_feats.items()}
        rows = slice(None) if items is None else np.asarray(items)
        for m in modalities:
            if m == "cf":
                raise ValidationError("the cf modality cannot be dropped")
            mask[rows, MODALITIES.index(m)] = False
            feats[m][rows] = 0.0
        return Catalog(self.item_ids, self.user_ids, feats, mask, self.user_cf,
                       self.item_attrs, self.attr_names, self.item_titles)


@dataclass
class DatasetBundle:
    catalog: Catalog
    interactions: Interactions
    manifest: dict = field(default_factory=dict)
    truth: dict = field(default_factory=dict)

    def user_record(self, user_idx: int, before: float | None = None) -> UserRecord:
        sel = self.interactions.users == user_idx
        if before is not None:
            sel &= self.interactions.times < before
        items = self.interactions.items[sel]
        times = self.interactions.times[sel]
        hist = [(self.catalog.item_ids[i], t) for i, t in zip(items, times)]
        return UserRecord(self.catalog.user_ids[user_idx], FeatureVector(self.catalog.user_cf[user_idx]), hist)


# -- feature-record files ----------------------------------------------------

def write_features(path, ids, matrix) -> None:
    matrix = np.asarray(matrix, dtype=DTYPE)
    chunks = [FEAT_MAGIC, struct.pack("<II", FEAT_VERSION, len(ids))]
    for iid, row in zip(ids, matrix):
        raw = str(iid).encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", row.shape[0]))
        chunks.append(np.ascontiguousarray(row, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_features(path) -> tuple[list, np.ndarray]:
    """Return ``(ids, matrix)``; all records must share one dim."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:8] != FEAT_MAGIC:
        raise ValidationError("bad feature-file magic", locator=str(path))
    version, count = struct.unpack("<II", blob[8:16])
    if version != FEAT_VERSION:
        raise ValidationError(f"unsupported feature-file version {version}", locator=str(path))
    off = 16
    ids, rows = [], []
    dim = None
    for rec in range(count):
        try:
            (n,) = struct.unpack("<I", blob[off:off + 4])
            iid = blob[off + 4:off + 4 + n].decode("utf-8")
            off += 4 + n
            (k,) = struct.unpack("<I", blob[off:off + 4])
            off += 4
            if len(blob) < off + 8 * k:
                raise struct.error("truncated")
            vals = np.frombuffer(blob[off:off + 8 * k], dtype="<f8").astype(DTYPE)
            off += 8 * k
        except (struct.error, UnicodeDecodeError):
            raise ValidationError("truncated or corrupt feature record", locator=f"{path}#record{rec}") from None
        if dim is None:
            dim = k
        elif k != dim:
            raise DimMismatchError(f"record dim {k} differs from first record dim {dim}",
                                   locator=f"{path}#record{rec}")
        if not np.all(np.isfinite(vals)):
            raise ValidationError("non-finite feature values", locator=f"{path}#record{rec}")
        ids.append(iid)
        rows.append(vals)
    if off != len(blob):
        raise ValidationError("trailing bytes after last record", locator=str(path))
    matrix = np.vstack(rows) if rows else np.zeros((0, 0))
    return ids, matrix


# -- bundle IO -----------------------------------------------------------------

def write_bundle(bundle: DatasetBundle, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cat = bundle.catalog
    files = {"interactions": "interactions.tsv", "users": "users.bin", "attributes": "attributes.tsv",
             "attr_vocab": "attr_vocab.tsv", "titles": "titles.tsv"}
    modality_items = {}
    for m in MODALITIES:
        sel = np.flatnonzero(cat.modality_flag(m))
        ids = [cat.item_ids[i] for i in sel]
        files[m] = f"item_{m}.bin"
        modality_items[m] = ids
        write_features(d / files[m], ids, cat.item_feats[m][sel])
    write_features(d / files["users"], cat.user_ids, cat.user_cf)
    inter = bundle.interactions
    lines = [f"{cat.user_ids[u]}\t{cat.item_ids[i]}\t{t!r}\n" for u, i, t in
             zip(inter.users, inter.items, inter.times.tolist())]
    (d / files["interactions"]).write_text("".join(lines), encoding="utf-8")
    (d / files["attributes"]).write_text(
        "".join(f"{iid}\t{','.join(str(a) for a in attrs)}\n" for iid, attrs in zip(cat.item_ids, cat.item_attrs)),
        encoding="utf-8")
    (d / files["attr_vocab"]).write_text("".join(f"{n}\t{name}\n" for n, name in enumerate(cat.attr_names)),
                                         encoding="utf-8")
    (d / files["titles"]).write_text("".join(f"{iid}\t{t}\n" for iid, t in zip(cat.item_ids, cat.item_titles)),
                                     encoding="utf-8")
    manifest = {
        "version": 1,
        "n_users": cat.n_users,
        "n_items": cat.n_items,
        "n_interactions": len(inter),
        "dims": cat.dims(),
        "files": files,
        "modality_items": modality_items,
    }
    if "synthetic" in bundle.manifest:
        manifest["synthetic"] = bundle.manifest["synthetic"]
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return d


def _read_tsv(path, ncols, min_cols=None):
    min_cols = ncols if min_cols is None else min_cols
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if not min_cols <= len(parts) <= ncols:
            raise ValidationError(f"expected {ncols} tab-separated fields", locator=f"{path}:{lineno}")
        rows.append((lineno, parts))
    return rows


def ingest(path, streaming: bool = False) -> DatasetBundle:
    """Load and validate a dataset directory.

    With ``streaming=True`` interaction timestamps must be non-decreasing in
    file order; otherwise interactions are stably sorted by timestamp.
    """
    d = Path(path)
    mpath = d / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError("missing manifest.json", locator=str(d)) from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest is not valid JSON: {exc}", locator=str(mpath)) from None
    for key in ("n_users", "n_items", "n_interactions", "dims", "files", "modality_items"):
        if key not in manifest:
            raise ValidationError(f"manifest missing key {key!r}", locator=str(mpath))
    files = manifest["files"]
    dims = manifest["dims"]

    user_ids, user_cf = read_features(d / files["users"])
    if user_cf.size and user_cf.shape[1] != dims["cf"]:
        raise DimMismatchError(f"user embeddings have dim {user_cf.shape[1]}, manifest says {dims['cf']}",
                               locator=str(d / files["users"]))
    if len(user_ids) != manifest["n_users"]:
        raise ValidationError("user count differs from manifest", locator=str(d / files["users"]))

    per_mod = {}
    for m in MODALITIES:
        fpath = d / files[m]
        ids, mat = read_features(fpath)
        if mat.size and mat.shape[1] != dims[m]:
            raise DimMismatchError(f"{m} features have dim {mat.shape[1]}, manifest says {dims[m]}",
                                   locator=str(fpath))
        if list(ids) != [str(i) for i in manifest["modality_items"][m]]:
            raise ValidationError(f"{m} file ids differ from manifest listing", locator=str(fpath))
        per_mod[m] = dict(zip(ids, mat))

    item_ids = sort_ids(per_mod["cf"])
    if len(item_ids) != manifest["n_items"]:
        raise ValidationError("item count (cf file) differs from manifest", locator=str(d / files["cf"]))
    for m in MODALITIES[1:]:
        extra = set(per_mod[m]) - set(per_mod["cf"])
        if extra:
            raise DanglingIdError(f"{m} features for items without cf features: {sorted(extra)[:3]}",
                                  locator=str(d / files[m]))
    user_ids = sort_ids(user_ids)
    uidx = {u: n for n, u in enumerate(user_ids)}
    urows = dict(zip(*read_features(d / files["users"])))
    user_cf = np.vstack([urows[u] for u in user_ids]) if user_ids else np.zeros((0, dims["cf"]))

    n_items = len(item_ids)
    feats = {m: np.zeros((n_items, dims[m])) for m in MODALITIES}
    mask = np.zeros((n_items, len(MODALITIES)), dtype=bool)
    for n, iid in enumerate(item_ids):
        for k, m in enumerate(MODALITIES):
            row = per_mod[m].get(iid)
            if row is not None:
                feats[m][n] = row
                mask[n, k] = True
    iidx = {i: n for n, i in enumerate(item_ids)}

    vocab_rows = _read_tsv(d / files["attr_vocab"], 2)
    attr_names = [None] * len(vocab_rows)
    for lineno, (aid, name) in vocab_rows:
        try:
            a = int(aid)
            attr_names[a] = name
        except (ValueError, IndexError):
            raise ValidationError(f"bad attribute id {aid!r}", locator=f"{files['attr_vocab']}:{lineno}") from None
    if any(n is None for n in attr_names):
        raise ValidationError("attribute vocabulary ids are not contiguous", locator=files["attr_vocab"])
    item_attrs = [()] * n_items
    for lineno, parts in _read_tsv(d / files["attributes"], 2, 1):
        loc = f"{files['attributes']}:{lineno}"
        if parts[0] not in iidx:
            raise DanglingIdError(f"attributes for unknown item {parts[0]!r}", locator=loc)
        raw = parts[1].strip() if len(parts) > 1 else ""
        try:
            attrs = tuple(int(a) for a in raw.split(",")) if raw else ()
        except ValueError:
            raise ValidationError(f"bad attribute list {raw!r}", locator=loc) from None
        if any(not 0 <= a < len(attr_names) for a in attrs):
            raise DanglingIdError("attribute id outside vocabulary", locator=loc)
        item_attrs[iidx[parts[0]]] = attrs

    titles = [str(i) for i in item_ids]
    tpath = d / files.get("titles", "titles.tsv")
    if tpath.exists():
        for lineno, parts in _read_tsv(tpath, 2):
            if parts[0] not in iidx:
                raise DanglingIdError(f"title for unknown item {parts[0]!r}", locator=f"{tpath.name}:{lineno}")
            titles[iidx[parts[0]]] = parts[1]

    users, items, times = [], [], []
    ipath = d / files["interactions"]
    last_t = -math.inf
    for lineno, (u, i, t) in _read_tsv(ipath, 3):
        loc = f"{files['interactions']}:{lineno}"
        if u not in uidx:
            raise DanglingIdError(f"dangling id: unknown user {u!r}", locator=loc)
        if i not in iidx:
            raise DanglingIdError(f"dangling id: unknown item {i!r}", locator=loc)
        try:
            ts = float(t)
        except ValueError:
            raise ValidationError(f"bad timestamp {t!r}", locator=loc) from None
        if not math.isfinite(ts):
            raise ValidationError("non-finite timestamp", locator=loc)
        if streaming and ts < last_t:
            raise TimestampOrderError(f"timestamp {ts} precedes previous {last_t}", locator=loc)
        last_t = max(last_t, ts)
        users.append(uidx[u])
        items.append(iidx[i])
        times.append(ts)
    if len(users) != manifest["n_interactions"]:
        raise ValidationError(f"{len(users)} interactions, manifest says {manifest['n_interactions']}",
                              locator=str(ipath))
    inter = Interactions(users, items, times)
    if not streaming:
        inter = inter.take(np.argsort(inter.times, kind="stable"))
        inter.event_ids = np.arange(len(inter))

    catalog = Catalog(item_ids, user_ids, feats, mask, user_cf, item_attrs, attr_names, titles)
    return DatasetBundle(catalog, inter, manifest)


# -- synthetic data -------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Parameters of the synthetic generator.

    Drift rotates every user preference vector by ``drift_angle`` radians
    (in ``latent_dim // 2`` random orthogonal planes) from event
    ``drift_onset_event`` on.  ``modality_dependence`` blends side features
    between pure noise (0) and an exact embedding of the item vector (1).
    ``evidence_dependence`` is the probability that a user's next item is a
    near neighbour of their previous item instead of a preference draw.
    """

    n_users: int = 500
    n_items: int = 200
    n_interactions: int = 5000
    latent_dim: int = 8
    sharpness: float = 6.0
    popularity_std: float = 0.5
    cold_fraction: float = 0.1
    cold_penalty: float = 4.0
    drift_onset_window: int | None = None
    drift_angle: float = 0.0
    window_events: int = 500
    pretrain_fraction: float = 0.7
    modality_dependence: float = 0.9
    evidence_dependence: float = 0.0
    neighbor_probs: tuple = (0.7, 0.2, 0.1)
    missing_rate: tuple = (0.1, 0.1, 0.1)     # txt, vis, aud
    cf_noise: float = 0.3
    cf_shrink: float = 2.0
    n_attributes: int = 16
    attrs_per_item: int = 2
    seconds_per_event: float = 7.2
    d: int = 32
    d_t: int = 32
    d_vis: int = 512
    d_aud: int = 768
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if min(self.n_users, self.n_items, self.n_interactions) <= 0:
            raise ValidationError("synthetic sizes must be positive")
        if self.latent_dim > min(self.d, self.d_t, self.d_vis, self.d_aud):
            raise ValidationError("latent_dim must not exceed any feature dim")
        for name in ("modality_dependence", "evidence_dependence", "cold_fraction", "pretrain_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1]")
        if any(not 0.0 <= r < 1.0 for r in self.missing_rate):
            raise ValidationError("missing rates must be in [0, 1)")
        if abs(sum(self.neighbor_probs) - 1.0) > 1e-9:
            raise ValidationError("neighbor_probs must sum to 1")
        if self.attrs_per_item > self.n_attributes:
            raise ValidationError("attrs_per_item exceeds n_attributes")
        return self

    @property
    def drift_onset_event(self) -> int | None:
        if self.drift_onset_window is None:
            return None
        return int(self.pretrain_fraction * self.n_interactions) + self.drift_onset_window * self.window_events


def _unit(rng, n, dim):
    x = rng.normal(size=(n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _orthonormal(rng, rows, cols):
    q, _ = np.linalg.qr(rng.normal(size=(rows, cols)))
    return q[:, :cols]


def rotation(rng, dim: int, angle: float) -> np.ndarray:
    basis = _orthonormal(rng, dim, dim)
    block = np.eye(dim)
    c, s = math.cos(angle), math.sin(angle)
    for p in range(dim // 2):
        a, b = 2 * p, 2 * p + 1
        block[a, a], block[a, b], block[b, a], block[b, b] = c, -s, s, c
    return basis @ block @ basis.T


def generate_synthetic(spec: SyntheticSpec) -> DatasetBundle:
    """Deterministic synthetic dataset; a pure function of ``spec``."""
    spec.validate()
    rng = seeded_rng(spec.seed)
    D = spec.latent_dim
    n_u, n_i, n = spec.n_users, spec.n_items, spec.n_interactions

    Q = _unit(rng, n_i, D)
    P = _unit(rng, n_u, D)
    R = rotation(rng, D, spec.drift_angle)
    bias = rng.normal(0.0, spec.popularity_std, size=n_i)
    n_cold = int(round(spec.cold_fraction * n_i))
    cold = np.sort(rng.choice(n_i, size=n_cold, replace=False)) if n_cold else np.zeros(0, dtype=np.int64)
    bias[cold] -= spec.cold_penalty

    users = rng.integers(0, n_u, size=n)
    gaps = rng.exponential(spec.seconds_per_event, size=n)
    times = np.round(1.6e9 + np.cumsum(gaps), 3)
    onset = spec.drift_onset_event
    drifted = np.zeros(n, dtype=bool) if onset is None else np.arange(n) >= onset

    # preference draws via Gumbel-max, in chunks to bound memory
    gumbel = rng.gumbel(size=(n, n_i)) if n * n_i <= 2_000_000 else None
    items = np.empty(n, dtype=np.int64)
    PR = P @ R.T
    chunk = max(1, 2_000_000 // n_i)
    for start in range(0, n, chunk):
        sl = slice(start, min(n, start + chunk))
        pref = np.where(drifted[sl, None], PR[users[sl]], P[users[sl]])
        logits = spec.sharpness * (pref @ Q.T) + bias
        g = gumbel[sl] if gumbel is not None else rng.gumbel(size=logits.shape)
        items[sl] = np.argmax(logits + g, axis=1)

    if spec.evidence_dependence > 0.0:
        sim = Q @ Q.T
        np.fill_diagonal(sim, -np.inf)
        n_nb = len(spec.neighbor_probs)
        nbrs = np.argsort(-sim, axis=1, kind="stable")[:, :n_nb]
        transition = rng.random(n) < spec.evidence_dependence
        pick = rng.choice(n_nb, size=n, p=np.asarray(spec.neighbor_probs))
        order = np.argsort(users, kind="stable")
        prev = np.full(n, -1, dtype=np.int64)
        same = users[order][1:] == users[order][:-1]
        prev[order[1:][same]] = order[:-1][same]
        rank = np.zeros(n, dtype=np.int64)
        for pos in range(1, n):
            if same[pos - 1]:
                rank[order[pos]] = rank[order[pos - 1]] + 1
        transition &= prev >= 0
        for r in range(1, int(rank.max()) + 1 if n else 0):
            ev = np.flatnonzero(transition & (rank == r))
            if ev.size:
                items[ev] = nbrs[items[prev[ev]], pick[ev]]

    n_pre = int(spec.pretrain_fraction * n)
    icount = np.bincount(items[:n_pre], minlength=n_i)
    ucount = np.bincount(users[:n_pre], minlength=n_u)

    E_cf = _orthonormal(rng, spec.d, D)
    shrink_i = icount / (icount + spec.cf_shrink)
    shrink_u = ucount / (ucount + spec.cf_shrink)
    item_cf = shrink_i[:, None] * (Q @ E_cf.T) + spec.cf_noise * rng.normal(size=(n_i, spec.d)) / math.sqrt(spec.d)
    user_cf = shrink_u[:, None] * (P @ E_cf.T) + spec.cf_noise * rng.normal(size=(n_u, spec.d)) / math.sqrt(spec.d)

    feats = {"cf": item_cf}
    embed = {}
    noise_scale = 1.0 - spec.modality_dependence
    mask = np.ones((n_i, 4), dtype=bool)
    for k, (m, dim) in enumerate((("txt", spec.d_t), ("vis", spec.d_vis), ("aud", spec.d_aud))):
        E = _orthonormal(rng, dim, D)
        embed[m] = E
        noise = rng.normal(size=(n_i, dim)) / math.sqrt(dim)
        feats[m] = Q @ E.T + noise_scale * noise
        mask[:, k + 1] = rng.random(n_i) >= spec.missing_rate[k]
        feats[m][~mask[:, k + 1]] = 0.0

    A = _unit(rng, spec.n_attributes, D)
    attr_rank = np.argsort(-(Q @ A.T), axis=1, kind="stable")[:, :spec.attrs_per_item]
    item_attrs = [tuple(sorted(int(a) for a in row)) for row in attr_rank]
    attr_names = [GENRES[a % len(GENRES)] + ("" if a < len(GENRES) else f" {a // len(GENRES) + 1}")
                  for a in range(spec.n_attributes)]

    width_i = len(str(n_i - 1))
    width_u = len(str(n_u - 1))
    item_ids = [f"i{k:0{width_i}d}" for k in range(n_i)]
    user_ids = [f"u{k:0{width_u}d}" for k in range(n_u)]
    titles = [f"Item {k}" for k in range(n_i)]

    catalog = Catalog(item_ids, user_ids, feats, mask, user_cf, item_attrs, attr_names, titles)
    inter = Interactions(users, items, times)
    truth = {"Q": Q, "P": P, "R": R, "bias": bias, "cold_items": cold, "drift_onset_event": onset,
             "embed": embed, "E_cf": E_cf, "attr_dirs": A}
    manifest = {"n_users": n_u, "n_items": n_i, "n_interactions": n, "dims": catalog.dims(),
                "synthetic": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(spec).items()}}
    return DatasetBundle(catalog, inter, manifest, truth)


# -- histories ----------------------------------------------------------------

def user_history(k_users, k_items, k_keys, q_users, q_keys, L: int):
    """Most recent known items of each query user strictly before its key.

    Returns ``(hist, anchor)``: ``hist`` is ``(Q, L)`` with the most recent
    item last and ``-1`` padding on the left; ``anchor`` is the single most
    recent known item (``-1`` if none), independent of ``L``.
    """
    k_users = np.asarray(k_users, dtype=np.int64)
    k_items = np.asarray(k_items, dtype=np.int64)
    q_users = np.asarray(q_users, dtype=np.int64)
    _, ranks = np.unique(np.concatenate([np.asarray(k_keys), np.asarray(q_keys)]), return_inverse=True)
    ranks = ranks.astype(np.int64)
    kr, qr = ranks[:len(k_users)], ranks[len(k_users):]
    M = int(ranks.max()) + 1 if ranks.size else 1
    order = np.lexsort((kr, k_users))
    key = k_users[order] * M + kr[order]
    items = k_items[order]
    pos = np.searchsorted(key, q_users * M + qr, side="left")
    start = np.searchsorted(key, q_users * M, side="left")
    anchor = np.where(pos > start, items[np.maximum(pos - 1, 0)] if items.size else -1, -1)
    if L == 0 or items.size == 0:
        return np.full((len(q_users), L), -1, dtype=np.int64), np.asarray(anchor, dtype=np.int64)
    idx = pos[:, None] - L + np.arange(L)[None, :]
    valid = idx >= start[:, None]
    hist = np.where(valid, items[np.clip(idx, 0, items.size - 1)], -1)
    return hist.astype(np.int64), np.asarray(anchor, dtype=np.int64)
