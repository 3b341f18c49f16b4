"""Frozen base fusion of CF and text features into joint latents."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, FrozenParameterError, ValidationError
from .linalg import DTYPE
from .nn import Mlp2
from .types import MODALITIES, ItemRecord, JointLatent, UserRecord


class BaseAligner:
    """Item fuser ``[cf; txt] -> d``, user fuser ``cf -> d`` and one decoder
    per modality ``d -> dim(m)``.

    A missing text feature enters the fuser as the zero vector.
    """

    def __init__(self, item_fuser: Mlp2, user_fuser: Mlp2, decoders: dict):
        self.item_fuser = item_fuser
        self.user_fuser = user_fuser
        self.decoders = dict(decoders)
        self._frozen = False

    @classmethod
    def init(cls, cfg, dims: dict, rng) -> "BaseAligner":
        d = cfg.d
        item = Mlp2.init(dims["cf"] + dims["txt"], cfg.hidden, d, rng)
        user = Mlp2.init(dims["cf"], cfg.hidden, d, rng)
        dec = {m: Mlp2.init(d, cfg.hidden, dims[m], rng) for m in MODALITIES}
        return cls(item, user, dec)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "BaseAligner":
        for m in self.modules().values():
            m.freeze()
        self._frozen = True
        return self

    def modules(self) -> dict:
        mods = {"item_fuser": self.item_fuser, "user_fuser": self.user_fuser}
        mods.update({f"dec_{m}": dec for m, dec in self.decoders.items()})
        return mods

    def __setattr__(self, name, value):
        if getattr(self, "_frozen", False) and name in ("item_fuser", "user_fuser", "decoders"):
            raise FrozenParameterError(f"base aligner is frozen; cannot replace {name}")
        super().__setattr__(name, value)

    # batched forward -----------------------------------------------------------
    def fuse_items(self, cf, txt, has_txt):
        """``(n, d)`` base item latents and the fuser cache."""
        txt = np.where(np.asarray(has_txt, dtype=bool)[:, None], txt, 0.0)
        X = np.concatenate([cf, txt], axis=1)
        return self.item_fuser.forward(X)

    def fuse_users(self, cf):
        return self.user_fuser.forward(cf)

    def reconstruct(self, z, feats: dict, masks: dict):
        """Masked squared reconstruction error per row, plus backward closure.

        ``feats[m]`` is ``(n, dim_m)``; ``masks[m]`` is a boolean ``(n,)``.
        Rows of masked modalities are never decoded, so their stored values
        cannot influence the result.
        """
        n = z.shape[0]
        per_row = np.zeros(n)
        caches = {}
        for m in MODALITIES:
            rows = np.flatnonzero(masks[m])
            if rows.size == 0:
                continue
            dec = self.decoders[m]
            out, cache = dec.forward(z[rows])
            diff = out - feats[m][rows]
            per_row[rows] += np.sum(diff * diff, axis=1)
            caches[m] = (rows, cache, diff)

        def backward(d_per_row, need_dz=True):
            grads = {}
            dz = np.zeros_like(z) if need_dz else None
            for m, (rows, cache, diff) in caches.items():
                dout = 2.0 * diff * d_per_row[rows, None]
                g, dx = self.decoders[m].backward(cache, dout, need_dx=need_dz)
                for k, v in g.items():
                    grads[f"dec_{m}.{k}"] = v
                if need_dz:
                    np.add.at(dz, rows, dx)
            return grads, dz

        backward.signature = [caches[m][1].pre > 0.0 for m in sorted(caches)]
        return per_row, backward

    def tensors(self, prefix="base.") -> dict:
        out = {}
        for name, mod in self.modules().items():
            for k, v in mod.parameters().items():
                out[f"{prefix}{name}.{k}"] = v
        return out


def encode_item_base(p: BaseAligner, item: ItemRecord) -> JointLatent:
    cf = item.feature("cf")
    if cf is None:
        raise ValidationError(f"item {item.item_id!r} has no cf feature")
    txt = item.feature("txt")
    d_t = p.item_fuser.in_dim - cf.shape[0]
    if d_t < 0:
        raise DimensionError("cf feature wider than the fuser input")
    txt_row = np.zeros(d_t, dtype=DTYPE) if txt is None else txt
    z, _ = p.fuse_items(cf[None, :], txt_row[None, :], np.array([txt is not None]))
    return JointLatent(z[0], "base")


def encode_user_base(p: BaseAligner, user: UserRecord) -> JointLatent:
    h, _ = p.fuse_users(user.cf_embedding.values[None, :])
    return JointLatent(h[0], "base")


def recon_loss(p: BaseAligner, item: ItemRecord, z) -> float:
    z = np.asarray(z, dtype=DTYPE)
    if z.ndim != 1 or z.shape[0] != p.item_fuser.out_dim:
        raise DimensionError(f"latent must have dim {p.item_fuser.out_dim}")
    feats, masks = {}, {}
    for m in MODALITIES:
        f = item.feature(m)
        masks[m] = np.array([f is not None])
        feats[m] = (f if f is not None else np.zeros(p.decoders[m].out_dim))[None, :]
    per_row, _ = p.reconstruct(z[None, :], feats, masks)
    return float(per_row[0])


def pretrain_base(bundle, cfg, interactions=None, rng=None):
    """Train the offline stack on ``interactions`` and return the frozen system.

    Thin wrapper over :func:`alignrec.training.pretrain`.
    """
    from .training import pretrain
    from .system import Recommender

    system = Recommender.build(bundle.catalog, cfg)
    pretrain(system, interactions if interactions is not None else bundle.interactions)
    return system
