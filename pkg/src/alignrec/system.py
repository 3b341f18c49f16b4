"""The assembled recommender: parameters, training objective and scoring.

Item latents are ``z_base = item_fuser([cf; txt]) + sum_m proj_m(e_m)`` over
the available visual/audio features, optionally shifted by the gated online
adapter.  Latents are projected to soft tokens and scored by the frozen stub
backbone against a context built from the user token, the mean history token
and the mean evidence token.

Parameter groups:

* ``base``    fusers and decoders (offline only)
* ``proj``    modality projectors, token projector and evidence encoder
  (offline only)
* ``adapter`` online adapter MLP(s) and gate vectors (online only)
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import checkpoint
from .adapter import AdapterState, ewc_penalty, residual_forward
from .base_aligner import BaseAligner
from .config import ModelConfig
from .errors import ConfigError, DimensionError, NonFiniteError, NotTrainedError, ValidationError
from .evidence import (EvidenceBatch, EvidenceEncoder, EvidencePack, attend_attributes, evidence_forward,
                       faithfulness_loss, layout, neighbor_table)
from .linalg import DTYPE, rng_from_state, rng_state, seeded_rng, sigmoid
from .multimodal import (RESIDUAL_MODALITIES, ContrastiveBatch, ModalityProjector, info_nce_with_grad,
                         masked_mm_loss_with_grad, side_residual)
from .nn import Mlp2
from .prompt import StubBackbone, generate_rationale
from .types import MODALITIES

ALL_TERMS = ("rank", "align", "recon", "stab", "faith")
GROUPS = ("base", "proj", "adapter")
SIDE = ("txt", "vis", "aud")


@dataclass
class TupleBatch:
    """Training tuples ``(user, pos, neg)`` with their prompt context.

    ``hist`` holds the user's most recent item indices before the event
    (most recent last, ``-1`` padding); ``anchor`` is the most recent item
    (``-1`` if none) and selects the evidence.  Summaries are the window
    summaries the tuple is scored with.
    """

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    hist: np.ndarray
    anchor: np.ndarray
    s_user: np.ndarray
    s_pos: np.ndarray
    s_neg: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def take(self, idx) -> "TupleBatch":
        return TupleBatch(*(getattr(self, f.name)[idx] for f in fields(self)))

    @classmethod
    def concat(cls, batches) -> "TupleBatch":
        return cls(*(np.concatenate([getattr(b, f.name) for b in batches]) for f in fields(cls)))


@dataclass
class RequestBatch:
    """Ranking requests; column 0 of ``cands`` is the held-out positive."""

    users: np.ndarray
    cands: np.ndarray
    hist: np.ndarray
    anchor: np.ndarray
    s_user: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def take(self, idx) -> "RequestBatch":
        return RequestBatch(*(getattr(self, f.name)[idx] for f in fields(self)))


def _mlp_tensors(prefix: str, mlp: Mlp2) -> dict:
    return {f"{prefix}.{k}": v for k, v in mlp.parameters().items()}


def _prefixed(prefix: str, grads: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in grads.items()}


def _accumulate(into: dict, grads: dict) -> None:
    for k, v in grads.items():
        into[k] = into[k] + v if k in into else v


class Recommender:
    """All trainable and frozen pieces plus the dense lookup tables."""

    def __init__(self, cfg: ModelConfig, catalog, base: BaseAligner, proj: ModalityProjector, token: Mlp2,
                 evid: EvidenceEncoder, adapter: AdapterState, backbone: StubBackbone, rng):
        self.cfg = cfg
        self.catalog = catalog
        self.base = base
        self.proj = proj
        self.token = token
        self.evid = evid
        self.adapter = adapter
        self.backbone = backbone
        self.rng = rng
        self.trained = False
        self.history: list = []
        self._neighbors()
        self.Zb = self.Hb = self.tok_base = None

    @classmethod
    def build(cls, catalog, cfg: ModelConfig, seed: int | None = None) -> "Recommender":
        cfg.validate()
        dims = catalog.dims()
        if dims["cf"] != cfg.d:
            raise ConfigError(f"cf features have dim {dims['cf']} but d = {cfg.d}")
        if catalog.user_cf.shape[1] != cfg.d:
            raise ConfigError("user cf embeddings must have dim d")
        seed = cfg.seed if seed is None else seed
        rng = seeded_rng(seed)
        base = BaseAligner.init(cfg, dims, rng)
        proj = ModalityProjector.init(cfg, dims, rng)
        token = Mlp2.init(cfg.d, cfg.hidden, cfg.d_ell, rng)
        evid = EvidenceEncoder.init(cfg, catalog.n_attrs, rng)
        adapter = AdapterState(cfg, rng)
        backbone = StubBackbone(cfg.d_ell, seed)
        return cls(cfg, catalog, base, proj, token, evid, adapter, backbone, rng)

    # -- structure -----------------------------------------------------------------
    def _neighbors(self):
        cat = self.catalog
        self.n_nbr, self.n_attr_rows = layout(self.cfg.E, self.cfg.k, self.cfg.m_attr)
        if cat.n_items >= 2 and self.n_nbr:
            idx, sims = neighbor_table(cat.item_feats["cf"], self.n_nbr)
        else:
            idx = np.zeros((cat.n_items, 0), dtype=np.int64)
            sims = np.zeros((cat.n_items, 0))
        self.n_nbr = idx.shape[1]
        self.nbr_idx, self.nbr_sims = idx, sims
        self.attr_idx, self.attr_valid = cat.padded_attrs()

    def group_params(self, group: str) -> dict:
        if group == "base":
            out = {}
            for name, mod in self.base.modules().items():
                out.update(_mlp_tensors(f"base.{name}", mod))
            return out
        if group == "proj":
            out = {}
            for name, mod in self.proj.modules().items():
                out.update(_mlp_tensors(f"proj.{name}", mod))
            out.update(_mlp_tensors("proj.token", self.token))
            out.update(self.evid.params("evid."))
            return out
        if group == "adapter":
            return self.adapter.params()
        raise ValidationError(f"unknown parameter group {group!r}")

    def params(self, groups=GROUPS) -> dict:
        out = {}
        for g in groups:
            out.update(self.group_params(g))
        return out

    def freeze_offline(self) -> None:
        self.base.freeze()
        self.proj.freeze()
        self.token.freeze()
        self.evid.freeze()

    @property
    def use_evidence(self) -> bool:
        return self.cfg.use_evidence and self.cfg.E > 0

    def modality_on(self, m: str) -> bool:
        if m == "cf":
            return True
        if m == "txt":
            return self.cfg.use_text
        return self.cfg.use_multimodal

    def _avail(self, m: str, rows, drop=None) -> np.ndarray:
        a = self.catalog.modality_flag(m)[rows] & self.modality_on(m)
        if drop is not None and m in drop:
            a = a & ~drop[m][rows]
        return a

    # -- base latents ----------------------------------------------------------------
    def _live_items(self, U, drop=None):
        """Base latents of items ``U`` through the trainable fusion path."""
        cat = self.catalog
        feats = cat.item_feats
        zf, fcache = self.base.fuse_items(feats["cf"][U], feats["txt"][U], self._avail("txt", U, drop))
        sig = [fcache.pre > 0.0]
        rback = None
        if self.cfg.use_multimodal:
            masks = {m: self._avail(m, U, drop) for m in RESIDUAL_MODALITIES}
            res, rback = side_residual(self.proj, {m: feats[m][U] for m in RESIDUAL_MODALITIES}, masks)
            zf = zf + res
            sig += rback.signature

        def backward(dZ):
            grads = _prefixed("base.item_fuser", self.base.item_fuser.backward(fcache, dZ, need_dx=False)[0])
            if rback is not None:
                grads.update(_prefixed("proj", rback(dZ)))
            return grads

        return zf, sig, backward

    def refresh_tables(self) -> None:
        """Precompute base item/user latents and base item tokens."""
        n = self.catalog.n_items
        self.Zb = self._live_items(np.arange(n))[0]
        self.Hb = self.base.fuse_users(self.catalog.user_cf)[0]
        self.tok_base = self.token(self.Zb)
        for a in (self.Zb, self.Hb, self.tok_base):
            a.flags.writeable = False

    def with_catalog(self, catalog) -> "Recommender":
        """A view sharing all parameters but reading features from ``catalog``
        (e.g. with modalities dropped at test time)."""
        view = Recommender.__new__(Recommender)
        view.__dict__.update(self.__dict__)
        view.catalog = catalog
        if self.Zb is not None:
            view.refresh_tables()
        return view

    # -- evidence batch ---------------------------------------------------------------
    def evidence_batch(self, anchor) -> EvidenceBatch:
        valid = anchor >= 0
        a = np.where(valid, anchor, 0)
        return EvidenceBatch(valid, self.nbr_idx[a], self.nbr_sims[a], self.attr_idx[a],
                             self.attr_valid[a] & valid[:, None])

    # -- objective ---------------------------------------------------------------------
    def objective(self, batch: TupleBatch, groups=("adapter",), terms=ALL_TERMS, adapter: bool | None = None,
                  drop=None):
        """Total loss, gradients for ``groups`` and the piecewise signature.

        ``L = rank + lm*align + lr*recon + ls*stab + lf*faith``; ``stab``
        already contains its ``lambda_ewc`` EWC part.  Returns
        ``(loss, grads, signature, parts)``.
        """
        cfg, w = self.cfg, self.cfg.weights
        groups = tuple(groups)
        terms = tuple(terms)
        use_adapter = ("adapter" in groups) if adapter is None else adapter
        live = "base" in groups or "proj" in groups
        if not live and self.Zb is None:
            raise NotTrainedError("base tables are missing; run pretraining or refresh_tables() first")
        B = len(batch)
        cat = self.catalog
        sig = []
        parts = {}
        tk = self.token
        Me, Mu, Mh = self.backbone.Me, self.backbone.Mu, self.backbone.Mh

        hm = batch.hist >= 0
        n_hist = hm.sum(axis=1)
        eb = self.evidence_batch(batch.anchor) if self.use_evidence else None
        nbr = eb.nbr_idx if eb is not None else np.zeros((B, 0), dtype=np.int64)

        # base latents and history tokens
        if live:
            U = np.unique(np.concatenate([batch.pos, batch.neg, batch.hist[hm], nbr.ravel()]))
            ZU, zsig, zback = self._live_items(U, drop)
            sig += zsig
            TU, tcache = tk.forward(ZU)
            sig.append(tcache.pre > 0.0)
            loc = lambda idx: np.searchsorted(U, idx)
            zb_pos, zb_neg = ZU[loc(batch.pos)], ZU[loc(batch.neg)]
            hist_tok = np.where(hm[..., None], TU[loc(np.where(hm, batch.hist, U[0]))], 0.0)
            zb_nbr = ZU[loc(nbr)] if nbr.size else np.zeros((B, 0, cfg.d))
            hb, ucache = self.base.fuse_users(cat.user_cf[batch.users])
            sig.append(ucache.pre > 0.0)
        else:
            zb_pos, zb_neg = self.Zb[batch.pos], self.Zb[batch.neg]
            hist_tok = np.where(hm[..., None], self.tok_base[np.where(hm, batch.hist, 0)], 0.0)
            zb_nbr = self.Zb[nbr]
            hb = self.Hb[batch.users]
        if eb is not None:
            zb_nbr = np.where(eb.valid[:, None, None], zb_nbr, 0.0)
        hmean = hist_tok.sum(axis=1) / np.maximum(n_hist, 1)[:, None]

        # online adapter residuals
        cf = cat.item_feats["cf"]
        if use_adapter:
            st = self.adapter
            gi, wi = st.mlp_and_gate("item")
            gu, wu = st.mlp_and_gate("user")
            Xi = np.concatenate([np.concatenate([cf[batch.pos], cf[batch.neg]]),
                                 np.concatenate([batch.s_pos, batch.s_neg])], axis=1)
            Xu = np.concatenate([cat.user_cf[batch.users], batch.s_user], axis=1)
            r_i, _, pat_i, back_i = residual_forward(gi, wi, Xi)
            r_u, _, pat_u, back_u = residual_forward(gu, wu, Xu)
            sig += [pat_i, pat_u]
            z_pos, z_neg = zb_pos + r_i[:B], zb_neg + r_i[B:]
            h = hb + r_u
        else:
            z_pos, z_neg, h = zb_pos, zb_neg, hb

        # tokens and context
        Tc, ccache = tk.forward(np.concatenate([z_pos, z_neg]))
        t_pos, t_neg = Tc[:B], Tc[B:]
        tu, tucache = tk.forward(h)
        sig += [ccache.pre > 0.0, tucache.pre > 0.0]
        ctx0 = self.backbone.context(tu, hmean)
        if eb is not None:
            evid_sum, esig, eback = evidence_forward(self.evid, h, zb_nbr, eb, self.n_attr_rows)
            sig += esig
            ctx = ctx0 + (evid_sum / cfg.E) @ Me.T
        else:
            ctx = ctx0
        diff = t_pos - t_neg
        delta = np.sum(ctx * diff, axis=1)

        loss = 0.0
        d_delta = np.zeros(B)
        d_delta0 = np.zeros(B)
        if "rank" in terms:
            parts["rank"] = float(np.mean(np.logaddexp(0.0, -delta)))
            loss += parts["rank"]
            d_delta -= sigmoid(-delta) / B
        if "faith" in terms and eb is not None and w.lambda_f > 0:
            delta0 = np.sum(ctx0 * diff, axis=1)
            p_with, p_wo = sigmoid(delta), sigmoid(delta0)
            acc_with, acc_wo = float(np.mean(p_with)), float(np.mean(p_wo))
            parts["faith"] = faithfulness_loss(acc_with, acc_wo, w.delta, cfg.faith_mode)
            active = parts["faith"] > 0.0
            sig.append(np.array([active]))
            if active:
                sign = 1.0 if cfg.faith_mode == "prose" else -1.0
                d_delta -= sign * w.lambda_f * p_with * (1.0 - p_with) / B
                d_delta0 += sign * w.lambda_f * p_wo * (1.0 - p_wo) / B
            loss += w.lambda_f * parts["faith"]

        # reconstruction of the positive's features from its latent
        dz_pos_extra = None
        if "recon" in terms and w.lambda_r > 0:
            masks = {m: self._avail(m, batch.pos, drop) for m in MODALITIES}
            feats = {m: cat.item_feats[m][batch.pos] for m in MODALITIES}
            per_row, rback = self.base.reconstruct(z_pos, feats, masks)
            sig += rback.signature
            parts["recon"] = float(np.mean(per_row))
            loss += w.lambda_r * parts["recon"]

        # stability: KL to base latents plus EWC
        if "stab" in terms and use_adapter and w.lambda_s > 0:
            kl = (np.sum(r_i[:B] ** 2, axis=1) + np.sum(r_i[B:] ** 2, axis=1) + np.sum(r_u ** 2, axis=1))
            stab = float(np.mean(kl)) / (2.0 * w.sigma_sq)
            stab += w.lambda_ewc * ewc_penalty(self.adapter.params(), self.adapter.ewc_anchor,
                                               self.adapter.ewc_importance)
            parts["stab"] = stab
            loss += w.lambda_s * stab

        # alignment (only when fusion or projectors are trainable)
        align_back = []
        if "align" in terms and live and w.lambda_m > 0:
            parts["align"] = self._align(np.unique(np.concatenate([batch.pos, batch.neg])), drop, sig, align_back)
            loss += w.lambda_m * parts["align"]

        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss {loss}")

        # ---- backward -----------------------------------------------------------------
        grads = {}
        dctx = d_delta[:, None] * diff
        dctx0 = d_delta0[:, None] * diff + dctx
        ddiff = d_delta[:, None] * ctx + d_delta0[:, None] * ctx0
        dTc = np.concatenate([ddiff, -ddiff])
        gT, dz_c = tk.backward(ccache, dTc)
        dz_pos, dz_neg = dz_c[:B], dz_c[B:]
        gTu, dh = tk.backward(tucache, dctx0 @ Mu)
        tok_grads = {}
        _accumulate(tok_grads, gT)
        _accumulate(tok_grads, gTu)
        dhmean = dctx0 @ Mh
        evid_grads = {}
        dzb_nbr = None
        if eb is not None:
            ge, dh_e, dzb_nbr = eback((dctx @ Me) / cfg.E)
            dh = dh + dh_e
            evid_grads = _prefixed("evid", ge)
        if "recon" in parts:
            gr, dz_r = rback(np.full(B, w.lambda_r / B))
            dz_pos = dz_pos + dz_r
            recon_grads = _prefixed("base", gr)
        else:
            recon_grads = {}

        if use_adapter:
            dr_i = np.concatenate([dz_pos, dz_neg])
            dr_u = dh
            if "stab" in parts:
                c = w.lambda_s / (w.sigma_sq * B)
                dr_i = dr_i + c * r_i
                dr_u = dr_u + c * r_u
            gg_i, dwi = back_i(dr_i)
            gg_u, dwu = back_u(dr_u)
            ag = {}
            _accumulate(ag, _prefixed("adapter.g", gg_i))
            _accumulate(ag, _prefixed("adapter.g" if self.adapter.g_user is None else "adapter.gu", gg_u))
            ag["adapter.gate_item"] = dwi
            ag["adapter.gate_user"] = dwu
            if "stab" in parts and self.adapter.ewc_anchor:
                c = w.lambda_s * w.lambda_ewc * 2.0
                for k, theta in self.adapter.params().items():
                    if k in self.adapter.ewc_anchor:
                        ag[k] = ag[k] + c * self.adapter.ewc_importance[k] * (theta - self.adapter.ewc_anchor[k])
            grads.update(ag)

        if live:
            dZU = np.zeros_like(ZU)
            np.add.at(dZU, loc(batch.pos), dz_pos)
            np.add.at(dZU, loc(batch.neg), dz_neg)
            if dzb_nbr is not None and nbr.size:
                np.add.at(dZU, loc(nbr).ravel(), dzb_nbr.reshape(-1, cfg.d))
            dTU = np.zeros_like(TU)
            dhist = (dhmean / np.maximum(n_hist, 1)[:, None])[:, None, :] * hm[..., None]
            np.add.at(dTU, loc(np.where(hm, batch.hist, U[0])), dhist)
            gTU, dZ_tok = tk.backward(tcache, dTU)
            _accumulate(tok_grads, gTU)
            dZU += dZ_tok
            base_grads = zback(dZU)
            _accumulate(base_grads, _prefixed("base.user_fuser",
                                              self.base.user_fuser.backward(ucache, dh, need_dx=False)[0]))
            _accumulate(base_grads, recon_grads)
            for fn in align_back:
                _accumulate(base_grads, fn())
            _accumulate(base_grads, _prefixed("proj.token", tok_grads))
            _accumulate(base_grads, evid_grads)
            grads.update(base_grads)

        wanted = self.params(groups)
        grads = {k: v for k, v in grads.items() if k in wanted}
        for k, v in wanted.items():
            if k not in grads:
                grads[k] = np.zeros_like(v)
        parts["total"] = float(loss)
        return float(loss), grads, sig, parts

    def _align(self, items, drop, sig, align_back) -> float:
        """Fuser cf-view/txt-view InfoNCE plus the masked multimodal InfoNCE."""
        cfg = self.cfg
        feats = self.catalog.item_feats
        total = 0.0
        fuser = self.base.item_fuser
        d_t = feats["txt"].shape[1]
        rows = items[self._avail("txt", items, drop)]
        if rows.size >= 2:
            cf = feats["cf"][rows]
            A, ca = fuser.forward(np.concatenate([cf, np.zeros((rows.size, d_t))], axis=1))
            P, cp = fuser.forward(np.concatenate([np.zeros_like(cf), feats["txt"][rows]], axis=1))
            sig += [ca.pre > 0.0, cp.pre > 0.0]
            loss, dA, dP = info_nce_with_grad(A, P, cfg.tau)
            total += loss
            lm = cfg.weights.lambda_m

            def fuser_back():
                g1, _ = fuser.backward(ca, lm * dA, need_dx=False)
                g2, _ = fuser.backward(cp, lm * dP, need_dx=False)
                out = {}
                _accumulate(out, _prefixed("base.item_fuser", g1))
                _accumulate(out, _prefixed("base.item_fuser", g2))
                return out

            align_back.append(fuser_back)
        if cfg.use_multimodal:
            n = items.size
            emb = {"cf": feats["cf"][items]}
            avail = {"cf": np.ones(n, dtype=bool)}
            caches = {}
            for m in SIDE:
                avail[m] = self._avail(m, items, drop)
                e = np.zeros((n, cfg.d))
                r = np.flatnonzero(avail[m])
                if r.size:
                    out, c = self.proj[m].forward(feats[m][items[r]])
                    e[r] = out
                    caches[m] = (r, c)
                    sig.append(c.pre > 0.0)
                emb[m] = e
                sig.append(np.any(e != 0.0, axis=1))
            loss, g = masked_mm_loss_with_grad(ContrastiveBatch(list(items), emb, cfg.tau, avail),
                                               audio_pairs=cfg.audio_pairs)
            total += loss
            lm = cfg.weights.lambda_m

            def proj_back():
                out = {}
                for m, (r, c) in caches.items():
                    gm, _ = self.proj[m].backward(c, lm * g[m][r], need_dx=False)
                    _accumulate(out, _prefixed(f"proj.proj_{m}", gm))
                return out

            align_back.append(proj_back)
        return total

    # -- serving ---------------------------------------------------------------------
    def _serving_mlps(self, use_ema: bool | None):
        use_ema = self.cfg.serve_ema if use_ema is None else use_ema
        return self.adapter.mlp_and_gate("item", use_ema), self.adapter.mlp_and_gate("user", use_ema)

    def item_latents(self, s_items=None, adapter: bool = True, use_ema: bool | None = None) -> np.ndarray:
        """Latents of every item for one window (base latents when the adapter is off)."""
        if self.Zb is None:
            raise NotTrainedError("base tables are missing")
        if not adapter:
            return self.Zb
        (gi, wi), _ = self._serving_mlps(use_ema)
        s = np.zeros((self.catalog.n_items, self.cfg.d_s)) if s_items is None else s_items
        X = np.concatenate([self.catalog.item_feats["cf"], s], axis=1)
        return self.Zb + residual_forward(gi, wi, X)[0]

    def user_latents(self, users, s_user=None, adapter: bool = True, use_ema: bool | None = None) -> np.ndarray:
        hb = self.Hb[users]
        if not adapter:
            return hb
        _, (gu, wu) = self._serving_mlps(use_ema)
        s = np.zeros((len(users), self.cfg.d_s)) if s_user is None else s_user
        X = np.concatenate([self.catalog.user_cf[users], s], axis=1)
        return hb + residual_forward(gu, wu, X)[0]

    def item_tokens(self, s_items=None, adapter: bool = True, use_ema: bool | None = None) -> np.ndarray:
        if not adapter:
            return self.tok_base
        return self.token(self.item_latents(s_items, adapter, use_ema))

    def contexts(self, req: RequestBatch, adapter: bool = True, evidence: str = "on",
                 use_ema: bool | None = None) -> np.ndarray:
        """Backbone context vector per request.

        ``evidence`` is ``"on"``, ``"zero"`` (evidence tokens replaced by
        zeros) or ``"off"`` (no evidence segment).
        """
        h = self.user_latents(req.users, req.s_user, adapter, use_ema)
        hm = req.hist >= 0
        tok = np.where(hm[..., None], self.tok_base[np.where(hm, req.hist, 0)], 0.0)
        hmean = tok.sum(axis=1) / np.maximum(hm.sum(axis=1), 1)[:, None]
        ctx0 = self.backbone.context(self.token(h), hmean)
        if evidence == "off" or not self.use_evidence:
            return ctx0
        if evidence == "zero":
            evid_mean = np.zeros((len(req), self.cfg.d_ell))
        elif evidence == "on":
            eb = self.evidence_batch(req.anchor)
            zb_nbr = np.where(eb.valid[:, None, None], self.Zb[eb.nbr_idx], 0.0)
            evid_mean = evidence_forward(self.evid, h, zb_nbr, eb, self.n_attr_rows)[0] / self.cfg.E
        else:
            raise ValidationError(f"unknown evidence mode {evidence!r}")
        return ctx0 + evid_mean @ self.backbone.Me.T

    def score(self, req: RequestBatch, s_items=None, adapter: bool = True, evidence: str = "on",
              use_ema: bool | None = None, item_tokens=None, chunk: int = 512) -> np.ndarray:
        """``(R, C)`` candidate scores."""
        tok = self.item_tokens(s_items, adapter, use_ema) if item_tokens is None else item_tokens
        out = np.empty(req.cands.shape)
        for start in range(0, len(req), chunk):
            sl = slice(start, start + chunk)
            ctx = self.contexts(req.take(sl), adapter, evidence, use_ema)
            out[sl] = np.einsum("rd,rcd->rc", ctx, tok[req.cands[sl]])
        return out

    # -- explanations -------------------------------------------------------------------
    def evidence_pack(self, user: int, anchor: int, s_user=None, adapter: bool = True) -> EvidencePack:
        if anchor < 0:
            return EvidencePack()
        nbrs = tuple(zip(self.nbr_idx[anchor].tolist(), self.nbr_sims[anchor].tolist()))
        h = self.user_latents(np.array([user]), None if s_user is None else s_user[None, :], adapter)[0]
        attrs = attend_attributes(h, self.catalog.item_attrs[anchor], self.evid.table, self.evid.W_a,
                                  self.n_attr_rows)
        return EvidencePack(nbrs, attrs)

    def explain(self, user: int, item: int, anchor: int, s_user=None, adapter: bool = True):
        pack = self.evidence_pack(user, anchor, s_user, adapter)
        text = generate_rationale(pack, self.catalog.item_titles[item], self.catalog)
        return text, pack

    # -- persistence --------------------------------------------------------------------
    def tensors(self) -> dict:
        out = self.params(("base", "proj"))
        out.update({f"adapter_state/{k}": v for k, v in self.adapter.tensors().items()})
        return out

    def meta(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "n_items": self.catalog.n_items,
            "n_users": self.catalog.n_users,
            "trained": self.trained,
            "frozen": self.base.frozen,
            "adapter": self.adapter.meta(),
            "rng": rng_state(self.rng),
            "history": self.history,
        }

    def save(self, path, extra_meta: dict | None = None, extra_tensors: dict | None = None) -> None:
        meta = self.meta()
        meta.update(extra_meta or {})
        tensors = self.tensors()
        tensors.update(extra_tensors or {})
        checkpoint.save(path, tensors, meta)

    @classmethod
    def load(cls, path, catalog) -> tuple["Recommender", dict, dict]:
        tensors, meta = checkpoint.load(path)
        cfg = ModelConfig.from_dict(meta["config"])
        if meta["n_items"] != catalog.n_items or meta["n_users"] != catalog.n_users:
            raise DimensionError("checkpoint was trained on a different catalog")
        sys = cls.build(catalog, cfg)
        sys.restore(tensors, meta)
        return sys, tensors, meta

    def restore(self, tensors: dict, meta: dict) -> None:
        for k, v in self.params(("base", "proj")).items():
            if tensors[k].shape != v.shape:
                raise DimensionError(f"checkpoint tensor {k} has shape {tensors[k].shape}")
            v[...] = tensors[k]
        ad = {k[len("adapter_state/"):]: v for k, v in tensors.items() if k.startswith("adapter_state/")}
        self.adapter.load(ad, meta["adapter"])
        self.rng = rng_from_state(meta["rng"])
        self.trained = bool(meta["trained"])
        self.history = list(meta.get("history", []))
        if meta.get("frozen"):
            self.freeze_offline()
            self.refresh_tables()
