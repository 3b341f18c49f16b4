"""Soft-prompt assembly, the frozen scoring backbone and rationales.

A prompt is an ordered token matrix with segments ``USR`` (1 token), ``HIST``
(up to L tokens), ``EVID`` (E tokens) and ``CAND`` (C tokens).  The in-repo
backbone is a deterministic stub: a fixed-seed linear layer mixes the user
token, the mean history token and the mean evidence token into a context
vector, and each candidate is scored by its dot product with that context.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import DimensionError, ValidationError
from .linalg import DTYPE, seeded_rng
from .nn import Mlp2
from .types import JointLatent

SEGMENTS = ("USR", "HIST", "EVID", "CAND")


@dataclass(frozen=True)
class SoftToken:
    vector: np.ndarray
    segment: str

    def __post_init__(self):
        if self.segment not in SEGMENTS:
            raise ValidationError(f"unknown segment {self.segment!r}")
        v = np.asarray(self.vector, DTYPE)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValidationError("soft token must be a finite vector")
        object.__setattr__(self, "vector", v)


@dataclass
class PromptBundle:
    tokens: np.ndarray             # (T, d_ell)
    segments: list                 # segment label per row
    candidate_ids: list

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    def segment(self, name: str) -> np.ndarray:
        sel = np.array([s == name for s in self.segments], dtype=bool)
        return self.tokens[sel]

    def dump(self, path) -> None:
        checkpoint.save(path, {"tokens": self.tokens},
                        {"segments": self.segments, "candidate_ids": [str(c) for c in self.candidate_ids]})


def project_to_tokens(latent, projector: Mlp2, segment: str = "CAND") -> SoftToken:
    vec = latent.vector if isinstance(latent, JointLatent) else np.asarray(latent, DTYPE)
    if vec.shape != (projector.in_dim,):
        raise DimensionError(f"latent must have dim {projector.in_dim}")
    return SoftToken(projector(vec), segment)


def assemble_prompt(user_token, history_tokens, evidence_tokens, candidate_tokens, candidate_ids, L: int,
                    E: int | None = None) -> PromptBundle:
    """Order segments USR, HIST, EVID, CAND.

    History longer than ``L`` keeps the most recent ``L`` tokens (input is
    oldest first).  The evidence block is always ``E`` rows.
    """
    cand = np.atleast_2d(np.asarray(candidate_tokens, DTYPE))
    if len(candidate_ids) == 0 or cand.size == 0:
        raise ValidationError("a prompt needs at least one candidate")
    if cand.shape[0] != len(candidate_ids):
        raise DimensionError("candidate tokens and ids differ in count")
    d_ell = cand.shape[1]
    usr = np.asarray(user_token.vector if isinstance(user_token, SoftToken) else user_token, DTYPE)[None, :]
    hist = np.asarray(history_tokens, DTYPE).reshape(-1, d_ell)
    if L <= 0:
        hist = hist[:0]
    elif hist.shape[0] > L:
        hist = hist[-L:]
    evid = np.asarray(evidence_tokens, DTYPE).reshape(-1, d_ell)
    if E is not None and evid.shape[0] != E:
        raise DimensionError(f"evidence block must have {E} rows, got {evid.shape[0]}")
    tokens = np.concatenate([usr, hist, evid, cand], axis=0)
    segs = ["USR"] + ["HIST"] * hist.shape[0] + ["EVID"] * evid.shape[0] + ["CAND"] * cand.shape[0]
    return PromptBundle(tokens, segs, list(candidate_ids))


class StubBackbone:
    """Frozen scorer: ``score_c = (Mu usr + Mh mean(hist) + Me mean(evid)) . cand_c``.

    Each mixing block is a fixed-seed near-identity matrix.  The backbone is
    never trained; its arrays are read-only.
    """

    frozen = True

    def __init__(self, d_ell: int, seed: int = 0, noise: float = 0.5):
        rng = seeded_rng([seed, 0x5EED])
        blocks = [np.eye(d_ell) + noise * rng.normal(size=(d_ell, d_ell)) / np.sqrt(d_ell) for _ in range(3)]
        self.mix = np.concatenate(blocks, axis=1)
        self.mix.flags.writeable = False
        self.d_ell = d_ell

    @property
    def Mu(self):
        return self.mix[:, :self.d_ell]

    @property
    def Mh(self):
        return self.mix[:, self.d_ell:2 * self.d_ell]

    @property
    def Me(self):
        return self.mix[:, 2 * self.d_ell:]

    def context(self, usr, hist_mean, evid_mean=None):
        """Batched context vectors; ``evid_mean=None`` means no evidence segment."""
        ctx = usr @ self.Mu.T + hist_mean @ self.Mh.T
        if evid_mean is not None:
            ctx = ctx + evid_mean @ self.Me.T
        return ctx

    def score(self, bundle: PromptBundle) -> np.ndarray:
        return stub_score(bundle, self)

    def generate(self, pack, recommended_title, catalog, templates=None) -> str:
        return generate_rationale(pack, recommended_title, catalog, templates)


def stub_score(bundle: PromptBundle, backbone: StubBackbone) -> np.ndarray:
    usr = bundle.segment("USR")
    hist = bundle.segment("HIST")
    evid = bundle.segment("EVID")
    cand = bundle.segment("CAND")
    d = backbone.d_ell
    hmean = hist.mean(axis=0) if hist.shape[0] else np.zeros(d)
    emean = evid.mean(axis=0) if evid.shape[0] else None
    ctx = backbone.context(usr, hmean[None, :], None if emean is None else emean[None, :])[0]
    return cand @ ctx


def rank_candidates(scores, candidate_ids) -> list:
    """Candidate ids by descending score; ties by ascending id."""
    scores = np.asarray(scores, DTYPE)
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores must be finite")
    ids = np.asarray(candidate_ids)
    order = np.lexsort((ids, -scores))
    return [candidate_ids[i] for i in order]


# -- rationales --------------------------------------------------------------------

TEMPLATES = {
    "both": ('Recommended "{item}" based on items related to your latest pick ({neighbors}) '
             'and the attributes you favour ({attrs}).'),
    "neighbors": 'Recommended "{item}" based on items related to your latest pick ({neighbors}).',
    "attributes": 'Recommended "{item}" based on the attributes you favour ({attrs}).',
    "empty": 'Recommended "{item}": recommended based on your overall history.',
}

_QUOTED = re.compile(r'"([^"]*)"')


def _join(names):
    quoted = [f'"{n}"' for n in names]
    if len(quoted) <= 1:
        return "".join(quoted)
    return ", ".join(quoted[:-1]) + " and " + quoted[-1]


def generate_rationale(pack, recommended_title, catalog, templates=None, max_neighbors: int = 2,
                       max_attrs: int = 2) -> str:
    """One templated sentence naming only entities from ``pack``.

    Entity names are always rendered inside double quotes, which is what the
    groundedness check parses.
    """
    templates = TEMPLATES if templates is None else templates
    nbrs = [catalog.item_titles[i] for i, _ in pack.neighbors[:max_neighbors]]
    attrs = [catalog.attr_names[a] for a, _ in pack.attributes[:max_attrs]]
    if nbrs and attrs:
        key = "both"
    elif nbrs:
        key = "neighbors"
    elif attrs:
        key = "attributes"
    else:
        key = "empty"
    return templates[key].format(item=recommended_title, neighbors=_join(nbrs), attrs=_join(attrs))


def mentioned_entities(text: str) -> list:
    return _QUOTED.findall(text)


def ungrounded_entities(text: str, pack, recommended_title, catalog) -> list:
    """Quoted names in ``text`` that are neither the recommended item nor in ``pack``."""
    allowed = {recommended_title}
    allowed.update(catalog.item_titles[i] for i, _ in pack.neighbors)
    allowed.update(catalog.attr_names[a] for a, _ in pack.attributes)
    return [name for name in mentioned_entities(text) if name not in allowed]
