"""Synthetic benchmark presets shared by the CLI, the acceptance tests and
the demos.  Each ``*_setup`` returns a dataset spec plus model config; each
``run_*`` trains and evaluates one seed."""

from __future__ import annotations

import math

import numpy as np

from .config import ModelConfig
from .data import SyntheticSpec, generate_synthetic
from .evaluation import SplitSpec, StreamRunner, evaluate, make_splits
from .system import Recommender
from .training import pretrain, training_tuples
from .linalg import seeded_rng

# small feature dims keep desk-scale runs quick; the generator defaults are larger
DIMS = dict(d=32, d_t=32, d_vis=64, d_aud=64)


def base_config(seed: int = 0, **changes) -> ModelConfig:
    cfg = ModelConfig(d_ell=32, hidden=64, E=8, L=20, k=4, m_attr=2, epochs=5, batch=256, seed=seed, **DIMS)
    return cfg.replace(**changes) if changes else cfg.validate()


def drift_setup(seed: int = 0, angle: float = math.pi / 2):
    """10k users, 1k items, 30 online windows of 500 events, rotation from window 10."""
    spec = SyntheticSpec(n_users=10_000, n_items=1_000, n_interactions=50_000, window_events=500,
                         drift_onset_window=10, drift_angle=angle, seed=seed, **DIMS)
    cfg = base_config(seed, epochs=3, online_epochs=5, lr_adapter=5e-3)
    return spec, cfg


def cold_setup(seed: int = 0, modality_dependence: float = 0.9):
    spec = SyntheticSpec(n_users=1_000, n_items=500, n_interactions=20_000, cold_penalty=3.0,
                         modality_dependence=modality_dependence, seed=seed, **DIMS)
    return spec, base_config(seed)


def evidence_setup(seed: int = 0, strength: float = 0.9):
    spec = SyntheticSpec(n_users=1_000, n_items=500, n_interactions=20_000, evidence_dependence=strength,
                         seed=seed, **DIMS)
    return spec, base_config(seed, faith_mode="prose")


def small_setup(seed: int = 0):
    spec = SyntheticSpec(n_users=200, n_items=120, n_interactions=3_000, window_events=150, seed=seed, **DIMS)
    return spec, base_config(seed, epochs=2)


PRESETS = {"drift": drift_setup, "cold": cold_setup, "evidence": evidence_setup, "small": small_setup}


def run_drift(seed: int = 0, setup=None, log=None) -> dict:
    """Frozen-base replay vs dynamic adapter on the drift stream."""
    spec, cfg = (setup or drift_setup)(seed)
    bundle = generate_synthetic(spec)
    split = SplitSpec("streaming", window_size=spec.window_events)
    splits = make_splits(bundle.interactions, split, seed)
    system = Recommender.build(bundle.catalog, cfg)
    pretrain(system, bundle.interactions.take(splits.train), log=log)
    static = StreamRunner(system, bundle.interactions, splits, split, adapter=False, update=False).run()
    dynamic = StreamRunner(system, bundle.interactions, splits, split, adapter=True, update=True).run()
    return {"static": static, "dynamic": dynamic, "onset": spec.drift_onset_window}


def run_cold(seed: int = 0, setup=None) -> dict:
    """Cold-item Hit@10 of the multimodal system, its test-time modality
    drops, and the cf-only ablation."""
    spec, cfg = (setup or cold_setup)(seed)
    bundle = generate_synthetic(spec)
    inter = bundle.interactions
    splits = make_splits(inter, SplitSpec("cold_start", cold_threshold=cfg.cold_threshold), seed)
    known = np.arange(len(inter))
    out = {"n_test": int(len(splits.test))}
    for name, c in (("full", cfg), ("cf_only", cfg.replace(use_multimodal=False, use_text=False))):
        system = Recommender.build(bundle.catalog, c)
        pretrain(system, inter.take(splits.train))
        out[name] = evaluate(system, inter, splits.test, known, seed=seed).metrics["hit@10"]
        if name == "full":
            for drop in (("vis",), ("vis", "txt")):
                view = system.with_catalog(bundle.catalog.with_modalities_dropped(*drop))
                out["drop_" + "_".join(drop)] = evaluate(view, inter, splits.test, known, seed=seed).metrics["hit@10"]
    return out


def run_faithfulness(seed: int = 0, setup=None, n_rationales: int = 1000) -> dict:
    """Faithfulness drop on the evidence-dependent data plus rationales for
    ``n_rationales`` test events."""
    from .data import user_history
    from .prompt import ungrounded_entities

    spec, cfg = (setup or evidence_setup)(seed)
    bundle = generate_synthetic(spec)
    inter = bundle.interactions
    splits = make_splits(inter, SplitSpec("standard"), seed)
    system = Recommender.build(bundle.catalog, cfg)
    pretrain(system, inter.take(splits.train))
    known = np.arange(len(inter))
    rep = evaluate(system, inter, splits.test, known, seed=seed, faithfulness=True)
    q = splits.test[:n_rationales]
    _, anchor = user_history(inter.users, inter.items, known, inter.users[q], q, cfg.L)
    ungrounded, texts, examples = 0, [], []
    for u, i, a in zip(inter.users[q], inter.items[q], anchor):
        text, pack = system.explain(int(u), int(i), int(a))
        ungrounded += len(ungrounded_entities(text, pack, bundle.catalog.item_titles[i], bundle.catalog))
        texts.append(text)
        # events with no earlier history fall back to a generic sentence; show ones with evidence
        if a >= 0 and len(examples) < 3:
            examples.append(text)
    return {**rep.faithfulness, "hit@10": rep.metrics["hit@10"], "n_rationales": len(texts),
            "ungrounded": ungrounded, "n_without_history": int(np.sum(anchor < 0)), "examples": examples}


def gradcheck_setup(seed: int = 0):
    """d=8, batch-4 toy with every term active, for analytic-vs-numeric checks.

    Returns ``(system, batch, groups)``.  Adapter parameters, the EWC anchor
    and the window summaries are randomised so no block sits at a trivial
    point, and the faithfulness margin is raised so its hinge is active.
    """
    spec = SyntheticSpec(n_users=30, n_items=20, n_interactions=200, latent_dim=4, d=8, d_t=8, d_vis=12,
                         d_aud=10, n_attributes=6, attrs_per_item=3, seed=seed + 1)
    bundle = generate_synthetic(spec)
    cfg = ModelConfig(d=8, d_t=8, d_vis=12, d_aud=10, d_ell=8, hidden=16, E=6, L=5, k=3, m_attr=2, batch=4,
                      seed=seed).replace(delta=0.5)
    system = Recommender.build(bundle.catalog, cfg)
    rng = seeded_rng([seed, 3])
    st = system.adapter
    for v in st.params().values():
        v[...] = rng.normal(scale=0.5, size=v.shape)
    st.refresh_anchor({k: np.abs(rng.normal(size=v.shape)) for k, v in st.params().items()})
    for v in st.params().values():
        v += rng.normal(scale=0.1, size=v.shape)
    tuples = training_tuples(system, bundle.interactions, rng)
    for arr in (tuples.s_user, tuples.s_pos, tuples.s_neg):
        arr[:] = rng.normal(size=arr.shape)
    batch = tuples.take(np.array([50, 120, 150, 199]))
    return system, batch, ("base", "proj", "adapter")


def check_gradients(seed: int = 0, max_coords: int | None = 12):
    from .gradcheck import finite_diff_check

    system, batch, groups = gradcheck_setup(seed)
    _, grads, _, _ = system.objective(batch, groups=groups)

    def loss_fn():
        loss, _, sig, _ = system.objective(batch, groups=groups)
        return loss, sig

    return finite_diff_check(loss_fn, system.params(groups), grads, max_coords=max_coords, seed=seed)
