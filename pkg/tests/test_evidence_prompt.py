import math

import numpy as np
import pytest

from alignrec.config import ModelConfig
from alignrec.errors import DimensionError, ValidationError
from alignrec.evidence import (EvidenceCache, EvidenceEncoder, EvidencePack, attend_attributes, encode_evidence,
                               evidence_forward, faithfulness_loss, faithfulness_metric, load_or_rebuild,
                               neighbor_table, top_k_neighbors)
from alignrec.nn import Mlp2
from alignrec.prompt import (StubBackbone, assemble_prompt, generate_rationale, mentioned_entities,
                             project_to_tokens, rank_candidates, stub_score, ungrounded_entities)
from alignrec.data import Catalog


# -- neighbours ----------------------------------------------------------------

def brute_force_neighbors(cf, item, k):
    sims = []
    for j in range(len(cf)):
        if j != item:
            s = float(cf[item] @ cf[j] / (np.linalg.norm(cf[item]) * np.linalg.norm(cf[j])))
            sims.append((-s, j))
    sims.sort()
    return [j for _, j in sims[:k]]


def test_two_item_catalog():
    assert [i for i, _ in top_k_neighbors(0, np.array([[1.0, 0.0], [0.5, 0.5]]), 1)] == [1]


def test_duplicate_embeddings_tie_by_id():
    cf = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [0.0, 1.0]])
    assert [i for i, _ in top_k_neighbors(2, cf, 2)] == [0, 1]
    assert top_k_neighbors(2, cf, 2) == top_k_neighbors(2, cf, 2)


def test_neighbors_match_brute_force(rng):
    cf = rng.normal(size=(50, 6))
    idx, sims = neighbor_table(cf, 5)
    for item in range(50):
        expected = brute_force_neighbors(cf, item, 5)
        assert [i for i, _ in top_k_neighbors(item, cf, 5)] == expected
        assert idx[item].tolist() == expected
    assert np.all(np.diff(sims, axis=1) <= 0)


# -- attribute attention ------------------------------------------------------------

def test_single_attribute_weight_one(rng):
    out = attend_attributes(rng.normal(size=3), [2], rng.normal(size=(4, 3)), np.eye(3))
    assert out == [(2, 1.0)]


def test_identical_scores_are_uniform(rng):
    out = attend_attributes(np.zeros(3), [3, 0, 2, 1], rng.normal(size=(4, 3)), np.eye(3), m_attr=4)
    assert [a for a, _ in out] == [0, 1, 2, 3]
    assert all(w == pytest.approx(0.25) for _, w in out)


def test_attention_hand_sized():
    table = np.array([[1.0, 0.0], [0.0, 1.0]])
    W_a = np.array([[2.0, 0.0], [0.0, 1.0]])
    out = dict(attend_attributes(np.array([1.0, 1.0]), [0, 1], table, W_a))
    # scores 2 and 1
    assert out[0] == pytest.approx(math.exp(2) / (math.exp(2) + math.exp(1)))
    assert out[1] == pytest.approx(math.exp(1) / (math.exp(2) + math.exp(1)))


# -- evidence encoding ---------------------------------------------------------------

def tiny_encoder():
    d = 2
    nbr = Mlp2(np.eye(3)[:, :3], np.zeros(3), np.eye(3), np.zeros(3))
    attr = Mlp2.zeros(3, 3, 3)
    return EvidenceEncoder(nbr, attr, np.ones((2, d)), np.eye(d))


def test_empty_pack_gives_zero_tokens():
    assert np.all(encode_evidence(EvidencePack(), tiny_encoder(), np.ones((3, 2)), 4) == 0)


def test_one_neighbor_pack_by_hand():
    latents = np.array([[0.0, 0.0], [1.0, -2.0]])
    tok = encode_evidence(EvidencePack(((1, 0.5),)), tiny_encoder(), latents, 4)
    np.testing.assert_array_equal(tok[0], [1.0, 0.0, 0.5])    # relu([1, -2, 0.5])
    assert np.all(tok[1:] == 0)
    np.testing.assert_array_equal(tok, encode_evidence(EvidencePack(((1, 0.5),)), tiny_encoder(), latents, 4))


def test_pack_validation():
    with pytest.raises(ValidationError):
        EvidencePack(((1, 0.1), (2, 0.9)))
    with pytest.raises(ValidationError):
        EvidencePack((), ((0, 0.8), (1, 0.8)))


def test_batched_evidence_matches_pack_encoding(trained_system):
    system = trained_system
    cfg = system.cfg
    anchors = np.array([0, 5, 17, -1])
    users = np.array([1, 2, 3, 4])
    h = system.Hb[users]
    eb = system.evidence_batch(anchors)
    zb = np.where(eb.valid[:, None, None], system.Zb[eb.nbr_idx], 0.0)
    evid, _, _ = evidence_forward(system.evid, h, zb, eb, system.n_attr_rows)
    for r, (u, a) in enumerate(zip(users, anchors)):
        pack = system.evidence_pack(int(u), int(a), adapter=False)
        tokens = encode_evidence(pack, system.evid, system.Zb, cfg.E)
        np.testing.assert_allclose(evid[r], tokens.sum(axis=0), rtol=1e-10, atol=1e-12)


# -- faithfulness -----------------------------------------------------------------------

def test_faithfulness_hinge():
    assert faithfulness_loss(0.5, 0.5, 0.05, "prose") == pytest.approx(0.05)
    assert faithfulness_loss(1.0, 0.0, 0.05, "prose") == 0.0
    assert faithfulness_loss(0.60, 0.50, 0.05, "formula") == pytest.approx(0.05)
    with pytest.raises(ValidationError):
        faithfulness_loss(0.5, 0.5, 0.05, "other")


def test_faithfulness_metric_no_dependence():
    class Req:
        cands = np.array([[3, 1, 2], [0, 4, 5]])

        def __len__(self):
            return 2

    scores = np.array([[2.0, 1.0, 0.0], [0.0, 1.0, 0.5]])
    acc_with, acc_without, drop = faithfulness_metric(lambda r, zero: scores, Req())
    assert (acc_with, acc_without, drop) == (0.5, 0.5, 0.0)


def test_faithfulness_zero_when_evidence_ignored(trained_system, small_bundle):
    from alignrec.evaluation import build_requests
    inter = small_bundle.interactions
    req = build_requests(trained_system, inter, np.arange(2500, 2600), np.arange(2600), np.random.default_rng(0))
    _, _, drop = faithfulness_metric(lambda r, zero: trained_system.score(r, adapter=False, evidence="off"), req)
    assert drop == 0.0


def test_evidence_cache_staleness(tmp_path, small_bundle):
    path = tmp_path / "evidence_cache.json"
    cache = load_or_rebuild(path, small_bundle.catalog, 3, now=1000.0)
    assert path.exists() and len(cache.entries) == small_bundle.catalog.n_items
    same = load_or_rebuild(path, small_bundle.catalog, 3, now=1000.0 + 3600)
    assert same.built_at == 1000.0
    rebuilt = load_or_rebuild(path, small_bundle.catalog, 3, now=1000.0 + 2 * 86400)
    assert rebuilt.built_at == 1000.0 + 2 * 86400
    assert EvidenceCache.load(path).entries == rebuilt.entries


# -- prompts ------------------------------------------------------------------------------

def test_token_projection():
    zero = Mlp2.zeros(3, 4, 5)
    np.testing.assert_array_equal(project_to_tokens(np.ones(3), zero).vector, np.zeros(5))
    hand = Mlp2(np.eye(2), np.zeros(2), [[1.0, 1.0], [1.0, -1.0], [0.0, 2.0]], [0.0, 0.0, 1.0])
    np.testing.assert_array_equal(project_to_tokens(np.array([2.0, -1.0]), hand).vector, [2.0, 2.0, 1.0])
    with pytest.raises(DimensionError):
        project_to_tokens(np.ones(4), hand)


def test_prompt_length_and_segments(rng):
    d = 4
    b = assemble_prompt(rng.normal(size=d), rng.normal(size=(50, d)), rng.normal(size=(16, d)),
                        rng.normal(size=(20, d)), list(range(20)), L=50, E=16)
    assert b.n_tokens == 87
    assert b.segments[:2] == ["USR", "HIST"] and b.segments[-1] == "CAND"
    empty = assemble_prompt(np.ones(d), np.zeros((0, d)), np.zeros((16, d)), np.ones((20, d)), list(range(20)),
                            L=50, E=16)
    assert empty.n_tokens == 1 + 16 + 20
    assert np.all(empty.segment("EVID") == 0)


def test_prompt_truncates_to_recent_history():
    hist = np.arange(10.0).reshape(5, 2)
    b = assemble_prompt(np.zeros(2), hist, np.zeros((0, 2)), np.ones((1, 2)), ["c"], L=2)
    np.testing.assert_array_equal(b.segment("HIST"), hist[-2:])


def test_stub_scores():
    bb = StubBackbone(3, seed=0, noise=0.0)
    usr = np.array([1.0, 0.0, 0.0])
    cands = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    b = assemble_prompt(usr, np.zeros((0, 3)), np.zeros((2, 3)), cands, ["a", "b", "c"], L=5)
    s = stub_score(b, bb)
    assert s[0] == s[2] and s[0] > s[1]
    np.testing.assert_array_equal(s, bb.score(b))


def test_rank_candidates():
    assert rank_candidates([0.9, 0.1], ["c1", "c2"]) == ["c1", "c2"]
    assert rank_candidates([1.0, 1.0, 1.0], [3, 1, 2]) == [1, 2, 3]
    rng = np.random.default_rng(3)
    scores = rng.normal(size=20)
    ids = list(range(20))
    assert rank_candidates(scores, ids) == sorted(ids, key=lambda i: (-scores[i], i))


def toy_catalog():
    titles = ["Interstellar", "Gravity", "Arrival", "Heat"]
    return Catalog(["a", "b", "c", "d"], ["u"], {m: np.eye(4) for m in ("cf", "txt", "vis", "aud")},
                   np.ones((4, 4), dtype=bool), np.eye(1, 4), [(0,), (0,), (1,), (1,)], ["Sci-Fi", "Crime"], titles)


def test_rationale_empty_pack():
    cat = toy_catalog()
    text = generate_rationale(EvidencePack(), "Heat", cat)
    assert "recommended based on your overall history" in text
    assert mentioned_entities(text) == ["Heat"]


def test_rationale_names_only_pack_entities():
    cat = toy_catalog()
    pack = EvidencePack(((0, 0.9), (1, 0.8)), ((0, 0.7),))
    text = generate_rationale(pack, "Arrival", cat)
    assert set(mentioned_entities(text)) == {"Arrival", "Interstellar", "Gravity", "Sci-Fi"}
    assert ungrounded_entities(text, pack, "Arrival", cat) == []
    assert text == generate_rationale(pack, "Arrival", cat)
    assert ungrounded_entities('Try "Heat".', pack, "Arrival", cat) == ["Heat"]
