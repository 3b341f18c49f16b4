import json

import numpy as np
import pytest
from scipy import stats

from alignrec.cli import main
from alignrec.data import (Catalog, DatasetBundle, SyntheticSpec, generate_synthetic, ingest, read_features,
                           user_history, write_bundle, write_features)
from alignrec.errors import DanglingIdError, DimMismatchError, TimestampOrderError, ValidationError
from alignrec.types import Interactions


def toy_bundle():
    feats = {"cf": np.arange(6.0).reshape(3, 2), "txt": np.ones((3, 3)), "vis": np.zeros((3, 2)),
             "aud": np.ones((3, 1))}
    mask = np.array([[1, 1, 0, 1], [1, 0, 0, 1], [1, 1, 0, 0]], dtype=bool)
    for k, m in enumerate(("cf", "txt", "vis", "aud")):
        feats[m][~mask[:, k]] = 0.0
    cat = Catalog(["10", "11", "12"], ["a", "b"], feats, mask, np.ones((2, 2)), [(0,), (0, 1), ()],
                  ["Drama", "Comedy"], ["T10", "T11", "T12"])
    inter = Interactions([0, 1, 0, 1, 0], [0, 0, 1, 2, 2], [1.0, 2.0, 3.0, 4.0, 5.0])
    return DatasetBundle(cat, inter)


def test_toy_roundtrip(tmp_path):
    d = write_bundle(toy_bundle(), tmp_path / "toy")
    b = ingest(d, streaming=True)
    assert (b.catalog.n_items, b.catalog.n_users, len(b.interactions)) == (3, 2, 5)
    assert b.catalog.item_mask.tolist() == toy_bundle().catalog.item_mask.tolist()
    assert b.catalog.item_attrs == [(0,), (0, 1), ()]
    assert b.catalog.item_titles == ["T10", "T11", "T12"]
    np.testing.assert_array_equal(b.catalog.item_feats["txt"], toy_bundle().catalog.item_feats["txt"])


def test_dangling_item_names_line(tmp_path):
    d = write_bundle(toy_bundle(), tmp_path / "toy")
    lines = (d / "interactions.tsv").read_text().splitlines()
    lines[2] = "a\t99\t3.0"
    (d / "interactions.tsv").write_text("\n".join(lines) + "\n")
    with pytest.raises(DanglingIdError, match="dangling id") as exc:
        ingest(d)
    assert exc.value.locator == "interactions.tsv:3"


def test_feature_dim_mismatch(tmp_path):
    d = write_bundle(toy_bundle(), tmp_path / "toy")
    ids, mat = read_features(d / "item_aud.bin")
    write_features(d / "item_aud.bin", ids, np.ones((len(ids), 4)))
    with pytest.raises(DimMismatchError):
        ingest(d)


def test_streaming_ingest_rejects_disorder(tmp_path):
    d = write_bundle(toy_bundle(), tmp_path / "toy")
    lines = (d / "interactions.tsv").read_text().splitlines()
    lines[0], lines[4] = lines[4], lines[0]
    (d / "interactions.tsv").write_text("\n".join(lines) + "\n")
    with pytest.raises(TimestampOrderError):
        ingest(d, streaming=True)
    b = ingest(d)
    assert np.all(np.diff(b.interactions.times) >= 0)


def test_feature_file_truncation(tmp_path):
    path = tmp_path / "f.bin"
    write_features(path, ["x", "y"], np.ones((2, 3)))
    ids, mat = read_features(path)
    assert ids == ["x", "y"] and mat.shape == (2, 3)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ValidationError):
        read_features(path)


def test_generator_is_deterministic(tmp_path):
    spec = SyntheticSpec(n_users=30, n_items=20, n_interactions=200, d_vis=16, d_aud=16, seed=5)
    a = write_bundle(generate_synthetic(spec), tmp_path / "a")
    b = write_bundle(generate_synthetic(spec), tmp_path / "b")
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_full_dependence_embeds_latent_exactly():
    b = generate_synthetic(SyntheticSpec(n_users=30, n_items=40, n_interactions=100, modality_dependence=1.0,
                                         d_vis=16, d_aud=16, seed=2))
    Q = b.truth["Q"]
    for k, m in enumerate(("txt", "vis", "aud")):
        rows = b.catalog.item_mask[:, k + 1]
        np.testing.assert_array_equal(b.catalog.item_feats[m][rows], (Q @ b.truth["embed"][m].T)[rows])


def test_zero_drift_angle_is_null():
    spec = SyntheticSpec(n_users=500, n_items=30, n_interactions=20_000, drift_onset_window=0, window_events=500,
                         drift_angle=0.0, cold_fraction=0.0, d_vis=16, d_aud=16, seed=3)
    b = generate_synthetic(spec)
    onset = spec.drift_onset_event
    items = b.interactions.items
    pre = np.bincount(items[onset - 10_000:onset], minlength=30)
    post = np.bincount(items[onset:onset + 10_000 if onset + 10_000 <= len(items) else None], minlength=30)
    n = min(pre.sum(), post.sum())
    pre = np.bincount(items[onset - n:onset], minlength=30)
    post = np.bincount(items[onset:onset + n], minlength=30)
    keep = (pre + post) > 0
    _, p, _, _ = stats.chi2_contingency(np.stack([pre[keep], post[keep]]))
    assert p > 0.01


def test_drift_angle_changes_distribution():
    spec = SyntheticSpec(n_users=500, n_items=30, n_interactions=20_000, drift_onset_window=0, window_events=500,
                         drift_angle=np.pi / 2, cold_fraction=0.0, d_vis=16, d_aud=16, seed=3)
    b = generate_synthetic(spec)
    onset = spec.drift_onset_event
    n = len(b.interactions) - onset
    pre = np.bincount(b.interactions.items[onset - n:onset], minlength=30)
    post = np.bincount(b.interactions.items[onset:], minlength=30)
    keep = (pre + post) > 0
    assert stats.chi2_contingency(np.stack([pre[keep], post[keep]]))[1] < 0.01


def test_user_history_oracle(rng):
    users = rng.integers(0, 4, size=40)
    items = rng.integers(0, 9, size=40)
    keys = np.arange(40)
    hist, anchor = user_history(users, items, keys, users, keys, 3)
    for q in range(40):
        prior = [int(items[j]) for j in range(q) if users[j] == users[q]]
        expect = [-1] * max(0, 3 - len(prior)) + prior[-3:]
        assert hist[q].tolist() == expect
        assert anchor[q] == (prior[-1] if prior else -1)


# -- command line -----------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--preset", "small", "--out", str(out)]) == 0
    assert main(["pretrain-base", "--data", str(out / "data"), "--out", str(out), "--seed", "0"]) == 0
    return out


def test_cli_generate_and_ingest(cli_run, capsys):
    assert main(["ingest", str(cli_run / "data"), "--streaming"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_interactions"] == 3000


def test_cli_pretrain_outputs(cli_run):
    assert (cli_run / "model.ckpt").exists()
    ids, lat = read_features(cli_run / "latents.bin")
    assert len(ids) == 120 and np.all(np.isfinite(lat))


def test_cli_evaluate_with_model(cli_run, capsys):
    assert main(["evaluate", "--data", str(cli_run / "data"), "--model", str(cli_run / "model.ckpt"),
                 "--out", str(cli_run)]) == 0
    assert "hit@10" in capsys.readouterr().out


def test_cli_explain(cli_run, capsys):
    dump = cli_run / "prompt.bin"
    assert main(["explain", "--data", str(cli_run / "data"), "--model", str(cli_run / "model.ckpt"),
                 "--user", "u000", "--item", "i005", "--out", str(cli_run), "--dump-prompt", str(dump)]) == 0
    text = capsys.readouterr().out
    assert text.startswith('Recommended "Item 5"')
    assert (cli_run / "evidence_cache.json").exists() and dump.exists()


def test_cli_quantize(cli_run, capsys):
    assert main(["quantize", "--in", str(cli_run / "latents.bin"), "--M", "4", "--K", "16",
                 "--out", str(cli_run)]) == 0
    assert "mse=" in capsys.readouterr().out


def test_cli_stream_resume_matches(tmp_path, cli_run):
    data = str(cli_run / "data")
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["run-stream", "--data", data, "--mode", "dynamic", "--out", str(full)]) == 0
    assert main(["run-stream", "--data", data, "--mode", "dynamic", "--stop-after", "3", "--out", str(part)]) == 0
    name = "stream_dynamic_seed0"
    partial = json.loads((part / f"{name}.jsonl").read_text().splitlines()[0])
    assert partial["n_windows"] == 6
    assert main(["run-stream", "--data", data, "--resume", str(part / f"{name}.ckpt"), "--out", str(part)]) == 0
    assert (full / f"{name}.jsonl").read_text() == (part / f"{name}.jsonl").read_text()


def test_cli_bad_data_exit_code(tmp_path, capsys):
    assert main(["ingest", str(tmp_path)]) == 2
    assert "manifest" in capsys.readouterr().err
