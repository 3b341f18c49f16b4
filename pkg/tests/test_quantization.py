import numpy as np
import pytest

from alignrec.errors import DimensionError, NotTrainedError, ValidationError
from alignrec.quantization import (PQCode, PQCodebook, decode, decode_batch, encode, encode_batch, memory_ratio,
                                   reconstruction_mse, train_codebook)


def exhaustive_encode(cb, x):
    ds = cb.sub_dim
    out = []
    for m in range(cb.M):
        best, best_d = 0, np.inf
        for k in range(cb.K):
            d = float(np.sum((x[m * ds:(m + 1) * ds] - cb.centroids[m, k]) ** 2))
            if d < best_d:
                best, best_d = k, d
        out.append(best)
    return tuple(out)


def test_single_centroid_is_mean(rng):
    X = rng.normal(size=(40, 6))
    cb = train_codebook(X, M=3, K=1, iters=3)
    np.testing.assert_allclose(cb.centroids[:, 0, :].reshape(-1), X.mean(axis=0), atol=1e-12)


def test_one_centroid_per_vector_is_lossless(rng):
    X = rng.normal(size=(12, 4))
    cb = train_codebook(X, M=2, K=12, iters=5)
    assert reconstruction_mse(cb, X) == 0.0


def test_encode_centroid_concatenation(rng):
    cb = train_codebook(rng.normal(size=(200, 8)), M=4, K=8, iters=5)
    idx = (3, 0, 7, 5)
    x = np.concatenate([cb.centroids[m, k] for m, k in enumerate(idx)])
    assert encode(cb, x).indices == idx
    np.testing.assert_array_equal(decode(cb, encode(cb, x)), x)


def test_encode_matches_exhaustive_scan(rng):
    cb = train_codebook(rng.normal(size=(300, 8)), M=4, K=16, iters=5)
    for x in rng.normal(size=(50, 8)):
        assert encode(cb, x).indices == exhaustive_encode(cb, x)


def test_ties_go_to_lowest_index():
    cents = np.array([[[1.0], [-1.0], [1.0]]])
    cb = PQCodebook(1, 3, cents, trained=True)
    assert encode(cb, np.array([0.0])).indices == (0,)
    assert encode(cb, np.array([1.0])).indices == (0,)


def test_sse_never_increases(rng):
    cb = train_codebook(rng.normal(size=(500, 8)), M=2, K=16, iters=10)
    for h in cb.sse_history:
        assert all(b <= a + 1e-9 for a, b in zip(h, h[1:]))


def test_training_is_deterministic(rng):
    X = rng.normal(size=(300, 8))
    a = train_codebook(X, M=2, K=8, iters=5, seed=4)
    b = train_codebook(X, M=2, K=8, iters=5, seed=4)
    np.testing.assert_array_equal(a.centroids, b.centroids)


def test_errors(rng):
    with pytest.raises(DimensionError):
        train_codebook(rng.normal(size=(20, 7)), M=2, K=2)
    with pytest.raises(ValidationError):
        train_codebook(rng.normal(size=(3, 4)), M=2, K=4)
    untrained = PQCodebook(2, 2, np.zeros((2, 2, 2)))
    with pytest.raises(NotTrainedError):
        encode(untrained, np.zeros(4))
    cb = train_codebook(rng.normal(size=(20, 4)), M=2, K=4, iters=2)
    with pytest.raises(ValidationError):
        decode(cb, PQCode((0, 4)))
    with pytest.raises(DimensionError):
        encode_batch(cb, np.zeros((2, 6)))


def test_memory_ratio():
    assert memory_ratio(256, 8, 256) == 256.0
    assert memory_ratio(256, 8, 256) >= 4


def test_save_load_roundtrip(tmp_path, rng):
    X = rng.normal(size=(100, 8))
    cb = train_codebook(X, M=4, K=4, iters=3)
    codes = encode_batch(cb, X)
    cb.save(tmp_path / "pq.bin", codes)
    cb2, codes2 = PQCodebook.load(tmp_path / "pq.bin")
    np.testing.assert_array_equal(cb2.centroids, cb.centroids)
    np.testing.assert_array_equal(codes2, codes)
    np.testing.assert_array_equal(decode_batch(cb2, codes2), decode_batch(cb, codes))
