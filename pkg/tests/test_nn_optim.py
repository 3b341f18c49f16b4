import numpy as np
import pytest

from alignrec import checkpoint
from alignrec.errors import (ChecksumError, CheckpointError, FrozenParameterError, NonFiniteError,
                             VersionMismatchError)
from alignrec.gradcheck import finite_diff_check
from alignrec.nn import Mlp2, count_flops
from alignrec.optim import EMA, OptimState, adamw_step, ema_update


def oracle_forward(m, x):
    h = np.maximum(0.0, m.W1 @ x + m.b1)
    return m.W2 @ h + m.b2


def test_mlp_zero_and_identity():
    z = Mlp2.zeros(3, 4, 2)
    np.testing.assert_array_equal(z(np.array([1.0, -2.0, 3.0])), [0.0, 0.0])
    m = Mlp2(np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(m(np.array([-1.0, 2.0])), [0.0, 2.0])


def test_mlp_matches_oracle(rng):
    m = Mlp2.init(5, 7, 3, rng)
    X = rng.normal(size=(6, 5))
    batch = m(X)
    for i in range(6):
        np.testing.assert_allclose(batch[i], oracle_forward(m, X[i]), rtol=1e-12, atol=1e-12)


def test_backward_zero_upstream(rng):
    m = Mlp2.init(4, 5, 3, rng)
    _, cache = m.forward(rng.normal(size=(2, 4)))
    grads, dx = m.backward(cache, np.zeros((2, 3)))
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(dx == 0)


def test_backward_single_unit_by_hand():
    # y = w2 * relu(w1 x + b1) + b2 with w1=2, b1=1, w2=3, b2=0.5, x=1.5 -> pre = 4
    m = Mlp2([[2.0]], [1.0], [[3.0]], [0.5])
    y, cache = m.forward(np.array([1.5]))
    assert y[0] == 12.5
    grads, dx = m.backward(cache, np.array([1.0]))
    assert grads["W2"][0, 0] == 4.0
    assert grads["b2"][0] == 1.0
    assert grads["W1"][0, 0] == 3.0 * 1.5
    assert grads["b1"][0] == 3.0
    assert dx[0] == 6.0


def test_backward_matches_finite_differences(rng):
    m = Mlp2.init(4, 6, 3, rng)
    X = rng.normal(size=(5, 4))
    target = rng.normal(size=(5, 3))

    def loss():
        y, cache = m.forward(X)
        return 0.5 * np.sum((y - target) ** 2), cache.pre > 0

    y, cache = m.forward(X)
    grads, _ = m.backward(cache, y - target)
    rep = finite_diff_check(loss, m.parameters(), grads)
    assert rep.passed, rep.lines()


def test_frozen_mlp_rejects_updates(rng):
    m = Mlp2.init(2, 2, 2, rng).freeze()
    with pytest.raises(FrozenParameterError):
        m.W1 = np.zeros((2, 2))
    with pytest.raises(FrozenParameterError):
        adamw_step(m.parameters(), {"W1": np.ones((2, 2))}, OptimState())


def test_flop_tally_counts_multiply_adds(rng):
    m = Mlp2.init(10, 20, 5, rng)
    with count_flops() as fc:
        m(rng.normal(size=(3, 10)))
    assert fc.madds == 3 * (20 * 10 + 5 * 20)


def test_adamw_pure_decay():
    p = {"w": np.array([2.0, -4.0])}
    st = OptimState(lr=0.1, weight_decay=0.5)
    adamw_step(p, {"w": np.zeros(2)}, st)
    np.testing.assert_allclose(p["w"], [2.0 * (1 - 0.05), -4.0 * (1 - 0.05)], rtol=0, atol=1e-15)
    assert st.step == 1


def test_adamw_no_decay_no_grad_is_noop():
    p = {"w": np.array([1.0, 2.0])}
    adamw_step(p, {"w": np.zeros(2)}, OptimState(weight_decay=0.0))
    np.testing.assert_array_equal(p["w"], [1.0, 2.0])


def test_adamw_first_step_oracle():
    # first step: mhat = g, vhat = g^2 -> update = g/(|g|+eps) + wd*p
    p = {"w": np.array([1.0, -1.0, 0.5])}
    g = np.array([0.3, -2.0, 1e-3])
    adamw_step(p, {"w": g}, OptimState(lr=0.01, weight_decay=0.1, eps=1e-8))
    expected = np.array([1.0, -1.0, 0.5]) - 0.01 * (g / (np.abs(g) + 1e-8) + 0.1 * np.array([1.0, -1.0, 0.5]))
    np.testing.assert_allclose(p["w"], expected, rtol=1e-13)


def test_adamw_rejects_non_finite():
    p = {"w": np.ones(2)}
    with pytest.raises(NonFiniteError):
        adamw_step(p, {"w": np.array([np.nan, 0.0])}, OptimState())
    np.testing.assert_array_equal(p["w"], [1.0, 1.0])


def test_adamw_minimises_quadratic():
    p = {"w": np.array([3.0, -2.0])}
    st = OptimState(lr=0.05, weight_decay=0.0)
    for _ in range(500):
        adamw_step(p, {"w": p["w"].copy()}, st)
    assert np.linalg.norm(p["w"]) < 0.05


def test_ema():
    assert ema_update(1.0, 0.0, 0.99) == pytest.approx(0.99)
    params = {"a": np.array([0.0])}
    ema = EMA({"a": np.array([1.0])}, 0.99)
    ema.update(params)
    assert ema.shadow["a"][0] == pytest.approx(0.99)


def test_gradcheck_quadratic():
    theta = {"t": np.array([0.3, -1.2, 2.0])}
    rep = finite_diff_check(lambda: 0.5 * np.sum(theta["t"] ** 2), theta, {"t": theta["t"].copy()})
    assert rep.max_rel_error < 1e-9


def test_gradcheck_excludes_relu_kink():
    x = {"x": np.array([0.0, 1.0])}

    def loss():
        return np.sum(np.maximum(0.0, x["x"])), x["x"] > 0

    rep = finite_diff_check(loss, x, {"x": np.array([0.0, 1.0])})
    assert ("x", (0,)) in rep.excluded
    assert rep.passed


def test_checkpoint_roundtrip_bytes(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3), "i": np.array([1, 2, 3]), "b": np.array([True, False])}
    blob = checkpoint.dumps(tensors, {"k": 1})
    t2, meta = checkpoint.loads(blob)
    assert meta == {"k": 1}
    assert checkpoint.dumps(t2, meta) == blob
    np.testing.assert_array_equal(t2["a"], tensors["a"])
    path = tmp_path / "x.ckpt"
    checkpoint.save(path, tensors, meta)
    assert path.read_bytes() == blob


def test_checkpoint_corruption_detected():
    blob = bytearray(checkpoint.dumps({"a": np.ones(4)}))
    blob[40] ^= 0xFF
    with pytest.raises(ChecksumError):
        checkpoint.loads(bytes(blob))
    with pytest.raises(CheckpointError):
        checkpoint.loads(b"garbage" * 10)


def test_checkpoint_version_mismatch(monkeypatch):
    monkeypatch.setattr(checkpoint, "VERSION", 99)
    blob = checkpoint.dumps({"a": np.ones(1)})
    monkeypatch.setattr(checkpoint, "VERSION", 1)
    with pytest.raises(VersionMismatchError):
        checkpoint.loads(blob)
