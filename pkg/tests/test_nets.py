from __future__ import annotations

import numpy as np
import pytest

from nafbo.nets import (
    AdamState,
    Mlp,
    StaleCacheError,
    adam_step,
    finite_difference_check,
    load_checkpoint,
    save_checkpoint,
)


def test_forward_hand_computed():
    net = Mlp([2, 2, 1], np.random.default_rng(0))
    net.set_params([
        np.array([[1.0, -1.0], [0.5, 2.0]]),
        np.array([0.0, -0.25]),
        np.array([[2.0], [1.0]]),
        np.array([0.5]),
    ])
    out, _ = net.forward(np.array([[1.0, 1.0]]))
    # hidden: relu([1.5, 0.75]) = [1.5, 0.75]; out = 3.0 + 0.75 + 0.5
    assert out[0, 0] == pytest.approx(4.25)
    out2, _ = net.forward(np.array([[-1.0, 0.0]]))
    # hidden: relu([-1, 0.75]) = [0, 0.75]; out = 0.75 + 0.5
    assert out2[0, 0] == pytest.approx(1.25)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    for trial in range(5):
        widths = [int(rng.integers(4, 8)) for _ in range(int(rng.integers(2, 4)))]
        widths = [3] + widths + [2]
        net = Mlp(widths, rng)
        # non-zero biases keep pre-activations off the exact relu kink,
        # where finite differences are ill-defined
        params = net.params()
        for i in range(1, len(params), 2):
            params[i] = rng.uniform(0.05, 0.15, size=params[i].shape)
        net.set_params(params)
        x = rng.standard_normal((4, 3))
        dout = rng.standard_normal((4, 2))
        assert finite_difference_check(net, x, dout) <= 1e-4


def test_batched_forward_equals_row_by_row():
    rng = np.random.default_rng(3)
    net = Mlp([4, 8, 8, 1], rng)
    x = rng.standard_normal((10, 4))
    full, _ = net.forward(x)
    for i in range(10):
        row, _ = net.forward(x[i : i + 1])
        np.testing.assert_allclose(row, full[i : i + 1], atol=1e-12)


def test_zero_weights_give_zero_output():
    net = Mlp([3, 5, 1], np.random.default_rng(0))
    net.set_params([np.zeros_like(p) for p in net.params()])
    out, _ = net.forward(np.random.default_rng(1).standard_normal((7, 3)))
    assert np.array_equal(out, np.zeros((7, 1)))


def test_near_uniform_initial_policy_head():
    rng = np.random.default_rng(11)
    net = Mlp([6, 200, 200, 200, 200, 1], rng, final_scale=0.01)
    rows = rng.standard_normal((1000, 6))
    logits, _ = net.forward(rows)
    assert logits.std() <= 0.1


def test_adam_first_step_is_signed_learning_rate():
    rng = np.random.default_rng(5)
    params = [rng.standard_normal((3, 2)), rng.standard_normal(2)]
    grads = [rng.standard_normal((3, 2)) + 0.5, rng.standard_normal(2) + 0.5]
    state = AdamState()
    new = adam_step(params, grads, state, lr=1e-3)
    for p, n, g in zip(params, new, grads):
        np.testing.assert_allclose(n - p, -1e-3 * np.sign(g), atol=1e-8)
    assert state.t == 1


def test_adam_minimizes_quadratic():
    target = np.array([1.5, -2.0, 0.25])
    params = [np.zeros(3)]
    state = AdamState()
    for _ in range(3000):
        grads = [2 * (params[0] - target)]
        params = adam_step(params, grads, state, lr=5e-3)
    np.testing.assert_allclose(params[0], target, atol=1e-3)


def test_stale_cache_detection():
    rng = np.random.default_rng(9)
    net = Mlp([2, 4, 1], rng)
    out, cache = net.forward(rng.standard_normal((3, 2)))
    net.set_params([p + 1.0 for p in net.params()])
    with pytest.raises(StaleCacheError):
        net.backward(cache, np.ones_like(out))


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(13)
    policy = Mlp([5, 16, 16, 1], rng, final_scale=0.01)
    value = Mlp([2, 8, 1], rng)
    meta = {"x_feature": True, "dim": 1, "note": "round-trip"}
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, policy, value, meta)
    p2, v2, m2 = load_checkpoint(path)
    assert m2 == meta
    for a, b in zip(policy.params() + value.params(), p2.params() + v2.params()):
        assert np.array_equal(a, b)
    x = rng.standard_normal((20, 5))
    np.testing.assert_array_equal(policy.forward(x)[0], p2.forward(x)[0])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_width_validation():
    with pytest.raises(ValueError):
        Mlp([3], np.random.default_rng(0))
    with pytest.raises(ValueError):
        Mlp([3, 0, 1], np.random.default_rng(0))
    net = Mlp([2, 3, 1], np.random.default_rng(0))
    with pytest.raises(ValueError):
        net.forward(np.zeros((2, 5)))
