from __future__ import annotations

import numpy as np
import pytest

from hesplit.data_io import synth
from hesplit.neuralnet import (
    PolyApprox, batch_order, chebyshev_fit, eval_poly_encrypted, evaluate, forward, init_model, load_checkpoint,
    save_checkpoint, sgd_update, sigmoid, train_plain,
)

from .oracles import gradient_check


def _data(n=12, f=5, k=3, seed=0):
    ds = synth(n, f, k, seed)
    return ds.features, ds.labels


@pytest.mark.parametrize("loss", ["mse", "cross_entropy"])
def test_gradients_with_sigmoid(loss):
    X, Y = _data()
    assert gradient_check(init_model([5, 4, 3, 3]), X, Y, loss) < 1e-4


def test_gradients_with_polynomial_activation():
    X, Y = _data()
    p = chebyshev_fit("sigmoid", 7, (-15, 15))
    assert gradient_check(init_model([5, 4, 3, 3], [p, p, "sigmoid"]), X, Y) < 1e-4


def test_chebyshev_fit_error_bound():
    p = chebyshev_fit("sigmoid", 7, (-15, 15))
    xs = np.linspace(-15, 15, 5001)
    assert np.abs(p(xs) - sigmoid(xs)).max() <= p.error_bound + 1e-12
    assert p.degree == 7 and p.levels_consumed == 3
    assert chebyshev_fit("sigmoid", 15, (-15, 15)).error_bound < p.error_bound
    with pytest.raises(ValueError):
        chebyshev_fit("sigmoid", 0, (-1, 1))
    with pytest.raises(ValueError):
        chebyshev_fit("sigmoid", 3, (1, 1))


def test_rescaled_polynomial_is_the_same_function():
    p = chebyshev_fit("sigmoid", 5, (-8, 8))
    q = p.rescaled(8.0)
    x = np.linspace(-8, 8, 101)
    assert np.allclose(q(x / 8.0), p(x))
    h = 1e-5
    assert np.allclose(p.derivative()(x), (p(x + h) - p(x - h)) / (2 * h), atol=1e-8)


@pytest.mark.parametrize("degree", [1, 2, 3, 5, 7])
def test_encrypted_polynomial_matches_plaintext(exact_sim, degree, rng):
    be, keys = exact_sim
    p = chebyshev_fit("sigmoid", degree, (-4, 4))
    x = rng.uniform(-4, 4, be.slot_count)
    ct = be.encrypt(x / 4.0, keys)
    out = eval_poly_encrypted(ct, p, be, keys, input_scale=4.0)
    assert be.level(out) == be.top_level - p.levels_consumed
    assert np.allclose(be.decrypt(out, keys), p(x), atol=1e-12)


def test_encrypted_polynomial_on_ckks(toy_ckks, rng):
    be, keys = toy_ckks
    p = chebyshev_fit("sigmoid", 7, (-15, 15))
    x = rng.uniform(-15, 15, be.slot_count)
    out = eval_poly_encrypted(be.encrypt(x / 15.0, keys), p, be, keys, input_scale=15.0)
    assert np.abs(be.decrypt(out, keys) - p(x)).max() < 1e-2


def test_polynomial_needs_enough_levels(exact_sim):
    be, keys = exact_sim
    ct = be.encrypt([0.5], keys)
    for _ in range(be.top_level - 1):
        ct = be.mul_scalar(ct, 1.0)
    with pytest.raises(ValueError):
        eval_poly_encrypted(ct, PolyApprox((0.0, 1.0, 0.0, 1.0), (-1, 1)), be, keys)


def test_training_reduces_loss():
    ds = synth(200, 8, 2, 3)
    model = init_model([8, 16, 2])
    before = evaluate(model, ds.features, ds.labels).loss
    model, hist = train_plain(model, ds.features, ds.labels, epochs=5, batch_size=20, lr=2.0)
    assert hist[-1].loss < hist[0].loss
    assert evaluate(model, ds.features, ds.labels).loss < before


def test_sgd_update_validates_shapes():
    m = init_model([3, 2, 2])
    with pytest.raises(ValueError):
        sgd_update(m, [np.zeros((2, 4))], 0.1)
    with pytest.raises(ValueError):
        sgd_update(m, [np.zeros((2, 3)), np.zeros((2, 3))], 0.1)
    with pytest.raises(FloatingPointError):
        sgd_update(m, [np.full((2, 4), np.inf), np.zeros((2, 3))], 0.1)


def test_forward_rejects_wrong_width():
    with pytest.raises(ValueError):
        forward(init_model([3, 2, 2]), np.zeros((1, 4)))


def test_checkpoint_round_trip(tmp_path):
    m = init_model([4, 3, 2], seed=9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m.weights, b"\x01" * 32)
    ws, digest = load_checkpoint(path)
    assert digest == b"\x01" * 32
    assert all(np.array_equal(a, b) for a, b in zip(ws, m.weights))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_checkpoint(path)
    path.write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_batch_order_is_a_deterministic_partition():
    a = batch_order(103, 10, 2, 7)
    assert [len(b) for b in a] == [10] * 10 + [3]
    assert sorted(np.concatenate(a).tolist()) == list(range(103))
    assert all(np.array_equal(x, y) for x, y in zip(a, batch_order(103, 10, 2, 7)))
    assert not np.array_equal(np.concatenate(a), np.concatenate(batch_order(103, 10, 3, 7)))
    assert np.array_equal(np.concatenate(batch_order(5, 2, 0, 0, shuffle=False)), np.arange(5))
    with pytest.raises(ValueError):
        batch_order(5, 0, 0, 0)
