from __future__ import annotations

import numpy as np
import pytest

from hesplit.backend import BackendMismatch, NoiseModel, NoiseSimBackend, make_backend
from hesplit.ckks import LevelError, MissingRotationKey
from hesplit.constants import sim_default_stddev


def _program(be, keys, a, b):
    """A short circuit touching every operation; returns decrypted outputs."""
    ca, cb = be.encrypt(a, keys), be.encrypt(b, keys)
    p = be.mul_plain(ca, b)
    c = be.mul_ct(ca, cb, keys)
    r = be.rotate(be.add(p, c), 4, keys)
    s = be.mul_scalar_sum([ca, cb], [0.5, -2.0])
    return [be.decrypt(x, keys) for x in (p, c, r, s)]


def test_simulator_agrees_with_ckks(toy_ckks, toy_params, rng):
    ck, ck_keys = toy_ckks
    sim = NoiseSimBackend(toy_params, seed=1)
    sim_keys = sim.keygen(ck_keys.rotation_keys)
    a, b = rng.uniform(-1, 1, ck.slot_count), rng.uniform(-1, 1, ck.slot_count)
    for x, y in zip(_program(ck, ck_keys, a, b), _program(sim, sim_keys, a, b)):
        assert np.abs(x - y).max() < 1e-3


def test_zero_noise_simulator_is_exact(exact_sim, rng):
    be, keys = exact_sim
    a, b = rng.uniform(-1, 1, be.slot_count), rng.uniform(-1, 1, be.slot_count)
    p, c, r, s = _program(be, keys, a, b)
    assert np.array_equal(p, a * b)
    assert np.array_equal(c, a * b)
    assert np.array_equal(r, np.roll(a * b + a * b, -4))
    assert np.allclose(s, 0.5 * a - 2 * b, rtol=0, atol=1e-15)


def test_noise_model_statistics(toy_params):
    std = sim_default_stddev(toy_params.scale_log)
    be = NoiseSimBackend(toy_params, NoiseModel(std, 60), seed=3)
    keys = be.keygen()
    ct = be.encrypt(np.zeros(be.slot_count), keys)
    out = be.decrypt(be.mul_scalar(ct, 1.0), keys)
    assert 0.8 * std < out.std() < 1.2 * std


def test_quantization_step():
    nm = NoiseModel(0.0, 4)
    out = nm.apply(np.array([0.03, 0.5, 0.97]), np.random.default_rng(0))
    assert np.array_equal(out, np.array([0.0, 0.5, 1.0]))


def test_simulator_enforces_the_level_ledger(exact_sim):
    be, keys = exact_sim
    ct = be.encrypt([1.0], keys)
    for _ in range(be.top_level):
        ct = be.mul_scalar(ct, 1.0)
    with pytest.raises(LevelError):
        be.mul_plain(ct, [1.0])
    with pytest.raises(LevelError):
        be.add(ct, be.encrypt([1.0], keys))
    a, b = be.align(ct, be.encrypt([2.0], keys))
    assert be.level(a) == be.level(b) == 0
    assert be.decrypt(be.add(a, b), keys)[0] == 3.0


def test_simulator_rotation_keys(toy_params):
    be = NoiseSimBackend(toy_params, NoiseModel(0.0, 52))
    keys = be.keygen([2, 8])
    ct = be.encrypt(np.arange(8.0), keys)
    assert be.decrypt(be.rotate(ct, 10, keys), keys)[0] == 0.0  # 10 = 2 + 8 wraps past the data
    assert be.decrypt(be.rotate(ct, 2, keys), keys)[0] == 2.0
    with pytest.raises(MissingRotationKey):
        be.rotate(ct, 3, keys)


def test_backends_refuse_each_others_objects(toy_ckks, exact_sim):
    ck, ck_keys = toy_ckks
    sim, sim_keys = exact_sim
    with pytest.raises(BackendMismatch):
        ck.add(sim.encrypt([1.0], sim_keys), sim.encrypt([1.0], sim_keys))
    with pytest.raises(BackendMismatch):
        sim.level(ck.encrypt([1.0], ck_keys))


def test_simulator_serialization_and_public_keys(exact_sim):
    be, keys = exact_sim
    ct = be.mul_scalar(be.encrypt([0.25, -1.0], keys), 2.0)
    back = be.deserialize(be.serialize(ct))
    assert be.level(back) == be.level(ct)
    assert np.array_equal(be.decrypt(back, keys), be.decrypt(ct, keys))
    pub = be.deserialize_keys(be.serialize_keys(keys.public()))
    assert set(pub.rotation_keys) == set(keys.rotation_keys)
    with pytest.raises(PermissionError):
        be.decrypt(ct, pub)


def test_make_backend(toy_params):
    assert make_backend("noise_sim", toy_params).kind == "noise-sim"
    assert make_backend("ckks", toy_params).kind == "ckks"
    with pytest.raises(ValueError):
        make_backend("paillier", toy_params)


def test_dispatch_by_name(exact_sim):
    be, keys = exact_sim
    ct = be.dispatch("encrypt", [1.5], keys)
    assert be.decrypt(be.dispatch("mul_scalar", ct, 2.0), keys)[0] == 3.0
    with pytest.raises(ValueError):
        be.dispatch("_rng")
