from __future__ import annotations

import numpy as np
import pytest

from hesplit import ckks
from hesplit.ckks import CryptoParams, FormatError, LevelError, MissingRotationKey
from hesplit.ckks import ntt


def test_parameter_sets_match_their_budgets():
    s1, s2 = CryptoParams.set1(), CryptoParams.set2()
    assert (s1.ring_size, s1.slot_count) == (1 << 14, 1 << 13)
    assert (s2.ring_size, s2.slot_count) == (1 << 13, 1 << 12)
    assert s1.total_bits <= 438 and s2.total_bits <= 218
    assert s2.level_budget == 4 and s1.level_budget == 11
    for p in s2.all_primes:
        assert p < 2**31 and (p - 1) % (2 * s2.ring_size) == 0
    assert len(set(s2.all_primes)) == len(s2.all_primes)


def test_params_reject_bad_values():
    with pytest.raises(ValueError):
        CryptoParams(ring_size_log=9, logqp=200)
    with pytest.raises(ValueError):
        CryptoParams(ring_size_log=10, logqp=60)


def test_digest_tracks_parameters():
    assert CryptoParams.toy().digest() == CryptoParams.toy().digest()
    assert CryptoParams.toy().digest() != CryptoParams.toy(levels=3).digest()


def test_ntt_round_trip_and_negacyclic_product(toy_params):
    rng = np.random.default_rng(0)
    n = toy_params.ring_size
    p = toy_params.scale_primes[0]
    tab = ckks.scheme.tables(toy_params)
    a = rng.integers(0, p, n, dtype=np.uint64)
    b = rng.integers(0, p, n, dtype=np.uint64)
    primes = (p,)
    fa = tab.forward(a[None, :].copy(), primes)
    assert np.array_equal(tab.inverse(fa.copy(), primes)[0], a)
    prod = tab.inverse(ntt.mulmod(fa, tab.forward(b[None, :].copy(), primes), ckks.scheme._q(primes)), primes)[0]
    # schoolbook negacyclic product as the oracle
    ref = np.zeros(n, dtype=object)
    ai, bi = [int(x) for x in a], [int(x) for x in b]
    for i in range(n):
        if ai[i] == 0:
            continue
        for j in range(n):
            k = i + j
            term = ai[i] * bi[j]
            if k < n:
                ref[k] += term
            else:
                ref[k - n] -= term
    assert [int(x) for x in prod] == [int(x) % p for x in ref]


def test_encode_decode_round_trip(toy_params, rng):
    v = rng.uniform(-1, 1, toy_params.slot_count)
    out = ckks.decode(ckks.encode(v, toy_params))
    assert np.abs(out - v).max() < 1e-6


def test_encode_rejects_overflow_and_nan(toy_params):
    with pytest.raises(ValueError):
        ckks.encode(np.zeros(toy_params.slot_count + 1), toy_params)
    with pytest.raises(ValueError):
        ckks.encode([np.nan], toy_params)


def test_operations_match_plaintext(toy_ckks, rng):
    be, keys = toy_ckks
    n = be.slot_count
    a, b = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)
    ca, cb = be.encrypt(a, keys), be.encrypt(b, keys)
    assert np.abs(be.decrypt(be.add(ca, cb), keys) - (a + b)).max() < 1e-4
    assert np.abs(be.decrypt(be.sub(ca, cb), keys) - (a - b)).max() < 1e-4
    assert np.abs(be.decrypt(be.mul_plain(ca, b), keys) - a * b).max() < 1e-3
    assert np.abs(be.decrypt(be.mul_scalar(ca, -0.75), keys) + 0.75 * a).max() < 1e-3
    assert np.abs(be.decrypt(be.mul_ct(ca, cb, keys), keys) - a * b).max() < 1e-3
    assert np.abs(be.decrypt(be.rotate(ca, 3, keys), keys) - np.roll(a, -3)).max() < 1e-4
    assert np.abs(be.decrypt(be.add_plain(ca, b), keys) - (a + b)).max() < 1e-4


def test_fused_sums_consume_one_level(toy_ckks, rng):
    be, keys = toy_ckks
    n = be.slot_count
    xs = [rng.uniform(-1, 1, n) for _ in range(4)]
    ys = [rng.uniform(-1, 1, n) for _ in range(4)]
    cx = [be.encrypt(x, keys) for x in xs]
    cy = [be.encrypt(y, keys) for y in ys]
    top = be.top_level
    ref = sum(x * y for x, y in zip(xs, ys))
    for out in (be.mul_plain_sum(cx, ys), be.mul_ct_sum(cx, cy, keys)):
        assert be.level(out) == top - 1
        assert np.abs(be.decrypt(out, keys) - ref).max() < 1e-3
    s = be.mul_scalar_sum(cx, [0.5, -1.0, 0.25, 2.0])
    assert np.abs(be.decrypt(s, keys) - (0.5 * xs[0] - xs[1] + 0.25 * xs[2] + 2 * xs[3])).max() < 1e-3


def test_level_exhaustion_and_mismatch(toy_ckks, rng):
    be, keys = toy_ckks
    v = rng.uniform(-1, 1, be.slot_count)
    ct = be.encrypt(v, keys)
    for _ in range(be.top_level):
        ct = be.mul_scalar(ct, 1.0)
    assert be.level(ct) == 0
    with pytest.raises(LevelError):
        be.mul_scalar(ct, 1.0)
    fresh = be.encrypt(v, keys)
    with pytest.raises(LevelError):
        be.add(fresh, ct)
    dropped = be.level_drop(fresh, 0)
    assert np.abs(be.decrypt(be.add(dropped, ct), keys) - 2 * v).max() < 1e-3
    with pytest.raises(LevelError):
        be.level_drop(ct, 1)


def test_rotation_keys_are_exactly_the_requested_steps(toy_params, rng):
    keys = ckks.keygen(toy_params, [4, 12], seed=3)
    assert set(keys.rotation_keys) == {4, 12}
    v = rng.uniform(-1, 1, toy_params.slot_count)
    ct = ckks.encrypt_values(v, keys, rng=rng)
    out = ckks.decrypt_values(ckks.rotate(ct, 12, keys), keys)
    assert np.abs(out - np.roll(v, -12)).max() < 1e-4
    with pytest.raises(MissingRotationKey):
        ckks.rotate(ct, 1, keys)
    # composite step through power-of-two keys
    keys2 = ckks.keygen(toy_params, [1, 2, 4], seed=3)
    ct2 = ckks.encrypt_values(v, keys2, rng=rng)
    assert np.abs(ckks.decrypt_values(ckks.rotate(ct2, 7, keys2), keys2) - np.roll(v, -7)).max() < 1e-4
    with pytest.raises(ValueError):
        ckks.keygen(toy_params, [toy_params.slot_count])


def test_serialization_round_trip_and_errors(toy_ckks, rng):
    be, keys = toy_ckks
    v = rng.uniform(-1, 1, be.slot_count)
    ct = be.mul_scalar(be.encrypt(v, keys), 1.0)
    blob = be.serialize(ct)
    assert len(blob) == ckks.serialized_size(be.params, be.level(ct))
    back = be.deserialize(blob)
    assert be.level(back) == be.level(ct)
    assert np.array_equal(be.decrypt(back, keys), be.decrypt(ct, keys))
    with pytest.raises(FormatError):
        be.deserialize(blob[:-8])
    with pytest.raises(FormatError):
        be.deserialize(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        ckks.deserialize(blob, CryptoParams.toy(ring_size_log=11))


def test_public_keys_carry_no_secret(toy_ckks):
    be, keys = toy_ckks
    pub = be.deserialize_keys(be.serialize_keys(keys.public()))
    assert pub.secret_key is None
    assert set(pub.rotation_keys) == set(keys.rotation_keys)
    # serializing the full bundle still never writes the secret
    blob = be.serialize_keys(keys)
    assert keys.secret_key.coeffs.tobytes() not in blob
    ct = be.encrypt(np.ones(4), pub)
    assert np.abs(be.decrypt(ct, keys)[:4] - 1).max() < 1e-4
    with pytest.raises(PermissionError):
        be.decrypt(ct, pub)
