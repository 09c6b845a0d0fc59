"""Leveled RNS-CKKS: keys, encryption, and homomorphic operations.

Polynomials are kept in evaluation (NTT) form as ``(k, N)`` uint64 arrays whose
rows follow ``params.primes_at(level)``. Every multiplication is followed by an
eager rescale, so a ciphertext at level ``l`` always carries (up to rounding)
the canonical scale ``params.scale_at(l)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .encoding import coeffs_to_slots, galois_element, slots_to_coeffs
from .ntt import NttTables, addmod, muladd_mod, mulmod, negmod, submod
from .params import CryptoParams

SCALE_RTOL = 1e-6


class LevelError(ValueError):
    """Raised when an operation needs more multiplicative levels than remain."""


class MissingRotationKey(KeyError):
    pass


@lru_cache(maxsize=8)
def tables(params: CryptoParams) -> NttTables:
    return NttTables(params.ring_size, params.all_primes)


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _q(primes) -> np.ndarray:
    return np.array(primes, dtype=np.uint64)


@dataclass(frozen=True, eq=False)
class Plaintext:
    """Encoded slot vector: an integer polynomial at a given scale and level."""

    params: CryptoParams
    poly: np.ndarray
    scale: float
    level: int

    @property
    def slot_count(self) -> int:
        return self.params.slot_count


@dataclass(frozen=True, eq=False)
class Ciphertext:
    params: CryptoParams
    c0: np.ndarray
    c1: np.ndarray
    scale: float
    level: int

    @property
    def slot_count(self) -> int:
        return self.params.slot_count

    @property
    def primes(self) -> tuple[int, ...]:
        return self.params.primes_at(self.level)


@dataclass(frozen=True, eq=False)
class KeySwitchKey:
    """One (b, a) pair per ciphertext prime (digit), rows over every prime incl. special."""

    b: np.ndarray
    a: np.ndarray


@dataclass(frozen=True, eq=False)
class SecretKey:
    coeffs: np.ndarray
    poly: np.ndarray  # evaluation form over params.all_primes


@dataclass(frozen=True, eq=False)
class KeyBundle:
    params: CryptoParams
    public_key: tuple[np.ndarray, np.ndarray]
    secret_key: SecretKey | None
    relin_key: KeySwitchKey
    rotation_keys: dict[int, KeySwitchKey] = field(default_factory=dict)

    def public(self) -> KeyBundle:
        """Copy without secret material (what a server may hold)."""
        return KeyBundle(self.params, self.public_key, None, self.relin_key, dict(self.rotation_keys))


# ---------------------------------------------------------------- sampling


def _cbd(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    """Centered binomial approximation of a discrete Gaussian of width ``sigma``."""
    eta = max(1, round(2 * sigma * sigma))
    return (rng.binomial(eta, 0.5, n) - rng.binomial(eta, 0.5, n)).astype(np.int64)


def _ternary(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(-1, 2, n).astype(np.int64)


def _lift(coeffs: np.ndarray, primes) -> np.ndarray:
    """Signed integer coefficients -> RNS coefficient rows."""
    q = np.array(primes, dtype=np.int64)[:, None]
    return (coeffs[None, :] % q).astype(np.uint64)


def _to_eval(params: CryptoParams, coeffs: np.ndarray, primes) -> np.ndarray:
    return tables(params).forward(_lift(coeffs, primes), primes)


def _uniform(rng: np.random.Generator, primes, n: int) -> np.ndarray:
    return np.stack([rng.integers(0, p, n, dtype=np.uint64) for p in primes])


def _rows(params: CryptoParams, primes) -> np.ndarray:
    return tables(params).rows(primes)


# ---------------------------------------------------------------- keys


def _make_ksk(params: CryptoParams, s_from: np.ndarray, s: np.ndarray, rng) -> KeySwitchKey:
    primes = params.all_primes
    q = _q(primes)
    n = params.ring_size
    chain = params.modulus_chain
    special = math.prod(params.special_primes)
    bs, as_ = [], []
    for j, pj in enumerate(chain):
        a = _uniform(rng, primes, n)
        e = _to_eval(params, _cbd(rng, n, params.noise_stddev), primes)
        b = addmod(negmod(mulmod(a, s, q), q), e, q)
        gadget = np.uint64(special % pj)
        b[j] = (b[j] + (s_from[j] * gadget) % np.uint64(pj)) % np.uint64(pj)
        bs.append(b)
        as_.append(a)
    return KeySwitchKey(np.stack(bs), np.stack(as_))


def power_of_two_steps(params: CryptoParams) -> set[int]:
    """Steps 1, 2, 4, ..., N/4: enough to compose any rotation."""
    return {1 << i for i in range(params.ring_size_log - 1)}


def keygen(params: CryptoParams, rotation_steps: Iterable[int] = (), seed=None) -> KeyBundle:
    """Generate public, secret, relinearisation and the requested rotation keys."""
    steps = sorted(set(int(s) for s in rotation_steps))
    for s in steps:
        if not 0 < s < params.slot_count:
            raise ValueError(f"rotation step {s} outside [1, N/2)")
    rng = _as_rng(seed)
    n = params.ring_size
    primes = params.all_primes
    q = _q(primes)
    s_coeffs = _ternary(rng, n)
    s = _to_eval(params, s_coeffs, primes)

    # Public key lives over Q*P so fresh encryptions can be mod-switched down by P.
    a = _uniform(rng, primes, n)
    e = _to_eval(params, _cbd(rng, n, params.noise_stddev), primes)
    pk_b = addmod(negmod(mulmod(a, s, q), q), e, q)

    relin = _make_ksk(params, mulmod(s, s, q), s, rng)
    rot = {}
    tab = tables(params)
    for step in steps:
        perm = tab.automorphism_permutation(galois_element(step, n))
        rot[step] = _make_ksk(params, s[:, perm], s, rng)
    return KeyBundle(params, (pk_b, a), SecretKey(s_coeffs, s), relin, rot)


# ---------------------------------------------------------------- encode / encrypt


def encode(values, params: CryptoParams, level: int | None = None, scale: float | None = None) -> Plaintext:
    """Encode up to N/2 reals into a plaintext at ``level`` (default: top)."""
    level = params.level_budget if level is None else level
    scale = params.scale_at(level) if scale is None else scale
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size > params.slot_count:
        raise ValueError(f"{v.size} values exceed the {params.slot_count} available slots")
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot encode non-finite values")
    slots = np.zeros(params.slot_count)
    slots[: v.size] = v
    coeffs = np.rint(slots_to_coeffs(slots, params.ring_size) * scale)
    if np.abs(coeffs).max(initial=0) >= 2.0**62:
        raise OverflowError("encoded coefficients overflow 62 bits; reduce value magnitude")
    primes = params.primes_at(level)
    return Plaintext(params, _to_eval(params, coeffs.astype(np.int64), primes), scale, level)


def _centered_base(params: CryptoParams, poly: np.ndarray) -> np.ndarray:
    """Coefficients modulo the base modulus, centred, as float64."""
    base = params.base_primes
    coeff = tables(params).inverse(poly[: len(base)], base)
    x = coeff[0].astype(np.int64)
    modulus = base[0]
    for row, p in zip(coeff[1:], base[1:]):
        inv = pow(modulus % p, -1, p)
        t = ((row.astype(np.int64) - x % p) % p) * inv % p
        x = x + modulus * t
        modulus *= p
    x = np.where(x > modulus // 2, x - modulus, x)
    return x.astype(np.float64)


def decode(pt: Plaintext) -> np.ndarray:
    """Real parts of the N/2 slots."""
    coeffs = _centered_base(pt.params, pt.poly) / pt.scale
    return coeffs_to_slots(coeffs, pt.params.ring_size).real


def encrypt(pt: Plaintext, keys: KeyBundle, rng=None) -> Ciphertext:
    """Public-key encryption.

    The message is embedded as ``P*m`` over the extended basis and the result
    divided by the special modulus ``P``, which shrinks the fresh encryption
    noise to rounding size.
    """
    params = pt.params
    _check_params(params, keys.params)
    rng = _as_rng(rng)
    n = params.ring_size
    qp = params.primes_at(pt.level)
    ext = qp + params.special_primes
    q = _q(ext)
    rows = _rows(params, ext)
    k = len(qp)
    v = _to_eval(params, _ternary(rng, n), ext)
    e0 = _to_eval(params, _cbd(rng, n, params.noise_stddev), ext)
    e1 = _to_eval(params, _cbd(rng, n, params.noise_stddev), ext)
    b, a = keys.public_key
    c0 = addmod(mulmod(v, b[rows], q), e0, q)
    c1 = addmod(mulmod(v, a[rows], q), e1, q)
    special = math.prod(params.special_primes)
    pm = np.array([special % p for p in qp], dtype=np.uint64)[:, None]
    c0[:k] = addmod(c0[:k], mulmod(pt.poly, np.broadcast_to(pm, pt.poly.shape).copy(), q[:k]), q[:k])
    return Ciphertext(params, _mod_down(params, c0, qp), _mod_down(params, c1, qp), pt.scale, pt.level)


def encrypt_values(values, keys: KeyBundle, level: int | None = None, rng=None) -> Ciphertext:
    return encrypt(encode(values, keys.params, level), keys, rng)


def decrypt(ct: Ciphertext, keys: KeyBundle) -> Plaintext:
    _check_params(ct.params, keys.params)
    if keys.secret_key is None:
        raise PermissionError("key bundle carries no secret key")
    primes = ct.primes
    q = _q(primes)
    s = keys.secret_key.poly[_rows(ct.params, primes)]
    m = addmod(ct.c0, mulmod(ct.c1, s, q), q)
    return Plaintext(ct.params, m, ct.scale, ct.level)


def decrypt_values(ct: Ciphertext, keys: KeyBundle) -> np.ndarray:
    return decode(decrypt(ct, keys))


# ---------------------------------------------------------------- helpers


def _check_params(a: CryptoParams, b: CryptoParams) -> None:
    if a is not b and a != b:
        raise ValueError("parameter mismatch between operands")


def _check_pair(a: Ciphertext, b: Ciphertext | Plaintext) -> None:
    _check_params(a.params, b.params)
    if a.level != b.level:
        raise LevelError(f"level mismatch: {a.level} vs {b.level}")
    if not math.isclose(a.scale, b.scale, rel_tol=SCALE_RTOL):
        raise ValueError(f"scale mismatch: {a.scale} vs {b.scale}")


def _rescale_poly(params: CryptoParams, x: np.ndarray, primes: Sequence[int]) -> np.ndarray:
    """Divide by the last prime with rounding; drops that prime's row."""
    tab = tables(params)
    ql = primes[-1]
    rest = primes[:-1]
    last = tab.inverse(x[-1:], (ql,))[0].astype(np.int64)
    last = np.where(last > ql // 2, last - ql, last)
    corr = tab.forward(_lift(last, rest), rest)
    q = _q(rest)
    inv = np.array([pow(ql, -1, p) for p in rest], dtype=np.uint64)[:, None]
    return mulmod(submod(x[:-1], corr, q), np.broadcast_to(inv, corr.shape).copy(), q)


def _rescale(ct: Ciphertext, c0: np.ndarray, c1: np.ndarray, scale: float) -> Ciphertext:
    params = ct.params
    primes = params.primes_at(ct.level)
    return Ciphertext(
        params,
        _rescale_poly(params, c0, primes),
        _rescale_poly(params, c1, primes),
        scale / primes[-1],
        ct.level - 1,
    )


def _need_level(ct: Ciphertext) -> None:
    if ct.level < 1:
        raise LevelError("ciphertext is at level 0; multiplicative budget exhausted")


def _key_switch(params: CryptoParams, d: np.ndarray, ksk: KeySwitchKey, level: int):
    """Return (u0, u1) over primes_at(level) with u0 + u1*s ~= d * s_from."""
    tab = tables(params)
    qp = params.primes_at(level)
    sp = params.special_primes
    ext = qp + sp
    qext = _q(ext)
    rows = _rows(params, ext)
    d_coeff = tab.inverse(d, qp)
    acc0 = np.zeros((len(ext), params.ring_size), dtype=np.uint64)
    acc1 = np.zeros_like(acc0)
    for j in range(len(qp)):
        digit = tab.forward(d_coeff[j][None, :] % qext[:, None], ext)
        muladd_mod(acc0, digit, ksk.b[j][rows], qext)
        muladd_mod(acc1, digit, ksk.a[j][rows], qext)
    return _mod_down(params, acc0, qp), _mod_down(params, acc1, qp)


def _mod_down(params: CryptoParams, x: np.ndarray, qp: Sequence[int]) -> np.ndarray:
    tab = tables(params)
    sp = params.special_primes
    k = len(qp)
    coeff = tab.inverse(x[k:], sp)
    v = coeff[0].astype(np.int64)
    modulus = sp[0]
    for row, p in zip(coeff[1:], sp[1:]):
        inv = pow(modulus % p, -1, p)
        t = ((row.astype(np.int64) - v % p) % p) * inv % p
        v = v + modulus * t
        modulus *= p
    v = np.where(v > modulus // 2, v - modulus, v)
    q = _q(qp)
    corr = tab.forward(_lift(v, qp), qp)
    inv = np.array([pow(modulus, -1, p) for p in qp], dtype=np.uint64)[:, None]
    return mulmod(submod(x[:k], corr, q), np.broadcast_to(inv, corr.shape).copy(), q)


# ---------------------------------------------------------------- operations


def add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_pair(a, b)
    q = _q(a.primes)
    return Ciphertext(a.params, addmod(a.c0, b.c0, q), addmod(a.c1, b.c1, q), a.scale, a.level)


def sub(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_pair(a, b)
    q = _q(a.primes)
    return Ciphertext(a.params, submod(a.c0, b.c0, q), submod(a.c1, b.c1, q), a.scale, a.level)


def negate(a: Ciphertext) -> Ciphertext:
    q = _q(a.primes)
    return Ciphertext(a.params, negmod(a.c0, q), negmod(a.c1, q), a.scale, a.level)


def add_plain(a: Ciphertext, p: Plaintext | Sequence[float]) -> Ciphertext:
    if not isinstance(p, Plaintext):
        p = encode(p, a.params, a.level, a.scale)
    _check_pair(a, p)
    q = _q(a.primes)
    return Ciphertext(a.params, addmod(a.c0, p.poly, q), a.c1, a.scale, a.level)


def mul_plain(a: Ciphertext, p: Plaintext | Sequence[float]) -> Ciphertext:
    """Slotwise product with a plaintext, then rescale (one level)."""
    _need_level(a)
    if not isinstance(p, Plaintext):
        p = encode(p, a.params, a.level)
    _check_params(a.params, p.params)
    if p.level != a.level:
        raise LevelError(f"plaintext level {p.level} != ciphertext level {a.level}")
    q = _q(a.primes)
    return _rescale(a, mulmod(a.c0, p.poly, q), mulmod(a.c1, p.poly, q), a.scale * p.scale)


def mul_scalar(a: Ciphertext, s: float) -> Ciphertext:
    """Multiply every slot by the real ``s``, then rescale (one level)."""
    _need_level(a)
    scale = a.params.scale_at(a.level)
    k = int(round(float(s) * scale))
    q = _q(a.primes)
    factor = np.array([k % p for p in a.primes], dtype=np.uint64)[:, None]
    f = np.broadcast_to(factor, a.c0.shape).copy()
    return _rescale(a, mulmod(a.c0, f, q), mulmod(a.c1, f, q), a.scale * scale)


def mul_ct(a: Ciphertext, b: Ciphertext, keys: KeyBundle) -> Ciphertext:
    """Slotwise ciphertext product with relinearisation and rescale (one level)."""
    _need_level(a)
    _check_pair(a, b)
    _check_params(a.params, keys.params)
    q = _q(a.primes)
    d0 = mulmod(a.c0, b.c0, q)
    d1 = addmod(mulmod(a.c0, b.c1, q), mulmod(a.c1, b.c0, q), q)
    d2 = mulmod(a.c1, b.c1, q)
    u0, u1 = _key_switch(a.params, d2, keys.relin_key, a.level)
    return _rescale(a, addmod(d0, u0, q), addmod(d1, u1, q), a.scale * b.scale)


def _apply_galois(a: Ciphertext, step: int, ksk: KeySwitchKey) -> Ciphertext:
    params = a.params
    perm = tables(params).automorphism_permutation(galois_element(step, params.ring_size))
    c0 = a.c0[:, perm]
    c1 = a.c1[:, perm]
    u0, u1 = _key_switch(params, c1, ksk, a.level)
    q = _q(a.primes)
    return Ciphertext(params, addmod(c0, u0, q), u1, a.scale, a.level)


def rotation_plan(step: int, params: CryptoParams, available: Iterable[int]) -> list[int]:
    """Key steps whose composition rotates by ``step`` (direct key preferred)."""
    step %= params.slot_count
    if step == 0:
        return []
    avail = set(available)
    if step in avail:
        return [step]
    plan = [1 << b for b in range(params.ring_size_log) if step >> b & 1]
    missing = [s for s in plan if s not in avail]
    if missing:
        raise MissingRotationKey(f"no rotation key for step {step} (missing {missing})")
    return plan


def rotate(a: Ciphertext, step: int, keys: KeyBundle) -> Ciphertext:
    """Slot ``i`` of the result holds slot ``(i + step) mod N/2`` of ``a``."""
    _check_params(a.params, keys.params)
    for s in rotation_plan(step, a.params, keys.rotation_keys):
        a = _apply_galois(a, s, keys.rotation_keys[s])
    return a


def level_drop(a: Ciphertext, target_level: int) -> Ciphertext:
    """Move to a lower level without spending the levels in between.

    Drops the primes above ``target_level + 1`` and folds a correcting integer
    constant into one rescale, so the result carries the canonical scale of
    ``target_level``.
    """
    if target_level > a.level:
        raise LevelError(f"cannot raise level {a.level} to {target_level}")
    if target_level < 0:
        raise LevelError("target level must be >= 0")
    if target_level == a.level:
        return a
    params = a.params
    keep = len(params.base_primes) + target_level + 1
    primes = params.primes_at(target_level + 1)
    q_top = primes[-1]
    want = params.scale_at(target_level)
    k = int(round(want * q_top / a.scale))
    q = _q(primes)
    factor = np.broadcast_to(np.array([k % p for p in primes], dtype=np.uint64)[:, None], (keep, params.ring_size)).copy()
    tmp = Ciphertext(params, a.c0[:keep], a.c1[:keep], a.scale, target_level + 1)
    out = _rescale(tmp, mulmod(tmp.c0, factor, q), mulmod(tmp.c1, factor, q), a.scale * k)
    return Ciphertext(params, out.c0, out.c1, want, target_level)


# ---------------------------------------------------------------- fused sums


def mul_plain_sum(cts: Sequence[Ciphertext], pts: Sequence[Plaintext | Sequence[float]]) -> Ciphertext:
    """``sum_i cts[i] * pts[i]`` with a single rescale (one level)."""
    if not cts or len(cts) != len(pts):
        raise ValueError("need equally many (>0) ciphertexts and plaintexts")
    a = cts[0]
    _need_level(a)
    q = _q(a.primes)
    acc0 = np.zeros_like(a.c0)
    acc1 = np.zeros_like(a.c1)
    scale = None
    for ct, p in zip(cts, pts):
        _check_pair(a, ct)
        if not isinstance(p, Plaintext):
            p = encode(p, a.params, a.level)
        if p.level != a.level:
            raise LevelError(f"plaintext level {p.level} != ciphertext level {a.level}")
        s = ct.scale * p.scale
        if scale is not None and not math.isclose(s, scale, rel_tol=SCALE_RTOL):
            raise ValueError("inconsistent product scales in fused sum")
        scale = s
        muladd_mod(acc0, ct.c0, p.poly, q)
        muladd_mod(acc1, ct.c1, p.poly, q)
    return _rescale(a, acc0, acc1, scale)


def mul_scalar_sum(cts: Sequence[Ciphertext], scalars: Sequence[float]) -> Ciphertext:
    """``sum_i scalars[i] * cts[i]`` with a single rescale (one level)."""
    if not cts or len(cts) != len(scalars):
        raise ValueError("need equally many (>0) ciphertexts and scalars")
    a = cts[0]
    _need_level(a)
    scale = a.params.scale_at(a.level)
    primes = a.primes
    q = _q(primes)
    acc0 = np.zeros_like(a.c0)
    acc1 = np.zeros_like(a.c1)
    for ct, s in zip(cts, scalars):
        _check_pair(a, ct)
        k = int(round(float(s) * scale))
        f = np.broadcast_to(np.array([k % p for p in primes], dtype=np.uint64)[:, None], a.c0.shape).copy()
        muladd_mod(acc0, ct.c0, f, q)
        muladd_mod(acc1, ct.c1, f, q)
    return _rescale(a, acc0, acc1, a.scale * scale)


def mul_ct_sum(lhs: Sequence[Ciphertext], rhs: Sequence[Ciphertext], keys: KeyBundle) -> Ciphertext:
    """``sum_i lhs[i] * rhs[i]`` with one relinearisation and one rescale."""
    if not lhs or len(lhs) != len(rhs):
        raise ValueError("need equally many (>0) ciphertext pairs")
    a = lhs[0]
    _need_level(a)
    _check_params(a.params, keys.params)
    q = _q(a.primes)
    d0 = np.zeros_like(a.c0)
    d1 = np.zeros_like(a.c0)
    d2 = np.zeros_like(a.c0)
    for x, y in zip(lhs, rhs):
        _check_pair(a, x)
        _check_pair(a, y)
        muladd_mod(d0, x.c0, y.c0, q)
        muladd_mod(d1, x.c0, y.c1, q)
        muladd_mod(d1, x.c1, y.c0, q)
        muladd_mod(d2, x.c1, y.c1, q)
    u0, u1 = _key_switch(a.params, d2, keys.relin_key, a.level)
    return _rescale(a, addmod(d0, u0, q), addmod(d1, u1, q), a.scale * a.scale)
