"""Negacyclic number-theoretic transform over Z_q[X]/(X^N + 1), one prime per row.

Arrays are ``(k, N)`` uint64 with row ``r`` reduced modulo ``q[r] < 2**31``; the
forward transform returns evaluations in bit-reversed order, so output index
``i`` holds ``a(psi**(2*bitrev(i) + 1))``.
"""

from __future__ import annotations

from functools import lru_cache

import numba
import numpy as np


@numba.njit(cache=True)
def _forward(a, q, psi_rev):
    k, n = a.shape
    for r in range(k):
        p = q[r]
        t = n
        m = 1
        while m < n:
            t //= 2
            for i in range(m):
                j1 = 2 * i * t
                s = psi_rev[r, m + i]
                for j in range(j1, j1 + t):
                    u = a[r, j]
                    v = (a[r, j + t] * s) % p
                    x = u + v
                    a[r, j] = x - p if x >= p else x
                    a[r, j + t] = u - v if u >= v else u + p - v
            m *= 2


@numba.njit(cache=True)
def _inverse(a, q, psi_inv_rev, n_inv):
    k, n = a.shape
    for r in range(k):
        p = q[r]
        t = 1
        m = n
        while m > 1:
            h = m // 2
            j1 = 0
            for i in range(h):
                s = psi_inv_rev[r, h + i]
                for j in range(j1, j1 + t):
                    u = a[r, j]
                    v = a[r, j + t]
                    x = u + v
                    a[r, j] = x - p if x >= p else x
                    a[r, j + t] = ((u + p - v) * s) % p
                j1 += 2 * t
            t *= 2
            m = h
        ninv = n_inv[r]
        for j in range(n):
            a[r, j] = (a[r, j] * ninv) % p


@numba.njit(cache=True)
def mulmod(a, b, q):
    """Row-wise ``a * b mod q`` for ``(k, N)`` arrays."""
    k, n = a.shape
    out = np.empty_like(a)
    for r in range(k):
        p = q[r]
        for j in range(n):
            out[r, j] = (a[r, j] * b[r, j]) % p
    return out


@numba.njit(cache=True)
def muladd_mod(acc, a, b, q):
    """In-place ``acc += a * b mod q``."""
    k, n = a.shape
    for r in range(k):
        p = q[r]
        for j in range(n):
            x = acc[r, j] + (a[r, j] * b[r, j]) % p
            acc[r, j] = x - p if x >= p else x


def addmod(a, b, q):
    s = a + b
    return np.where(s >= q[:, None], s - q[:, None], s)


def submod(a, b, q):
    return np.where(a >= b, a - b, a + q[:, None] - b)


def negmod(a, q):
    return np.where(a == 0, a, q[:, None] - a)


def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _primitive_2n_root(p: int, n: int) -> int:
    # smallest generator-derived root keeps tables deterministic
    for g in range(2, p):
        psi = pow(g, (p - 1) // (2 * n), p)
        if pow(psi, n, p) == p - 1:
            return psi
    raise ValueError(f"no 2N-th root of unity modulo {p}")


@lru_cache(maxsize=None)
def _prime_tables(p: int, n: int):
    psi = _primitive_2n_root(p, n)
    psi_inv = pow(psi, -1, p)
    rev = _bitrev(n)
    pw = np.empty(n, dtype=object)
    pw_inv = np.empty(n, dtype=object)
    x, y = 1, 1
    for i in range(n):
        pw[i], pw_inv[i] = x, y
        x, y = x * psi % p, y * psi_inv % p
    return (
        pw[rev].astype(np.uint64),
        pw_inv[rev].astype(np.uint64),
        pow(n, -1, p),
    )


class NttTables:
    """Twiddle tables for a fixed ring degree and prime list."""

    def __init__(self, n: int, primes: tuple[int, ...]):
        self.n = n
        self.primes = tuple(primes)
        self.q = np.array(primes, dtype=np.uint64)
        tabs = [_prime_tables(p, n) for p in primes]
        self.psi_rev = np.stack([t[0] for t in tabs])
        self.psi_inv_rev = np.stack([t[1] for t in tabs])
        self.n_inv = np.array([t[2] for t in tabs], dtype=np.uint64)
        self.index = {p: i for i, p in enumerate(primes)}
        # evaluation exponent e (odd, mod 2N) held at each bit-reversed output slot
        self.eval_exponent = 2 * _bitrev(n) + 1
        self._slot_of_exponent = np.empty(2 * n, dtype=np.int64)
        self._slot_of_exponent[self.eval_exponent] = np.arange(n)

    def rows(self, primes) -> np.ndarray:
        return np.array([self.index[p] for p in primes], dtype=np.int64)

    def forward(self, a: np.ndarray, primes) -> np.ndarray:
        """Coefficient form -> evaluation form (returns a new array)."""
        r = self.rows(primes)
        out = np.ascontiguousarray(a, dtype=np.uint64).copy()
        _forward(out, self.q[r], self.psi_rev[r])
        return out

    def inverse(self, a: np.ndarray, primes) -> np.ndarray:
        r = self.rows(primes)
        out = np.ascontiguousarray(a, dtype=np.uint64).copy()
        _inverse(out, self.q[r], self.psi_inv_rev[r], self.n_inv[r])
        return out

    def automorphism_permutation(self, galois: int) -> np.ndarray:
        """Index map so that ``b = a[:, perm]`` realises X -> X**galois in evaluation form."""
        target = (self.eval_exponent * galois) % (2 * self.n)
        return self._slot_of_exponent[target]
