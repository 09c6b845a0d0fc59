"""Canonical-embedding encoder: N/2 real slots <-> integer polynomial coefficients."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def _slot_positions(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Root indices for slots and their conjugates, plus the twist factors.

    Slot ``j`` is the evaluation at ``zeta**(5**j mod 2N)`` with ``zeta = exp(i*pi/N)``;
    rotating slots by one step is the automorphism X -> X**5.
    """
    two_n = 2 * n
    exps = np.empty(n // 2, dtype=np.int64)
    e = 1
    for j in range(n // 2):
        exps[j] = e
        e = e * 5 % two_n
    slot_idx = (exps - 1) // 2
    conj_idx = (two_n - exps - 1) // 2
    twist = np.exp(-1j * np.pi * np.arange(n) / n)
    return slot_idx, conj_idx, twist


def slots_to_coeffs(values: np.ndarray, n: int) -> np.ndarray:
    """Real coefficients of the polynomial whose slots hold ``values`` (length N/2)."""
    slot_idx, conj_idx, twist = _slot_positions(n)
    v = np.zeros(n, dtype=np.complex128)
    v[slot_idx] = values
    v[conj_idx] = np.conj(values)
    return (np.fft.fft(v) * twist).real / n


def coeffs_to_slots(coeffs: np.ndarray, n: int) -> np.ndarray:
    """Complex slot values of a real-coefficient polynomial."""
    slot_idx, _, twist = _slot_positions(n)
    evals = np.fft.ifft(np.asarray(coeffs, dtype=np.float64) * np.conj(twist)) * n
    return evals[slot_idx]


def galois_element(step: int, n: int) -> int:
    """Galois element moving slot ``i + step`` into slot ``i``."""
    return pow(5, step % (n // 2), 2 * n)
