"""Parameter sets and RNS modulus-chain construction."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property

from sympy import isprime

# Every RNS prime stays below 2**31 so that products of two residues fit in a uint64.
WORD_BITS = 31
# Extra bits on top of the scale kept by the bottom modulus (message headroom at level 0).
BASE_HEADROOM_BITS = 18


def _ntt_primes(two_n: int, bits: int, count: int, exclude: set[int]) -> list[int]:
    """Largest ``count`` primes p < 2**bits with p = 1 (mod two_n), skipping ``exclude``."""
    out: list[int] = []
    p = ((1 << bits) - 1) // two_n * two_n + 1
    while len(out) < count:
        if p < two_n:
            raise ValueError(f"not enough NTT-friendly primes below 2^{bits}")
        if p not in exclude and isprime(p):
            out.append(p)
        p -= two_n
    return out


def _nearest_ntt_prime(two_n: int, target: float, exclude: set[int]) -> int:
    k0 = round((target - 1) / two_n)
    for offset in range(1 << 20):
        for k in {k0 + offset, k0 - offset}:
            p = k * two_n + 1
            if p < (1 << WORD_BITS) and p not in exclude and isprime(p):
                return p
    raise ValueError("no NTT prime near target")


def _scale_primes(two_n: int, scale_log: int, count: int, used: set[int]) -> list[int]:
    """Rescaling primes chosen top-down so every canonical level scale stays near 2**scale_log."""
    primes = [0] * count
    scale = float(2**scale_log)
    for idx in range(count - 1, -1, -1):
        p = _nearest_ntt_prime(two_n, scale * scale / 2**scale_log, used)
        used.add(p)
        primes[idx] = p
        scale = scale * scale / p
    return primes


def _word_split(bits: int) -> list[int]:
    """Split a modulus bit size into near-equal word-sized prime bit sizes."""
    count = -(-bits // WORD_BITS)
    return [bits // count + (1 if i < bits % count else 0) for i in range(count)]


@dataclass(frozen=True)
class CryptoParams:
    """CKKS parameters. The modulus chain is derived greedily from ``logqp``.

    Layout (bottom to top): the base modulus (``scale_log + 18`` bits, holds the
    message at level 0), ``level_budget`` rescaling primes of ``scale_log`` bits,
    and a special key-switching modulus the same size as the base. Base and
    special moduli are products of word-sized primes.
    """

    ring_size_log: int
    logqp: int
    scale_log: int = 30
    noise_stddev: float = 3.2
    name: str = "custom"
    base_primes: tuple[int, ...] = field(init=False)
    scale_primes: tuple[int, ...] = field(init=False)
    special_primes: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        if self.ring_size_log < 10:
            raise ValueError("ring_size_log must be >= 10")
        if not 20 <= self.scale_log <= 30:
            raise ValueError("scale_log must lie in [20, 30] (word-sized rescaling primes)")
        two_n = 2 << self.ring_size_log
        base_bits = self.scale_log + BASE_HEADROOM_BITS
        special_bits = base_bits
        level_budget = (self.logqp - base_bits - special_bits) // self.scale_log
        if level_budget < 1:
            raise ValueError(f"logQP={self.logqp} leaves no rescaling level")
        used: set[int] = set()
        scale = _scale_primes(two_n, self.scale_log, level_budget, used)
        base, special = [], []
        for target, bits in ((base, base_bits), (special, special_bits)):
            for b in _word_split(bits):
                p = _ntt_primes(two_n, b, 1, used)[0]
                used.add(p)
                target.append(p)
        object.__setattr__(self, "base_primes", tuple(base))
        object.__setattr__(self, "scale_primes", tuple(scale))
        object.__setattr__(self, "special_primes", tuple(special))
        if self.total_bits > self.logqp:
            raise ValueError("modulus chain exceeds the logQP budget")

    @classmethod
    def set1(cls) -> CryptoParams:
        return cls(ring_size_log=14, logqp=438, scale_log=30, name="set1")

    @classmethod
    def set2(cls) -> CryptoParams:
        return cls(ring_size_log=13, logqp=218, scale_log=30, name="set2")

    @classmethod
    def toy(cls, ring_size_log: int = 10, levels: int = 4) -> CryptoParams:
        """Small ring for fast tests; NOT secure."""
        base = 30 + BASE_HEADROOM_BITS
        return cls(ring_size_log=ring_size_log, logqp=2 * base + 30 * levels, name="toy")

    @property
    def ring_size(self) -> int:
        return 1 << self.ring_size_log

    @property
    def slot_count(self) -> int:
        return self.ring_size // 2

    @property
    def level_budget(self) -> int:
        return len(self.scale_primes)

    @property
    def modulus_chain(self) -> tuple[int, ...]:
        """All ciphertext primes, bottom first (base primes, then rescaling primes)."""
        return self.base_primes + self.scale_primes

    @property
    def all_primes(self) -> tuple[int, ...]:
        return self.modulus_chain + self.special_primes

    @property
    def total_bits(self) -> float:
        return sum(math.log2(p) for p in self.all_primes)

    def primes_at(self, level: int) -> tuple[int, ...]:
        if not 0 <= level <= self.level_budget:
            raise ValueError(f"level {level} outside [0, {self.level_budget}]")
        return self.modulus_chain[: len(self.base_primes) + level]

    @cached_property
    def level_scales(self) -> tuple[float, ...]:
        """Canonical scale per level: top level is 2**scale_log, and rescaling
        a product of two canonical level-l values lands on the level-(l-1) scale."""
        scales = [0.0] * (self.level_budget + 1)
        scales[-1] = float(2**self.scale_log)
        for lvl in range(self.level_budget, 0, -1):
            scales[lvl - 1] = scales[lvl] * scales[lvl] / self.scale_primes[lvl - 1]
        return tuple(scales)

    def scale_at(self, level: int) -> float:
        return self.level_scales[level]

    def digest(self) -> str:
        text = f"{self.ring_size_log}|{self.logqp}|{self.scale_log}|{self.noise_stddev}|{self.all_primes}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def describe(self) -> dict:
        return {
            "name": self.name,
            "N": self.ring_size,
            "slots": self.slot_count,
            "logQP": self.logqp,
            "used_bits": round(self.total_bits, 2),
            "scale_log": self.scale_log,
            "level_budget": self.level_budget,
            "base_primes": list(self.base_primes),
            "scale_primes": list(self.scale_primes),
            "special_primes": list(self.special_primes),
        }
