"""Binary ciphertext format.

Layout: magic ``CKK1``, then four u8 fields (ring size log2, level, scale log2,
polynomial count), then the RNS words of each polynomial as little-endian u64,
row-major over ``params.primes_at(level)``. Words are evaluation-form residues.
The scale is implied by the level, since ciphertexts carry canonical scales.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .params import CryptoParams
from .scheme import Ciphertext

MAGIC = b"CKK1"
_HEADER = struct.Struct("<4sBBBB")
HEADER_SIZE = _HEADER.size


class FormatError(ValueError):
    pass


def serialized_size(params: CryptoParams, level: int, polys: int = 2) -> int:
    k = len(params.primes_at(level))
    return HEADER_SIZE + polys * k * params.ring_size * 8


def serialize(ct: Ciphertext) -> bytes:
    params = ct.params
    canonical = params.scale_at(ct.level)
    if not math.isclose(ct.scale, canonical, rel_tol=1e-6):
        raise FormatError(f"ciphertext scale {ct.scale} is not canonical for level {ct.level}")
    head = _HEADER.pack(MAGIC, params.ring_size_log, ct.level, params.scale_log, 2)
    body = np.stack([ct.c0, ct.c1]).astype("<u8", copy=False)
    return head + body.tobytes()


def deserialize(data: bytes, params: CryptoParams) -> Ciphertext:
    if len(data) < HEADER_SIZE:
        raise FormatError(f"truncated header: {len(data)} bytes")
    magic, log_n, level, scale_log, polys = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if log_n != params.ring_size_log or scale_log != params.scale_log:
        raise FormatError(
            f"parameter mismatch: blob has N=2^{log_n}, scale 2^{scale_log}; "
            f"expected N=2^{params.ring_size_log}, scale 2^{params.scale_log}"
        )
    if level > params.level_budget:
        raise FormatError(f"level {level} exceeds budget {params.level_budget}")
    if polys != 2:
        raise FormatError(f"expected 2 polynomials, got {polys}")
    expected = serialized_size(params, level, polys)
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes, got {len(data)}")
    k = len(params.primes_at(level))
    words = np.frombuffer(data, dtype="<u8", offset=HEADER_SIZE).reshape(polys, k, params.ring_size)
    q = np.array(params.primes_at(level), dtype=np.uint64)[:, None]
    if np.any(words >= q):
        raise FormatError("residue out of range for its prime")
    words = words.astype(np.uint64)
    return Ciphertext(params, words[0].copy(), words[1].copy(), params.scale_at(level), level)
