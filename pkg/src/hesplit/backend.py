"""Uniform homomorphic-evaluation interface over real CKKS or a noise simulator.

Both backends expose the same methods and enforce the same level ledger: every
multiplication (plain, scalar, ciphertext, or a fused sum of products) consumes
exactly one level, addition requires equal levels, and rotation needs a key for
the step or for each power of two it decomposes into. The simulator computes in
float64, then quantizes and adds Gaussian noise after each multiplication.
"""

from __future__ import annotations

import io
import json
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from . import ckks
from .ckks import CryptoParams, LevelError, MissingRotationKey
from .ckks.scheme import rotation_plan
from .constants import SIM_DEFAULT_PRECISION_BITS, sim_default_stddev

BACKEND_KINDS = ("ckks", "noise-sim")


class BackendMismatch(TypeError):
    """An operand produced by one backend kind was handed to another."""


# ---------------------------------------------------------------- simulator types


@dataclass(frozen=True, eq=False)
class SimCiphertext:
    values: np.ndarray
    level: int

    @property
    def slot_count(self) -> int:
        return self.values.size


@dataclass(frozen=True, eq=False)
class SimPlaintext:
    values: np.ndarray
    level: int


@dataclass(frozen=True)
class SimKeys:
    rotation_steps: frozenset[int]
    has_secret: bool = True

    @property
    def rotation_keys(self) -> frozenset[int]:
        return self.rotation_steps

    def public(self) -> SimKeys:
        return SimKeys(self.rotation_steps, False)


@dataclass(frozen=True)
class NoiseModel:
    stddev: float
    precision_bits: int = SIM_DEFAULT_PRECISION_BITS

    def apply(self, values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.precision_bits < 52:
            step = 2.0 ** -self.precision_bits
            values = np.round(values / step) * step
        if self.stddev > 0:
            values = values + rng.normal(0.0, self.stddev, values.shape)
        return values


# ---------------------------------------------------------------- interface


class Backend(ABC):
    kind: str
    params: CryptoParams

    @property
    def slot_count(self) -> int:
        return self.params.slot_count

    @property
    def top_level(self) -> int:
        return self.params.level_budget

    def dispatch(self, op: str, *operands, **kwargs):
        """Call operation ``op`` by name (uniform entry point for drivers)."""
        fn = getattr(self, op, None)
        if fn is None or op.startswith("_"):
            raise ValueError(f"unknown backend operation {op!r}")
        return fn(*operands, **kwargs)

    @abstractmethod
    def keygen(self, rotation_steps: Iterable[int] = (), seed=None) -> Any: ...

    @abstractmethod
    def encode(self, values, level: int | None = None) -> Any: ...

    @abstractmethod
    def encrypt(self, values, keys, level: int | None = None) -> Any: ...

    @abstractmethod
    def decrypt(self, ct, keys) -> np.ndarray: ...

    @abstractmethod
    def level(self, ct) -> int: ...

    @abstractmethod
    def add(self, a, b): ...

    @abstractmethod
    def sub(self, a, b): ...

    @abstractmethod
    def add_plain(self, a, values): ...

    @abstractmethod
    def mul_plain(self, a, p): ...

    @abstractmethod
    def mul_scalar(self, a, s: float): ...

    @abstractmethod
    def mul_ct(self, a, b, keys): ...

    @abstractmethod
    def mul_plain_sum(self, cts: Sequence, plains: Sequence): ...

    @abstractmethod
    def mul_scalar_sum(self, cts: Sequence, scalars: Sequence[float]): ...

    @abstractmethod
    def mul_ct_sum(self, lhs: Sequence, rhs: Sequence, keys): ...

    @abstractmethod
    def rotate(self, a, step: int, keys): ...

    @abstractmethod
    def level_drop(self, a, target_level: int): ...

    @abstractmethod
    def serialize(self, ct) -> bytes: ...

    @abstractmethod
    def deserialize(self, data: bytes): ...

    @abstractmethod
    def serialize_keys(self, keys) -> bytes: ...

    @abstractmethod
    def deserialize_keys(self, data: bytes): ...

    def align(self, a, b):
        """Drop the higher-level operand so both share a level."""
        la, lb = self.level(a), self.level(b)
        if la > lb:
            a = self.level_drop(a, lb)
        elif lb > la:
            b = self.level_drop(b, la)
        return a, b

    def sum(self, cts: Sequence):
        out = cts[0]
        for c in cts[1:]:
            out = self.add(out, c)
        return out


def backend_ops(handle: Backend, op: str, *operands, **kwargs):
    return handle.dispatch(op, *operands, **kwargs)


# ---------------------------------------------------------------- real scheme


class CkksBackend(Backend):
    kind = "ckks"

    def __init__(self, params: CryptoParams, seed=None):
        self.params = params
        self._rng = np.random.default_rng(seed)

    def _ct(self, *xs):
        for x in xs:
            if not isinstance(x, ckks.Ciphertext):
                raise BackendMismatch(f"ckks backend got {type(x).__name__}")
            if x.params != self.params:
                raise ValueError("ciphertext parameters differ from the backend's")

    def keygen(self, rotation_steps=(), seed=None):
        return ckks.keygen(self.params, rotation_steps, seed)

    def encode(self, values, level=None):
        if isinstance(values, SimPlaintext):
            raise BackendMismatch("ckks backend got a simulator plaintext")
        if isinstance(values, ckks.Plaintext):
            return values
        return ckks.encode(values, self.params, level)

    def encrypt(self, values, keys, level=None):
        pt = values if isinstance(values, ckks.Plaintext) else ckks.encode(values, self.params, level)
        return ckks.encrypt(pt, keys, self._rng)

    def decrypt(self, ct, keys):
        self._ct(ct)
        return ckks.decrypt_values(ct, keys)

    def level(self, ct):
        self._ct(ct)
        return ct.level

    def add(self, a, b):
        self._ct(a, b)
        return ckks.add(a, b)

    def sub(self, a, b):
        self._ct(a, b)
        return ckks.sub(a, b)

    def add_plain(self, a, values):
        self._ct(a)
        return ckks.add_plain(a, values)

    def _plain(self, p, level):
        if isinstance(p, SimPlaintext):
            raise BackendMismatch("ckks backend got a simulator plaintext")
        return p if isinstance(p, ckks.Plaintext) else ckks.encode(p, self.params, level)

    def mul_plain(self, a, p):
        self._ct(a)
        return ckks.mul_plain(a, self._plain(p, a.level))

    def mul_scalar(self, a, s):
        self._ct(a)
        return ckks.mul_scalar(a, s)

    def mul_ct(self, a, b, keys):
        self._ct(a, b)
        return ckks.mul_ct(a, b, keys)

    def mul_plain_sum(self, cts, plains):
        self._ct(*cts)
        lvl = cts[0].level if cts else None
        return ckks.mul_plain_sum(list(cts), [self._plain(p, lvl) for p in plains])

    def mul_scalar_sum(self, cts, scalars):
        self._ct(*cts)
        return ckks.mul_scalar_sum(list(cts), list(scalars))

    def mul_ct_sum(self, lhs, rhs, keys):
        self._ct(*lhs, *rhs)
        return ckks.mul_ct_sum(list(lhs), list(rhs), keys)

    def rotate(self, a, step, keys):
        self._ct(a)
        return ckks.rotate(a, step, keys)

    def level_drop(self, a, target_level):
        self._ct(a)
        return ckks.level_drop(a, target_level)

    def serialize(self, ct):
        self._ct(ct)
        return ckks.serialize(ct)

    def deserialize(self, data):
        return ckks.deserialize(data, self.params)

    def serialize_keys(self, keys):
        arrays = {
            "digest": np.frombuffer(self.params.digest().encode(), dtype=np.uint8),
            "pk_b": keys.public_key[0],
            "pk_a": keys.public_key[1],
            "relin_b": keys.relin_key.b,
            "relin_a": keys.relin_key.a,
        }
        for step, k in keys.rotation_keys.items():
            arrays[f"rot_{step}_b"] = k.b
            arrays[f"rot_{step}_a"] = k.a
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        return buf.getvalue()

    def deserialize_keys(self, data):
        from .ckks.scheme import KeyBundle, KeySwitchKey

        with np.load(io.BytesIO(data), allow_pickle=False) as z:
            if z["digest"].tobytes().decode() != self.params.digest():
                raise ValueError("key material was generated for different parameters")
            rot = {}
            for name in z.files:
                if name.startswith("rot_") and name.endswith("_b"):
                    step = int(name[4:-2])
                    rot[step] = KeySwitchKey(z[name], z[f"rot_{step}_a"])
            return KeyBundle(
                self.params,
                (z["pk_b"], z["pk_a"]),
                None,
                KeySwitchKey(z["relin_b"], z["relin_a"]),
                rot,
            )


# ---------------------------------------------------------------- simulator

_SIM_HEADER = struct.Struct("<4sBI")


class NoiseSimBackend(Backend):
    """Float64 stand-in for CKKS with the same level ledger and key checks."""

    kind = "noise-sim"

    def __init__(self, params: CryptoParams, noise: NoiseModel | None = None, seed=None):
        self.params = params
        self.noise = noise or NoiseModel(sim_default_stddev(params.scale_log))
        self._rng = np.random.default_rng(seed)

    def _ct(self, *xs):
        for x in xs:
            if not isinstance(x, SimCiphertext):
                raise BackendMismatch(f"noise-sim backend got {type(x).__name__}")

    def _slots(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size > self.slot_count:
            raise ValueError(f"{v.size} values exceed the {self.slot_count} available slots")
        if not np.all(np.isfinite(v)):
            raise ValueError("cannot encode non-finite values")
        out = np.zeros(self.slot_count)
        out[: v.size] = v
        return out

    def _need_level(self, a: SimCiphertext):
        if a.level < 1:
            raise LevelError("ciphertext is at level 0; multiplicative budget exhausted")

    def _same_level(self, a, b):
        if a.level != b.level:
            raise LevelError(f"level mismatch: {a.level} vs {b.level}")

    def _mul_result(self, values, level) -> SimCiphertext:
        return SimCiphertext(self.noise.apply(values, self._rng), level - 1)

    def _plain(self, p, level) -> np.ndarray:
        if isinstance(p, ckks.Plaintext):
            raise BackendMismatch("noise-sim backend got a ckks plaintext")
        if isinstance(p, SimPlaintext):
            if p.level != level:
                raise LevelError(f"plaintext level {p.level} != ciphertext level {level}")
            return p.values
        return self._slots(p)

    def keygen(self, rotation_steps=(), seed=None):
        steps = set(int(s) for s in rotation_steps)
        for s in steps:
            if not 0 < s < self.slot_count:
                raise ValueError(f"rotation step {s} outside [1, N/2)")
        return SimKeys(frozenset(steps))

    def encode(self, values, level=None):
        if isinstance(values, SimPlaintext):
            return values
        if isinstance(values, ckks.Plaintext):
            raise BackendMismatch("noise-sim backend got a ckks plaintext")
        return SimPlaintext(self._slots(values), self.top_level if level is None else level)

    def encrypt(self, values, keys, level=None):
        if isinstance(values, SimPlaintext):
            return SimCiphertext(values.values.copy(), values.level)
        return SimCiphertext(self._slots(values), self.top_level if level is None else level)

    def decrypt(self, ct, keys):
        self._ct(ct)
        if not getattr(keys, "has_secret", False):
            raise PermissionError("key bundle carries no secret key")
        return ct.values.copy()

    def level(self, ct):
        self._ct(ct)
        return ct.level

    def add(self, a, b):
        self._ct(a, b)
        self._same_level(a, b)
        return SimCiphertext(a.values + b.values, a.level)

    def sub(self, a, b):
        self._ct(a, b)
        self._same_level(a, b)
        return SimCiphertext(a.values - b.values, a.level)

    def add_plain(self, a, values):
        self._ct(a)
        return SimCiphertext(a.values + self._plain(values, a.level), a.level)

    def mul_plain(self, a, p):
        self._ct(a)
        self._need_level(a)
        return self._mul_result(a.values * self._plain(p, a.level), a.level)

    def mul_scalar(self, a, s):
        self._ct(a)
        self._need_level(a)
        return self._mul_result(a.values * float(s), a.level)

    def mul_ct(self, a, b, keys):
        self._ct(a, b)
        self._need_level(a)
        self._same_level(a, b)
        return self._mul_result(a.values * b.values, a.level)

    def mul_plain_sum(self, cts, plains):
        if not cts or len(cts) != len(plains):
            raise ValueError("need equally many (>0) ciphertexts and plaintexts")
        self._ct(*cts)
        a = cts[0]
        self._need_level(a)
        for c in cts:
            self._same_level(a, c)
        acc = np.zeros(self.slot_count)
        for c, p in zip(cts, plains):
            acc += c.values * self._plain(p, a.level)
        return self._mul_result(acc, a.level)

    def mul_scalar_sum(self, cts, scalars):
        if not cts or len(cts) != len(scalars):
            raise ValueError("need equally many (>0) ciphertexts and scalars")
        self._ct(*cts)
        a = cts[0]
        self._need_level(a)
        for c in cts:
            self._same_level(a, c)
        acc = np.zeros(self.slot_count)
        for c, s in zip(cts, scalars):
            acc += c.values * float(s)
        return self._mul_result(acc, a.level)

    def mul_ct_sum(self, lhs, rhs, keys):
        if not lhs or len(lhs) != len(rhs):
            raise ValueError("need equally many (>0) ciphertext pairs")
        self._ct(*lhs, *rhs)
        a = lhs[0]
        self._need_level(a)
        acc = np.zeros(self.slot_count)
        for x, y in zip(lhs, rhs):
            self._same_level(a, x)
            self._same_level(a, y)
            acc += x.values * y.values
        return self._mul_result(acc, a.level)

    def rotate(self, a, step, keys):
        self._ct(a)
        plan = rotation_plan(step, self.params, keys.rotation_keys)
        if not plan:
            return a
        return SimCiphertext(np.roll(a.values, -sum(plan)), a.level)

    def level_drop(self, a, target_level):
        self._ct(a)
        if target_level > a.level:
            raise LevelError(f"cannot raise level {a.level} to {target_level}")
        if target_level < 0:
            raise LevelError("target level must be >= 0")
        return a if target_level == a.level else SimCiphertext(a.values, target_level)

    def serialize(self, ct):
        self._ct(ct)
        return _SIM_HEADER.pack(b"SIM1", ct.level, ct.values.size) + ct.values.astype("<f8").tobytes()

    def deserialize(self, data):
        magic, level, n = _SIM_HEADER.unpack_from(data)
        if magic != b"SIM1" or n != self.slot_count or len(data) != _SIM_HEADER.size + 8 * n:
            raise ValueError("malformed simulator ciphertext")
        values = np.frombuffer(data, dtype="<f8", offset=_SIM_HEADER.size).astype(np.float64)
        return SimCiphertext(values, level)

    def serialize_keys(self, keys):
        return json.dumps({"digest": self.params.digest(), "rotation_steps": sorted(keys.rotation_steps)}).encode()

    def deserialize_keys(self, data):
        meta = json.loads(data)
        if meta["digest"] != self.params.digest():
            raise ValueError("key material was generated for different parameters")
        return SimKeys(frozenset(meta["rotation_steps"]), False)


def make_backend(kind: str, params: CryptoParams, seed=None, noise: NoiseModel | None = None) -> Backend:
    kind = kind.replace("_", "-")
    if kind == "ckks":
        return CkksBackend(params, seed)
    if kind == "noise-sim":
        return NoiseSimBackend(params, noise, seed)
    raise ValueError(f"unknown backend {kind!r}; expected one of {BACKEND_KINDS}")


__all__ = [
    "Backend", "BackendMismatch", "CkksBackend", "MissingRotationKey", "NoiseModel", "NoiseSimBackend",
    "SimCiphertext", "SimKeys", "SimPlaintext", "backend_ops", "make_backend",
]
