"""Leveled RNS-CKKS approximate homomorphic encryption."""

from __future__ import annotations

from .params import CryptoParams
from .scheme import (
    Ciphertext,
    KeyBundle,
    LevelError,
    MissingRotationKey,
    Plaintext,
    add,
    add_plain,
    decode,
    decrypt,
    decrypt_values,
    encode,
    encrypt,
    encrypt_values,
    keygen,
    level_drop,
    mul_ct,
    mul_ct_sum,
    mul_plain,
    mul_plain_sum,
    mul_scalar,
    mul_scalar_sum,
    negate,
    power_of_two_steps,
    rotate,
    rotation_plan,
    sub,
)
from .serialize import FormatError, deserialize, serialize, serialized_size

__all__ = [
    "CryptoParams", "Ciphertext", "KeyBundle", "LevelError", "MissingRotationKey", "Plaintext",
    "add", "add_plain", "decode", "decrypt", "decrypt_values", "encode", "encrypt",
    "encrypt_values", "keygen", "level_drop", "mul_ct", "mul_ct_sum", "mul_plain", "mul_plain_sum", "mul_scalar",
    "mul_scalar_sum", "negate",
    "power_of_two_steps", "rotate", "rotation_plan", "sub",
    "FormatError", "deserialize", "serialize", "serialized_size",
]
