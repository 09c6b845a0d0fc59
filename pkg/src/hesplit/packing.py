"""Packed encrypted linear algebra.

Three weight layouts share one vocabulary. Columns are zero-padded to
``padded_col_len`` (the smallest power of two strictly greater than the column
length) and concatenated into the ``N/2`` slots of a ciphertext:

* ``one_level_batch``: ``cols_per_ct = (N/2) / padded_col_len`` columns per
  ciphertext; a matrix-vector product is one fused plaintext multiplication, and
  the client sums the sub-blocks after decryption.
* ``one_level_scalar``: one column per ciphertext; the product is a fused sum of
  ciphertext-times-scalar terms.
* ``rotsum_matrix``: the batch layout used for matrix-matrix products whose
  per-block dot products are completed under encryption by rotate-and-add. The
  valid results sit at "marked" slots, at stride ``padded_col_len``.

All kernels consume exactly one multiplicative level and return their rotation
counts as part of the result rather than through shared counters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .backend import Backend
from .constants import PACKING_RATIO_THRESHOLD

BATCH = "one_level_batch"
SCALAR = "one_level_scalar"
ROTSUM = "rotsum_matrix"


def padded_length(n: int) -> int:
    """Smallest power of two strictly greater than ``n`` (so 3 -> 4 and 4 -> 8)."""
    if n < 0:
        raise ValueError("length must be non-negative")
    return 1 << int(n).bit_length()


def _slot_count(params_or_slots) -> int:
    return params_or_slots if isinstance(params_or_slots, int) else params_or_slots.slot_count


@dataclass(frozen=True, eq=False)
class PackedWeights:
    scheme: str
    ciphertexts: tuple
    rows: int
    cols: int
    padded_col_len: int
    cols_per_ct: int
    division_step: int
    segments: int = 1  # ciphertexts per column when padded_col_len > N/2

    def column_slot(self, j: int) -> tuple[int, int]:
        """(ciphertext index, first slot) of column ``j`` (first segment)."""
        if self.segments > 1:
            return j * self.segments, 0
        return j // self.cols_per_ct, (j % self.cols_per_ct) * self.padded_col_len

    def with_ciphertexts(self, cts: Sequence) -> PackedWeights:
        if len(cts) != len(self.ciphertexts):
            raise ValueError("ciphertext count changed")
        return PackedWeights(
            self.scheme, tuple(cts), self.rows, self.cols, self.padded_col_len,
            self.cols_per_ct, self.division_step, self.segments,
        )


@dataclass(frozen=True, eq=False)
class MarkedResult:
    """Rotate-and-sum output: valid dot products live only at ``mark_positions``."""

    ciphertexts: list
    mark_positions: list[tuple[int, int]]
    entries: list[tuple[int, int]]
    shape: tuple[int, int]
    rotations: int

    def extract(self, decrypted: Sequence[np.ndarray]) -> np.ndarray:
        out = np.zeros(self.shape)
        for (ci, slot), (r, c) in zip(self.mark_positions, self.entries):
            out[r, c] = decrypted[ci][slot]
        return out


# ---------------------------------------------------------------- plaintext layouts


def layout_columns(W: np.ndarray, slot_count: int, padded: int | None = None) -> tuple[np.ndarray, int, int]:
    """Concatenate zero-padded columns of ``W``; returns (slots, padded_len, per_ct).

    ``slots`` has shape ``(ciphertexts, slot_count)``; a column whose padded
    length exceeds the slot count is split over consecutive ciphertexts.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    rows, cols = W.shape
    p = padded_length(rows) if padded is None else padded
    if p <= slot_count:
        per = slot_count // p
        n_ct = -(-cols // per)
        blocks = np.zeros((n_ct * per, p))
        blocks[:cols, :rows] = W.T
        return blocks.reshape(n_ct, slot_count), p, per
    seg = p // slot_count
    cols_pad = np.zeros((cols, p))
    cols_pad[:, :rows] = W.T
    return cols_pad.reshape(cols * seg, slot_count), p, 1


def layout_row(a: np.ndarray, padded: int, slot_count: int) -> np.ndarray:
    """Row replicated into every block: ``[a, 0.., a, 0.., ...]``; split if long."""
    a = np.asarray(a, dtype=np.float64).ravel()
    block = np.zeros(padded)
    block[: a.size] = a
    if padded <= slot_count:
        return np.tile(block, slot_count // padded)[None, :]
    return block.reshape(padded // slot_count, slot_count)


def _encrypt_all(rows: np.ndarray, backend: Backend, keys, level: int | None) -> tuple:
    return tuple(backend.encrypt(r, keys, level) for r in rows)


# ---------------------------------------------------------------- packers


def pack_matrix_batch(W, backend: Backend, keys, level: int | None = None) -> PackedWeights:
    """Batches of zero-padded columns per ciphertext."""
    W = np.asarray(W, dtype=np.float64)
    n = backend.slot_count
    if padded_length(W.shape[0]) > n:
        raise ValueError(
            f"padded column length {padded_length(W.shape[0])} exceeds {n} slots; use rotsum packing"
        )
    slots, p, per = layout_columns(W, n)
    return PackedWeights(BATCH, _encrypt_all(slots, backend, keys, level), W.shape[0], W.shape[1], p, per, per)


def pack_matrix_scalar(W, backend: Backend, keys, level: int | None = None) -> PackedWeights:
    """One column per ciphertext."""
    W = np.asarray(W, dtype=np.float64)
    n = backend.slot_count
    rows, cols = W.shape
    if rows > n:
        raise ValueError(f"column length {rows} exceeds {n} slots; use rotsum packing")
    slots = np.zeros((cols, n))
    slots[:, :rows] = W.T
    p = min(padded_length(rows), n)
    return PackedWeights(SCALAR, _encrypt_all(slots, backend, keys, level), rows, cols, p, 1, 1)


def pack_columns_rotsum(B, backend: Backend, keys, level: int | None = None) -> PackedWeights:
    """Padded, concatenated columns for rotate-and-sum matrix products."""
    if isinstance(B, PackedWeights):
        if B.scheme == ROTSUM:
            return B
        if B.scheme == BATCH:
            return PackedWeights(ROTSUM, B.ciphertexts, B.rows, B.cols, B.padded_col_len, B.cols_per_ct, B.division_step)
        raise ValueError("scalar-packed weights cannot be reused for rotate-and-sum")
    B = np.asarray(B, dtype=np.float64)
    n = backend.slot_count
    slots, p, per = layout_columns(B, n)
    seg = max(1, p // n)
    return PackedWeights(ROTSUM, _encrypt_all(slots, backend, keys, level), B.shape[0], B.shape[1], p, per, per, seg)


def rotsum_steps(padded_col_len: int, slot_count: int) -> list[int]:
    """Rotation steps used by rotate-and-add over one block."""
    span = min(padded_col_len, slot_count)
    return [1 << i for i in range(int(math.log2(span)))]


# ---------------------------------------------------------------- one-level products


def _block_pattern(values: np.ndarray, padded: int, slot_count: int) -> np.ndarray:
    """Broadcast value ``t`` across block ``t``; trailing blocks zero."""
    per = slot_count // padded
    v = np.zeros(per)
    v[: values.size] = values
    return np.repeat(v, padded)


def matvec_one_level(pw: PackedWeights, x, backend: Backend, keys=None) -> list:
    """Encrypted ``W @ x`` in one level; returns one ciphertext of partial sums.

    Batch layout: slot block ``t`` holds ``sum_k W[:, kS+t] * x[kS+t]``, which the
    client folds with :func:`client_fold`. Scalar layout: the first ``rows``
    slots hold the full product.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != pw.cols:
        raise ValueError(f"vector length {x.size} != matrix columns {pw.cols}")
    n = backend.slot_count
    if pw.scheme == SCALAR:
        return [backend.mul_scalar_sum(list(pw.ciphertexts), list(x))]
    if pw.scheme != BATCH:
        raise ValueError(f"matvec_one_level needs a one-level scheme, got {pw.scheme}")
    S = pw.cols_per_ct
    plains = [_block_pattern(x[k * S:(k + 1) * S], pw.padded_col_len, n) for k in range(len(pw.ciphertexts))]
    return [backend.mul_plain_sum(list(pw.ciphertexts), plains)]


def client_fold(decrypted_blocks, cols_per_ct: int, padded_col_len: int, rows: int) -> np.ndarray:
    """Sum the ``cols_per_ct`` sub-blocks and keep the first ``rows`` entries."""
    v = np.asarray(decrypted_blocks, dtype=np.float64).ravel()
    if v.size != cols_per_ct * padded_col_len:
        raise ValueError(f"expected {cols_per_ct * padded_col_len} values, got {v.size}")
    if rows > padded_col_len:
        raise ValueError("rows exceed the padded block length")
    return v.reshape(cols_per_ct, padded_col_len).sum(axis=0)[:rows]


# ---------------------------------------------------------------- rotate-and-sum


def _rotsum(ct, steps: Sequence[int], backend: Backend, keys):
    for s in steps:
        ct = backend.add(ct, backend.rotate(ct, s, keys))
    return ct


def encrypt_rows(A, pw: PackedWeights, backend: Backend, keys, level: int | None = None) -> list[list]:
    """Encrypt each row of ``A`` in the replicated layout matching ``pw``."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    return [
        [backend.encrypt(s, keys, level) for s in layout_row(a, pw.padded_col_len, backend.slot_count)]
        for a in A
    ]


def matmat_rotsum(A, B: PackedWeights, backend: Backend, keys) -> MarkedResult:
    """``A @ B`` with ``B`` packed by columns and completed by rotate-and-add.

    ``A`` is a plaintext matrix or a list of encrypted rows (each a list of
    segment ciphertexts as produced by :func:`encrypt_rows`). For each row and
    each packed ciphertext of ``B`` the kernel multiplies slotwise, then adds
    ``log2(min(padded_col_len, N/2))`` rotated copies so each block's first slot
    holds a full dot product. Columns split over several ciphertexts are
    summed segment-wise before the rotations.
    """
    if B.scheme not in (ROTSUM, BATCH):
        raise ValueError(f"matmat_rotsum needs rotsum packing, got {B.scheme}")
    n = backend.slot_count
    p = B.padded_col_len
    encrypted = not isinstance(A, np.ndarray) and len(A) > 0 and isinstance(A[0], (list, tuple))
    if encrypted:
        rows_in = A
        n_rows = len(A)
    else:
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        if A.shape[1] != B.rows:
            raise ValueError(f"inner dimensions differ: {A.shape[1]} vs {B.rows}")
        n_rows = A.shape[0]
        rows_in = [layout_row(a, p, n) for a in A]
    steps = rotsum_steps(p, n)
    cts, marks, entries = [], [], []
    rotations = 0
    seg = B.segments
    n_groups = len(B.ciphertexts) // seg
    for i, row in enumerate(rows_in):
        if len(row) != seg:
            raise ValueError(f"row {i} has {len(row)} segments, expected {seg}")
        for g in range(n_groups):
            weights = list(B.ciphertexts[g * seg:(g + 1) * seg])
            if encrypted:
                lhs = list(row)
                w = [backend.level_drop(c, min(backend.level(c), backend.level(lhs[0]))) for c in weights]
                lhs = [backend.level_drop(c, backend.level(w[0])) for c in lhs]
                prod = backend.mul_ct_sum(lhs, w, keys)
            else:
                prod = backend.mul_plain_sum(weights, list(row))
            prod = _rotsum(prod, steps, backend, keys)
            rotations += len(steps)
            ci = len(cts)
            cts.append(prod)
            if seg > 1:
                marks.append((ci, 0))
                entries.append((i, g))
            else:
                for t in range(B.cols_per_ct):
                    j = g * B.cols_per_ct + t
                    if j < B.cols:
                        marks.append((ci, t * p))
                        entries.append((i, j))
    return MarkedResult(cts, marks, entries, (n_rows, B.cols), rotations)


# ---------------------------------------------------------------- multi-sample products


@dataclass
class DenseProduct:
    """Ciphertexts plus the rotation count spent producing them."""

    ciphertexts: list
    rotations: int = 0
    strategy: str = ""
    extra: dict = field(default_factory=dict)


def dense_steps(pw: PackedWeights) -> list[int]:
    """Rotation steps needed by the multi-sample batch kernels."""
    return [r * pw.padded_col_len for r in range(1, pw.cols_per_ct)]


def _mul_sum(backend: Backend, cts, patterns, keys, encrypt_patterns: bool):
    if encrypt_patterns:
        lvl = backend.level(cts[0])
        enc = [backend.encrypt(p, keys, lvl) for p in patterns]
        return backend.mul_ct_sum(list(cts), enc, keys)
    return backend.mul_plain_sum(list(cts), patterns)


def batch_forward_dense(
    pw: PackedWeights, X: np.ndarray, backend: Backend, keys, encrypt_patterns: bool = False
) -> DenseProduct:
    """``W @ x`` for every row ``x`` of ``X``, ``cols_per_ct`` samples per output.

    Output ciphertext ``g`` holds the result for sample ``g*S + s`` in block
    ``s`` (``S = cols_per_ct``), fully summed, so no client fold is needed.
    Rotations go either on the ``K`` weight ciphertexts or on the output
    groups, whichever is fewer.
    """
    if pw.scheme != BATCH:
        raise ValueError("dense forward needs batch packing")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != pw.cols:
        raise ValueError(f"input width {X.shape[1]} != matrix columns {pw.cols}")
    n = backend.slot_count
    P, S = pw.padded_col_len, pw.cols_per_ct
    K = len(pw.ciphertexts)
    G = -(-X.shape[0] // S)
    Xp = np.zeros((G * S, K * S))
    Xp[: X.shape[0], : pw.cols] = X
    # xs[g, s, k, t] = x^{(gS+s)}_{kS+t}
    xs = Xp.reshape(G, S, K, S)
    t = np.arange(S)
    out: list = []
    if S == 1 or K <= G:
        rotated = [[c] + [backend.rotate(c, r * P, keys) for r in range(1, S)] for c in pw.ciphertexts]
        for g in range(G):
            cts, pats = [], []
            for k in range(K):
                for r in range(S):
                    # block s carries x^{(s)}_{j(k, (s+r) mod S)}
                    vals = xs[g, t, k, (t + r) % S]
                    cts.append(rotated[k][r])
                    pats.append(np.repeat(vals, P))
            out.append(_mul_sum(backend, cts, pats, keys, encrypt_patterns))
        return DenseProduct(out, K * (S - 1), "rotate-weights")
    for g in range(G):
        acc = None
        for r in range(S):
            # block t carries x^{((t-r) mod S)}_{j(k, t)}
            pats = [np.repeat(xs[g, (t - r) % S, k, t], P) for k in range(K)]
            part = _mul_sum(backend, pw.ciphertexts, pats, keys, encrypt_patterns)
            if r:
                part = backend.rotate(part, r * P, keys)
            acc = part if acc is None else backend.add(acc, part)
        out.append(acc)
    return DenseProduct(out, G * (S - 1), "rotate-outputs")


def pack_deltas_dense(deltas: np.ndarray, padded: int, slot_count: int) -> np.ndarray:
    """Client-side layout of per-sample boundary deltas: ``S`` samples per row."""
    deltas = np.atleast_2d(deltas)
    S = slot_count // padded
    G = -(-deltas.shape[0] // S)
    blocks = np.zeros((G * S, padded))
    blocks[: deltas.shape[0], : deltas.shape[1]] = deltas
    return blocks.reshape(G, slot_count)


def unpack_outputs_dense(decrypted: Sequence[np.ndarray], padded: int, rows: int, samples: int) -> np.ndarray:
    """Inverse of the dense output layout: ``(samples, rows)`` matrix."""
    v = np.concatenate([np.asarray(d).ravel() for d in decrypted]).reshape(-1, padded)
    return v[:samples, :rows]


def batch_gradient_dense(
    pw: PackedWeights, delta_cts: Sequence, X: np.ndarray, backend: Backend, keys,
    encrypt_patterns: bool = False,
) -> DenseProduct:
    """Encrypted ``sum_s delta_s x_s^T`` in the batch layout of ``pw``.

    ``delta_cts[g]`` holds ``delta`` of sample ``g*S + u`` in block ``u``. The
    result ciphertext ``k`` holds the gradient of columns ``kS .. kS+S-1``.
    """
    if pw.scheme != BATCH:
        raise ValueError("dense gradient needs batch packing")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = backend.slot_count
    P, S = pw.padded_col_len, pw.cols_per_ct
    K = len(pw.ciphertexts)
    G = len(delta_cts)
    if G != -(-X.shape[0] // S):
        raise ValueError(f"{G} delta ciphertexts do not cover {X.shape[0]} samples")
    Xp = np.zeros((G * S, K * S))
    Xp[: X.shape[0], : pw.cols] = X
    xs = Xp.reshape(G, S, K, S)
    t = np.arange(S)
    if S == 1 or G <= K:
        rotated = [[d] + [backend.rotate(d, r * P, keys) for r in range(1, S)] for d in delta_cts]
        out = []
        for k in range(K):
            cts, pats = [], []
            for g in range(G):
                for r in range(S):
                    # block t: delta^{(g,(t+r))} * x^{(g,(t+r))}_{j(k,t)}
                    cts.append(rotated[g][r])
                    pats.append(np.repeat(xs[g, (t + r) % S, k, t], P))
            out.append(_mul_sum(backend, cts, pats, keys, encrypt_patterns))
        return DenseProduct(out, G * (S - 1), "rotate-deltas")
    out = []
    for k in range(K):
        acc = None
        for r in range(S):
            # pre-rotated pattern: block t carries x^{(g,t)}_{j(k,(t-r) mod S)}
            pats = [np.repeat(xs[g, t, k, (t - r) % S], P) for g in range(G)]
            part = _mul_sum(backend, delta_cts, pats, keys, encrypt_patterns)
            if r:
                part = backend.rotate(part, r * P, keys)
            acc = part if acc is None else backend.add(acc, part)
        out.append(acc)
    return DenseProduct(out, K * (S - 1), "rotate-gradients")


def scalar_forward(pw: PackedWeights, X: np.ndarray, backend: Backend) -> DenseProduct:
    """Scalar layout: one output ciphertext per sample, ``z`` in the leading slots."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return DenseProduct([backend.mul_scalar_sum(list(pw.ciphertexts), list(x)) for x in X], 0, "scalar")


def scalar_gradient(pw: PackedWeights, delta_cts: Sequence, X: np.ndarray, backend: Backend) -> DenseProduct:
    """Scalar layout gradient: column ``j`` is ``sum_s x_{s,j} delta_s``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return DenseProduct([backend.mul_scalar_sum(list(delta_cts), list(X[:, j])) for j in range(pw.cols)], 0, "scalar")


# ---------------------------------------------------------------- chooser and counts


def choose_packing(second_layer_size: int, params_or_slots, threshold: float = PACKING_RATIO_THRESHOLD) -> str:
    """``"scalar"`` when ``(N/2) / |l_2|`` is strictly below ``threshold``, else ``"batch"``."""
    if second_layer_size < 1:
        raise ValueError("layer size must be >= 1")
    ratio = Fraction(_slot_count(params_or_slots), second_layer_size)
    return "scalar" if ratio < Fraction(str(threshold)) else "batch"


def count_rotations(layer_sizes: Sequence[int], params_or_slots, ceil: bool = False):
    """Rotations for the encrypted matrix products of one sample in one pass.

    Evaluates ``sum_i (|l_i| |l_{i+1}| / (N/2)) * log2 |l_{i+1}|`` over padded
    sizes. Terms are fractional when a product fits in under one ciphertext;
    ``ceil=True`` rounds each ciphertext count up, matching what executes.
    """
    if not layer_sizes:
        raise ValueError("layer list must be non-empty")
    half = _slot_count(params_or_slots)
    total = Fraction(0)
    for a, b in zip(layer_sizes[:-1], layer_sizes[1:]):
        pa, pb = padded_length(a), padded_length(b)
        n_ct = Fraction(pa * pb, half)
        if ceil:
            n_ct = Fraction(math.ceil(n_ct))
        total += n_ct * int(math.log2(pb))
    return int(total) if total.denominator == 1 else float(total)
