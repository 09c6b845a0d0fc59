"""Slot layouts shared by the server and the client.

The server segment is planned once from the layer sizes and the slot count;
both parties derive the same plan, so ciphertext layouts never travel as data.
Weights are stored augmented, ``(out, in + 1)`` with the bias last.

One server layer (``n = 1``) runs one-level products in one of three modes:

* ``dense``: batch packing, plaintext samples; ``S`` samples per output.
* ``scalar``: scalar packing, plaintext samples; one output per sample.
* ``persample``: encrypted samples stored as block-broadcast ciphertexts; one
  output per sample which the client folds.

Deeper segments keep the samples apart. Hidden server layer ``i`` holds
``W_i^T`` in the rotate-and-sum layout, and its input is the row ``[a, 1]``
replicated into every block of ``P_i`` slots. The last server layer holds
``W_n`` in the batch layout and takes its input block-broadcast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..packing import SCALAR, choose_packing, layout_columns, padded_length


@dataclass(frozen=True)
class LayerGeometry:
    """Slot geometry of one server weight matrix as packed."""

    index: int  # 0-based layer index
    scheme: str  # "rotsum" for hidden layers, "batch" or "scalar" for the last one
    rows: int  # rows of the packed matrix (column length)
    cols: int  # packed columns
    padded: int  # block length P
    per_ct: int  # blocks per ciphertext S
    n_ct: int

    @property
    def rotsum_steps(self) -> list[int]:
        return [1 << j for j in range(int(math.log2(self.padded)))]

    @property
    def block_steps(self) -> list[int]:
        return [self.padded << j for j in range(int(math.log2(self.per_ct)))]


@dataclass(frozen=True)
class SegmentPlan:
    layer_sizes: tuple[int, ...]
    split_index: int
    slot_count: int
    mode: str  # dense | scalar | persample | deep
    layers: tuple[LayerGeometry, ...] = field(default=())

    @property
    def last(self) -> LayerGeometry:
        return self.layers[-1]

    def rotation_steps(self) -> list[int]:
        """Exactly the rotation keys this plan uses."""
        steps: set[int] = set()
        if self.mode == "dense":
            g = self.last
            steps.update(r * g.padded for r in range(1, g.per_ct))
        elif self.mode == "deep":
            for g in self.layers[:-1]:
                steps.update(g.rotsum_steps)
                if g.index > 0:
                    steps.update(g.block_steps)
            steps.update(self.last.rotsum_steps)
        return sorted(s for s in steps if 0 < s < self.slot_count)

    def outputs_per_batch(self, batch: int) -> int:
        """FWD_OUT ciphertexts for a batch of ``batch`` samples."""
        if self.mode == "dense":
            return -(-batch // self.last.per_ct)
        return batch

    def rotations_per_batch(self, batch: int, dense_strategy_cost: int | None = None) -> dict[str, int]:
        """Rotations by phase for one batch (dense mode takes the cheaper strategy)."""
        if self.mode in ("scalar", "persample"):
            return {"forward": 0, "backward": 0}
        if self.mode == "dense":
            g = self.last
            groups = -(-batch // g.per_ct)
            cost = min(g.n_ct, groups) * (g.per_ct - 1)
            return {"forward": cost, "backward": cost}
        fwd = sum(g.n_ct * len(g.rotsum_steps) for g in self.layers[:-1])
        bwd = self.last.n_ct * len(self.last.rotsum_steps)
        bwd += sum(len(g.block_steps) for g in self.layers[1:-1])
        return {"forward": fwd * batch, "backward": bwd * batch}


def plan_segment(
    layer_sizes, split_index: int, slot_count: int, encrypt_data: bool = False, packing: str = "auto",
) -> SegmentPlan:
    sizes = tuple(int(v) for v in layer_sizes)
    n = split_index
    if n == 1:
        rows, cols = sizes[1], sizes[0] + 1
        scheme = packing if packing != "auto" else choose_packing(rows, slot_count)
        if scheme == "batch" and padded_length(rows) > slot_count:
            scheme = "scalar"
        if scheme == "scalar":
            if rows > slot_count:
                raise ValueError(f"server output of {rows} exceeds {slot_count} slots")
            geo = LayerGeometry(0, "scalar", rows, cols, min(padded_length(rows), slot_count), 1, cols)
        else:
            p = padded_length(rows)
            per = slot_count // p
            geo = LayerGeometry(0, "batch", rows, cols, p, per, -(-cols // per))
        mode = "persample" if encrypt_data else ("scalar" if scheme == "scalar" else "dense")
        return SegmentPlan(sizes, n, slot_count, mode, (geo,))
    layers = []
    for i in range(n - 1):
        p = padded_length(sizes[i] + 1)
        if p > slot_count:
            raise ValueError(
                f"layer {i + 1}: padded input of {p} exceeds {slot_count} slots; deep splits need inputs below N/2"
            )
        per = slot_count // p
        layers.append(LayerGeometry(i, "rotsum", sizes[i] + 1, sizes[i + 1], p, per, -(-sizes[i + 1] // per)))
    rows, cols = sizes[n], sizes[n - 1] + 1
    p = padded_length(rows)
    if p > slot_count:
        raise ValueError(f"last server layer of {rows} needs more than {slot_count} slots")
    per = slot_count // p
    layers.append(LayerGeometry(n - 1, "batch", rows, cols, p, per, -(-cols // per)))
    return SegmentPlan(sizes, n, slot_count, "deep", tuple(layers))


# ---------------------------------------------------------------- weight layouts


def weight_slots(W: np.ndarray, geo: LayerGeometry, slot_count: int) -> np.ndarray:
    """Plaintext slot rows for augmented weights ``W`` (shape ``(out, in + 1)``)."""
    if geo.scheme == "rotsum":
        slots, _, _ = layout_columns(W.T, slot_count, geo.padded)
    elif geo.scheme == "scalar":
        slots = np.zeros((W.shape[1], slot_count))
        slots[:, : W.shape[0]] = W.T
    else:
        slots, _, _ = layout_columns(W, slot_count, geo.padded)
    return slots


def weights_from_slots(slots: np.ndarray, geo: LayerGeometry) -> np.ndarray:
    """Inverse of :func:`weight_slots`."""
    slots = np.asarray(slots)
    if geo.scheme == "scalar":
        return slots[: geo.cols, : geo.rows].T.copy()
    blocks = slots.reshape(-1, geo.padded)[: geo.cols, : geo.rows]
    return blocks.copy() if geo.scheme == "rotsum" else blocks.T.copy()


# ---------------------------------------------------------------- activation layouts


def replicated(v: np.ndarray, padded: int, slot_count: int) -> np.ndarray:
    """``v`` at the start of every ``padded``-slot block (one ciphertext)."""
    block = np.zeros(padded)
    block[: v.size] = v
    return np.tile(block, slot_count // padded)


def broadcast(v: np.ndarray, padded: int, slot_count: int, count: int) -> np.ndarray:
    """Block ``t`` of ciphertext ``c`` filled with ``v[c * S + t]`` (``S`` blocks each)."""
    per = slot_count // padded
    vals = np.zeros(count * per)
    vals[: v.size] = v
    return np.repeat(vals, padded).reshape(count, slot_count)


def activation_mask(length: int, padded: int, slot_count: int, c0: float, count: int = 1,
                    kind: str = "replicated") -> np.ndarray:
    """Additive correction after a polynomial on a zero-padded layout.

    The client fills unused slots with 0, so ``p(0) = c0`` appears there; the
    mask turns the bias slot into 1 and every other unused slot into 0.
    """
    if kind == "replicated":
        block = np.full(padded, -c0)
        block[:length] = 0.0
        block[length] = 1.0 - c0
        return np.tile(block, slot_count // padded)[None, :].repeat(count, 0)
    per = slot_count // padded
    vals = np.full(count * per, -c0)
    vals[:length] = 0.0
    vals[length] = 1.0 - c0
    return np.repeat(vals, padded).reshape(count, slot_count)


def build_layout(kind: str, v: np.ndarray, padded: int, slot_count: int, count: int = 1) -> np.ndarray:
    if kind == "replicated":
        return replicated(v, padded, slot_count)[None, :]
    if kind == "broadcast":
        return broadcast(v, padded, slot_count, count)
    raise ValueError(f"unknown layout {kind!r}")


def fold_marks(geo: LayerGeometry, length: int) -> list[list[int]]:
    """(ciphertext, slot) of entry ``m`` after an in-block rotate-and-sum of a batch layout."""
    return [[m // geo.per_ct, (m % geo.per_ct) * geo.padded] for m in range(length)]
