"""Pieces shared by both protocol roles."""

from __future__ import annotations

import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .. import __version__
from ..backend import Backend, NoiseModel, make_backend
from ..config import RunConfig
from .layouts import SegmentPlan, plan_segment

PROTOCOL_VERSION = 1
REFRESH_PURPOSES = ("scheduled", "level", "forward", "backward")


def backend_from_config(config: RunConfig, seed_offset: int = 0) -> Backend:
    """Backend for one party; the two parties use different encryption seeds."""
    params = config.crypto_params()
    seed = [config.crypto.seed, seed_offset]
    if config.crypto.backend.replace("_", "-") == "noise-sim":
        std, bits = config.crypto.noise(params)
        return make_backend("noise-sim", params, seed, NoiseModel(std, bits))
    return make_backend("ckks", params, seed)


def plan_from_config(config: RunConfig, slot_count: int) -> SegmentPlan:
    m, p = config.model, config.protocol
    return plan_segment(m.layer_sizes, m.split_index, slot_count, p.encrypt_data, p.packing)


def check_level_budget(config: RunConfig, level_budget: int) -> None:
    """Deep splits need one level after every polynomial, and two on the weights."""
    if config.model.split_index == 1:
        return
    for poly in config.poly_activations():
        if poly.levels_consumed + 1 > level_budget:
            raise ValueError(
                f"degree-{poly.degree} activation needs {poly.levels_consumed + 1} levels, budget is {level_budget}"
            )
    if level_budget < 2:
        raise ValueError("deep splits need a level budget of at least 2")


def refresh_interval(config: RunConfig, level_budget: int) -> int:
    """Updates between scheduled weight refreshes (0 disables them)."""
    r = config.protocol.refresh_every
    return max(level_budget - 1, 1) if r is None else r


def version_string() -> str:
    return f"hesplit {__version__} protocol {PROTOCOL_VERSION}"


def parallel_map(fn: Callable, items: Iterable, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class EpochStats:
    """Per-epoch protocol counters; each party fills its own side."""

    epoch: int
    wall_time: float = 0.0
    rotations: int = 0
    fwd_out_ciphertexts: int = 0
    boundary_grad_ciphertexts: int = 0
    refresh_rounds: Counter = field(default_factory=Counter)
    refreshed_ciphertexts: Counter = field(default_factory=Counter)
    bytes_sent: int = 0
    bytes_received: int = 0
    batches: int = 0
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def close(self, bytes_sent: int, bytes_received: int) -> None:
        self.wall_time = time.perf_counter() - self._t0
        self.bytes_sent, self.bytes_received = bytes_sent, bytes_received

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "wall_time": self.wall_time,
            "rotations": self.rotations,
            "fwd_out_ciphertexts": self.fwd_out_ciphertexts,
            "boundary_grad_ciphertexts": self.boundary_grad_ciphertexts,
            "refresh_rounds": {k: int(self.refresh_rounds.get(k, 0)) for k in REFRESH_PURPOSES},
            "refreshed_ciphertexts": {k: int(self.refreshed_ciphertexts.get(k, 0)) for k in REFRESH_PURPOSES},
            "bytes_sent": self.bytes_sent,
            "bytes_received": self.bytes_received,
            "batches": self.batches,
        }
