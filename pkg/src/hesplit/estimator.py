"""Split-point estimator: rotations, compute time, traffic and refreshes per epoch.

Two rotation counts are reported per candidate split ``n``:

* ``rotations``: the closed-form count ``sum_i (|l_i| |l_{i+1}| / (N/2)) log2 |l_{i+1}|``
  over the hidden server layers (``packing.count_rotations``), times samples,
  times passes (2 for ``n > 1``, the backward pass mirrors the forward one).
* ``rotations_executed``: the exact count of the slot layouts the protocol runs,
  which equals the server's instrumentation.

Compute time uses the executed operation counts and a microbenchmark profile.
Traffic follows ``|X| |l_n| / (N/2) * |c|`` with both the idealized ciphertext
size and the serialized one; feasibility uses the serialized size.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ckks
from .backend import CkksBackend
from .ckks import CryptoParams
from .constants import IDEALIZED_CIPHERTEXT_MB
from .packing import count_rotations
from .protocol.layouts import SegmentPlan, plan_segment

MB = float(1 << 20)
OPS = ("rot", "encode", "mulplain", "mulct", "add", "decrypt", "decode", "mulscalar", "encrypt")


# ---------------------------------------------------------------- microbenchmarks


@dataclass(frozen=True)
class MicrobenchProfile:
    """Seconds per operation (medians) for one parameter set on one machine."""

    t_rot: float
    t_encode: float
    t_mulplain: float
    t_mulct: float
    t_add: float
    t_decrypt: float
    t_decode: float
    t_mulscalar: float
    t_encrypt: float
    params_hash: str
    machine_id: str = ""
    reps: int = 0
    mad: dict = field(default_factory=dict)

    def __post_init__(self):
        for op in OPS:
            if not getattr(self, f"t_{op}") > 0:
                raise ValueError(f"t_{op} must be positive")

    @property
    def scalar_speedup(self) -> float:
        """``t_mulct / t_mulscalar`` (reported, not enforced)."""
        return self.t_mulct / self.t_mulscalar

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> MicrobenchProfile:
        return cls(**doc)

    @classmethod
    def constant(cls, seconds: float, params: CryptoParams, **overrides) -> MicrobenchProfile:
        """Every operation at ``seconds`` (tests and what-if reports)."""
        times = {f"t_{op}": seconds for op in OPS}
        times.update(overrides)
        return cls(**times, params_hash=params.digest(), machine_id="synthetic")


def machine_id() -> str:
    raw = "|".join([platform.node(), platform.machine(), platform.processor(), platform.python_version(),
                    str(os.cpu_count())])
    return hashlib.sha256(raw.encode()).hexdigest()[:16]


def run_microbench(params: CryptoParams, reps: int = 100, clock: Callable[[], float] = time.perf_counter,
                   seed: int = 0) -> MicrobenchProfile:
    """Median and MAD per operation over ``reps`` timed calls after one warm-up call."""
    if reps < 10:
        raise ValueError("reps must be >= 10")
    be = CkksBackend(params, seed)
    keys = be.keygen([1], seed=seed)
    rng = np.random.default_rng(seed)
    v = rng.uniform(-1, 1, params.slot_count)
    ct = be.encrypt(v, keys)
    pt = be.encode(v)
    dec = ckks.decrypt(ct, keys)
    calls = {
        "rot": lambda: be.rotate(ct, 1, keys),
        "encode": lambda: be.encode(v),
        "mulplain": lambda: be.mul_plain(ct, pt),
        "mulct": lambda: be.mul_ct(ct, ct, keys),
        "add": lambda: be.add(ct, ct),
        "decrypt": lambda: ckks.decrypt(ct, keys),
        "decode": lambda: ckks.decode(dec),
        "mulscalar": lambda: be.mul_scalar(ct, 0.5),
        "encrypt": lambda: be.encrypt(v, keys),
    }
    med, mad = {}, {}
    for op, fn in calls.items():
        fn()  # warm-up, excluded
        samples = np.empty(reps)
        for r in range(reps):
            t0 = clock()
            fn()
            samples[r] = clock() - t0
        med[op] = float(np.median(samples))
        mad[op] = float(np.median(np.abs(samples - med[op])))
    return MicrobenchProfile(**{f"t_{op}": med[op] for op in OPS}, params_hash=params.digest(),
                             machine_id=machine_id(), reps=reps, mad=mad)


def default_cache_dir() -> Path:
    return Path(os.environ.get("HESPLIT_CACHE", Path.home() / ".cache" / "hesplit")) / "profiles"


def profile_path(params_hash: str, machine: str, cache_dir: Path | None = None) -> Path:
    return Path(cache_dir or default_cache_dir()) / f"{params_hash[:16]}-{machine}.json"


def save_profile(profile: MicrobenchProfile, cache_dir: Path | None = None) -> Path:
    path = profile_path(profile.params_hash, profile.machine_id, cache_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(profile.to_dict(), indent=2, sort_keys=True))
    return path


def load_profile(params: CryptoParams, cache_dir: Path | None = None) -> MicrobenchProfile | None:
    path = profile_path(params.digest(), machine_id(), cache_dir)
    if not path.exists():
        return None
    return MicrobenchProfile.from_dict(json.loads(path.read_text()))


# ---------------------------------------------------------------- estimates


@dataclass(frozen=True)
class EstimateRequest:
    layer_sizes: tuple[int, ...]
    params: CryptoParams
    desired_time: float  # T_d for the whole run, seconds
    bandwidth: float  # bytes per second
    samples: int
    batch_size: int = 60
    epochs: int = 1
    degrees: tuple[int, ...] | int = 7  # activation degree per hidden server layer
    candidates: tuple[int, ...] | None = None
    comm_fraction: float = 0.5
    idealized_ct_mb: float = IDEALIZED_CIPHERTEXT_MB
    encrypt_data: bool = False
    packing: str = "auto"
    refresh_every: int | None = None

    def __post_init__(self):
        if self.desired_time <= 0 or self.bandwidth <= 0:
            raise ValueError("desired_time and bandwidth must be positive")
        if self.samples < 0 or self.batch_size < 1:
            raise ValueError("samples must be >= 0 and batch_size >= 1")
        if len(self.layer_sizes) < 3:
            raise ValueError("need at least two weight layers to split")

    @property
    def split_range(self) -> tuple[int, ...]:
        if self.candidates:
            return tuple(self.candidates)
        return tuple(range(1, len(self.layer_sizes) - 1))

    def degree(self, i: int) -> int:
        return self.degrees if isinstance(self.degrees, int) else self.degrees[i]

    @classmethod
    def from_config(cls, config, samples: int | None = None) -> EstimateRequest:
        m, p, e = config.model, config.protocol, config.estimator
        degs = m.activation_degree
        if not isinstance(degs, int):
            degs = tuple(int(d) for d in degs)
        return cls(
            layer_sizes=tuple(m.layer_sizes), params=config.crypto_params(), desired_time=e.desired_time,
            bandwidth=e.bandwidth, samples=int(e.samples if e.samples is not None else (samples or 0)),
            batch_size=p.batch_size, epochs=p.epochs, degrees=degs,
            candidates=tuple(e.candidates) if e.candidates else None, comm_fraction=e.comm_fraction,
            idealized_ct_mb=e.idealized_ct_mb, encrypt_data=p.encrypt_data, packing=p.packing,
            refresh_every=p.refresh_every,
        )


@dataclass
class SplitEstimate:
    split_index: int
    mode: str = ""
    rotations: float = 0.0  # closed form x samples x passes, per epoch
    rotations_executed: int = 0  # exact for the executed layouts, per epoch
    compute_seconds: float = 0.0  # per epoch
    setup_seconds: float = 0.0  # one-off weight encryption
    traffic_bytes: float = 0.0  # |X||l_n|/(N/2) x serialized |c|, per epoch
    traffic_mb_idealized: float = 0.0  # same with the idealized |c|
    protocol_bytes: float = 0.0  # every ciphertext the protocol moves, per epoch
    comm_seconds: float = 0.0  # per epoch
    refreshes: int = 0  # refresh round-trips per epoch
    depth: int = 0  # multiplicative depth of one server pass
    refresh_rule: bool = False  # depth exceeds the level budget
    total_seconds: float = 0.0  # epochs x (compute + comm) + setup
    feasible: bool = False
    note: str = ""


@dataclass
class EstimateReport:
    request: dict
    splits: list[SplitEstimate]
    recommendation: dict

    def to_dict(self) -> dict:
        return {"request": self.request, "splits": [asdict(s) for s in self.splits],
                "recommendation": self.recommendation}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        cols = [("n", "split_index", "{}"), ("mode", "mode", "{}"), ("rot(eq)", "rotations", "{:.6g}"),
                ("rot(exec)", "rotations_executed", "{}"), ("compute s", "compute_seconds", "{:.4g}"),
                ("traffic MB", "traffic_bytes", None), ("ideal MB", "traffic_mb_idealized", "{:.10g}"),
                ("comm s", "comm_seconds", "{:.4g}"), ("refresh", "refreshes", "{}"),
                ("total s", "total_seconds", "{:.4g}"), ("ok", "feasible", "{}")]
        rows = [[h for h, _, _ in cols]]
        for s in self.splits:
            row = []
            for _, key, fmt in cols:
                val = getattr(s, key)
                row.append(f"{val / MB:.6g}" if fmt is None else fmt.format(val))
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(cols))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
        rec = self.recommendation
        lines.append("")
        if rec.get("split_index") is None:
            lines.append("recommendation: none (no candidate meets the desired time)")
        else:
            lines.append(f"recommendation: n = {rec['split_index']}")
        lines.append(f"max last server layer: {rec.get('max_last_layer')} "
                     f"(idealized |c|: {rec.get('max_last_layer_idealized')})")
        return "\n".join(lines)


def serialized_ct_bytes(params: CryptoParams, level: int | None = None) -> int:
    """Bytes of one serialized ciphertext at ``level`` (default: one below the top)."""
    lvl = max(params.level_budget - 1, 0) if level is None else level
    return ckks.serialized_size(params, lvl)


def _batches(samples: int, b: int) -> list[int]:
    return [b] * (samples // b) + ([samples % b] if samples % b else [])


def _ops_per_batch(plan: SegmentPlan, b: int, req: EstimateRequest) -> dict[str, float]:
    """Homomorphic and client operations for one batch of ``b`` samples."""
    ops = dict.fromkeys(OPS, 0.0)
    ops["rot"] = sum(plan.rotations_per_batch(b).values())
    last = plan.last
    if plan.mode == "dense":
        g = -(-b // last.per_ct)
        prods = 2 * g * last.n_ct * last.per_ct
        ops.update(mulplain=prods, encode=prods, add=prods)
        ops["decrypt"] = ops["decode"] = ops["encrypt"] = g
        return ops
    if plan.mode == "scalar":
        ops["mulscalar"] = ops["add"] = 2 * b * last.n_ct
    elif plan.mode == "persample":
        ops["mulct"] = ops["add"] = 2 * b * last.n_ct
    else:
        per = 0.0
        for i, g in enumerate(plan.layers[:-1]):
            per += 2 * g.n_ct  # forward product and gradient
            per += 2 * req.degree(i) + 1  # activation and its derivative
            per += g.n_ct + 1 if i > 0 else 0  # back-propagation through the layer
        per += 3 * last.n_ct  # last layer: forward, gradient, back-propagation
        ops["mulct"] = per * b
        ops["add"] = per * b
        # refresh traffic on the client side: decrypt the sources, encrypt the layouts
        moved = sum(g.n_ct for g in plan.layers[:-1]) + plan.layers[-1].n_ct
        ops["decrypt"] = ops["decode"] = b * (1 + 2 * moved)
        ops["encrypt"] = ops["encode"] = b * (1 + 2 * moved)
        return ops
    ops["decrypt"] = ops["decode"] = ops["encrypt"] = b
    return ops


def refresh_rule(degrees: Sequence[int], n: int, level_budget: int) -> bool:
    """True when ``sum_i log2(d_i + 1) + n`` exceeds the level budget."""
    depth = sum(math.ceil(math.log2(d + 1)) for d in degrees) + n
    return depth > level_budget


def _depth(req: EstimateRequest, n: int) -> int:
    """Depth of one server pass: ``n`` products plus the hidden-layer activations."""
    return sum(math.ceil(math.log2(req.degree(i) + 1)) for i in range(n - 1)) + n


def estimate_split(req: EstimateRequest, profile: MicrobenchProfile, n: int) -> SplitEstimate:
    params = req.params
    slots = params.slot_count
    L = params.level_budget
    est = SplitEstimate(split_index=n)
    try:
        plan = plan_segment(req.layer_sizes, n, slots, req.encrypt_data, req.packing)
    except ValueError as exc:
        est.note = str(exc)
        return est
    est.mode = plan.mode
    passes = 2 if n > 1 else 1
    est.rotations = float(count_rotations(req.layer_sizes[:n], slots)) * req.samples * passes
    batches = _batches(req.samples, req.batch_size)
    totals = dict.fromkeys(OPS, 0.0)
    for b in batches:
        for op, c in _ops_per_batch(plan, b, req).items():
            totals[op] += c
    est.rotations_executed = int(totals["rot"])
    # refreshes: scheduled weight refreshes, plus per-batch layout gathers when the depth rule fires
    interval = (max(L - 1, 1) if req.refresh_every is None else req.refresh_every)
    weight_cts = sum(g.n_ct for g in plan.layers)
    scheduled = len(batches) // interval if interval else 0
    est.depth = _depth(req, n)
    est.refresh_rule = refresh_rule([req.degree(i) for i in range(n - 1)], n, L)
    per_batch = 2 * (n - 1) + (1 if est.refresh_rule else 0) if n > 1 else 0
    est.refreshes = scheduled + per_batch * len(batches)
    refreshed_cts = scheduled * weight_cts + (len(batches) * (weight_cts - plan.layers[0].n_ct)
                                               if est.refresh_rule else 0)
    totals["decrypt"] += refreshed_cts
    totals["decode"] += refreshed_cts
    totals["encrypt"] += refreshed_cts
    est.compute_seconds = sum(totals[op] * getattr(profile, f"t_{op}") for op in OPS)
    est.setup_seconds = weight_cts * profile.t_encrypt
    c_bytes = serialized_ct_bytes(params)
    ct_count = req.samples * req.layer_sizes[n] / slots
    est.traffic_bytes = ct_count * c_bytes
    est.traffic_mb_idealized = ct_count * req.idealized_ct_mb
    fwd = sum(plan.outputs_per_batch(b) for b in batches)
    top = ckks.serialized_size(params, L)
    moved = 2 * refreshed_cts * top
    if plan.mode == "deep":
        gathers = sum(g.n_ct for g in plan.layers[:-1]) + plan.last.n_ct
        moved += 2 * 2 * gathers * req.samples * top
    est.protocol_bytes = float(2 * fwd * c_bytes + moved)
    est.comm_seconds = est.traffic_bytes / req.bandwidth
    est.total_seconds = req.epochs * (est.compute_seconds + est.comm_seconds) + est.setup_seconds
    est.feasible = est.total_seconds <= req.desired_time
    return est


def max_last_layer(req: EstimateRequest, ct_bytes: float) -> int | None:
    """Largest ``|l_n|`` keeping communication under ``comm_fraction`` of the desired time."""
    if req.samples == 0:
        return None
    budget = req.comm_fraction * req.desired_time * req.bandwidth
    per_unit = req.epochs * req.samples * ct_bytes / req.params.slot_count
    return int(math.floor(budget / per_unit))


def recommend_split(req: EstimateRequest, profile: MicrobenchProfile,
                    splits: Sequence[SplitEstimate] | None = None) -> dict:
    """Deepest feasible split; among equal totals the smaller ``n`` wins.

    An empty recommendation (``split_index`` None) means no candidate meets the
    desired time.
    """
    splits = list(splits) if splits is not None else [estimate_split(req, profile, n) for n in req.split_range]
    feasible = [s for s in splits if s.feasible]
    rec: dict = {"split_index": None, "feasible": bool(feasible)}
    if feasible:
        deepest = max(feasible, key=lambda s: s.split_index)
        tied = [s for s in feasible if math.isclose(s.total_seconds, deepest.total_seconds, rel_tol=1e-12)]
        best = min(tied, key=lambda s: s.split_index)
        rec.update(split_index=best.split_index, mode=best.mode, rotations=best.rotations,
                   total_seconds=best.total_seconds)
    rec["max_last_layer"] = max_last_layer(req, serialized_ct_bytes(req.params))
    rec["max_last_layer_idealized"] = max_last_layer(req, req.idealized_ct_mb * MB)
    return rec


def estimate_epoch(req: EstimateRequest, profile: MicrobenchProfile) -> EstimateReport:
    if profile.params_hash != req.params.digest():
        raise ValueError("profile was measured for different crypto parameters")
    splits = [estimate_split(req, profile, n) for n in req.split_range]
    rec = recommend_split(req, profile, splits)
    request = {
        "layer_sizes": list(req.layer_sizes), "samples": req.samples, "batch_size": req.batch_size,
        "epochs": req.epochs, "desired_time": req.desired_time, "bandwidth": req.bandwidth,
        "slot_count": req.params.slot_count, "level_budget": req.params.level_budget,
        "serialized_ct_bytes": serialized_ct_bytes(req.params), "idealized_ct_mb": req.idealized_ct_mb,
        "passes_for_deep_splits": 2, "profile": profile.to_dict(),
    }
    return EstimateReport(request, splits, rec)
