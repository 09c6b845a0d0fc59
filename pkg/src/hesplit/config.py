"""Run configuration: one JSON document with sections model, crypto, protocol,
data and estimator.

Both protocol parties hash the canonical encoding of the sections that must
agree (everything except ``estimator``) and compare digests in the handshake.
"""

from __future__ import annotations

import copy
import functools
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .ckks import CryptoParams
from .constants import SIM_DEFAULT_PRECISION_BITS, sim_default_stddev
from .neuralnet import PolyApprox, chebyshev_fit

PARAM_SETS = {"set1": CryptoParams.set1, "set2": CryptoParams.set2}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class ModelSection:
    layer_sizes: tuple[int, ...] = (9, 128, 32, 2)
    split_index: int = 1
    # per hidden server layer (layers 1..n-1); an int applies to all of them
    activation_degree: Any = 7
    activation_interval: tuple[float, float] = (-15.0, 15.0)
    loss: str = "mse"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(v) for v in self.layer_sizes))
        object.__setattr__(self, "activation_interval", tuple(float(v) for v in self.activation_interval))
        if len(self.layer_sizes) < 3:
            raise ConfigError("need at least one server and one client layer (3 sizes)")
        if any(v < 1 for v in self.layer_sizes):
            raise ConfigError("layer sizes must be >= 1")
        layers = len(self.layer_sizes) - 1
        if not 1 <= self.split_index < layers:
            raise ConfigError(f"split_index must lie in [1, {layers - 1}], got {self.split_index}")
        if self.loss not in ("mse", "cross_entropy"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        lo, hi = self.activation_interval
        if lo >= hi:
            raise ConfigError("activation interval must have lo < hi")
        for d in self.degrees:
            if d < 1:
                raise ConfigError("activation degree must be >= 1")

    @property
    def degrees(self) -> tuple[int, ...]:
        """Polynomial degree of each encrypted hidden layer (length n - 1)."""
        hidden = self.split_index - 1
        d = self.activation_degree
        if isinstance(d, (list, tuple)):
            if len(d) != hidden:
                raise ConfigError(f"{len(d)} activation degrees for {hidden} hidden server layers")
            return tuple(int(v) for v in d)
        return (int(d),) * hidden


@dataclass(frozen=True)
class CryptoSection:
    backend: str = "ckks"
    params: Any = "set2"
    noise_stddev: float | None = None  # simulator only; None means the calibrated default
    precision_bits: int = SIM_DEFAULT_PRECISION_BITS
    seed: int = 0

    def __post_init__(self):
        if self.backend.replace("_", "-") not in ("ckks", "noise-sim"):
            raise ConfigError(f"unknown backend {self.backend!r}")

    def crypto_params(self) -> CryptoParams:
        p = self.params
        if isinstance(p, str):
            if p == "toy":
                return CryptoParams.toy()
            if p not in PARAM_SETS:
                raise ConfigError(f"unknown parameter set {p!r}")
            return PARAM_SETS[p]()
        return CryptoParams(
            ring_size_log=int(p["ring_size_log"]), logqp=int(p["logqp"]),
            scale_log=int(p.get("scale_log", 30)), name=p.get("name", "custom"),
        )

    def noise(self, params: CryptoParams) -> tuple[float, int]:
        std = sim_default_stddev(params.scale_log) if self.noise_stddev is None else float(self.noise_stddev)
        return std, int(self.precision_bits)


@dataclass(frozen=True)
class ProtocolSection:
    epochs: int = 10
    batch_size: int = 60
    learning_rate: float = 2.0
    encrypt_data: bool = False
    refresh_every: int | None = None  # None means L - 1 updates; 0 disables
    max_refreshes_per_epoch: int = 100_000
    shuffle: bool = True
    seed: int = 0
    packing: str = "auto"  # auto | batch | scalar
    gradient_mode: str = "boundary_delta"  # or client_literal (n = 1, plaintext X only)
    timeout: float = 600.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.packing not in ("auto", "batch", "scalar"):
            raise ConfigError(f"unknown packing {self.packing!r}")
        if self.gradient_mode not in ("boundary_delta", "client_literal"):
            raise ConfigError(f"unknown gradient_mode {self.gradient_mode!r}")
        if self.refresh_every is not None and self.refresh_every < 0:
            raise ConfigError("refresh_every must be >= 0")


@dataclass(frozen=True)
class EstimatorSection:
    desired_time: float = 3600.0
    bandwidth: float = 1048576.0  # bytes per second (1 MB/s, MB = 2**20 bytes)
    comm_fraction: float = 0.5
    samples: int | None = None  # None means the dataset size
    idealized_ct_mb: float = 0.0078125
    candidates: tuple[int, ...] | None = None
    reps: int = 100

    def __post_init__(self):
        if self.desired_time <= 0 or self.bandwidth <= 0:
            raise ConfigError("desired_time and bandwidth must be positive")


_SECTIONS = {
    "model": ModelSection, "crypto": CryptoSection, "protocol": ProtocolSection, "estimator": EstimatorSection,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    crypto: CryptoSection = field(default_factory=CryptoSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    data: dict = field(default_factory=lambda: {"kind": "bcw"})
    estimator: EstimatorSection = field(default_factory=EstimatorSection)

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        unknown = set(doc) - set(_SECTIONS) - {"data"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for name, section in _SECTIONS.items():
            body = dict(doc.get(name, {}))
            known = {f.name for f in fields(section)}
            extra = set(body) - known
            if extra:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
            try:
                kwargs[name] = section(**body)
            except TypeError as exc:
                raise ConfigError(f"[{name}]: {exc}") from None
        kwargs["data"] = dict(doc.get("data", {"kind": "bcw"}))
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        out["data"] = copy.deepcopy(self.data)
        return json.loads(json.dumps(out))  # tuples -> lists

    def with_overrides(self, overrides: dict[str, Any]) -> RunConfig:
        """Apply ``{"section.key": value}`` overrides; ``None`` values are skipped."""
        doc = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            section, _, name = key.partition(".")
            if section in doc and not name and isinstance(value, dict):
                doc[section] = value if section == "data" else {**doc[section], **value}
                continue
            if section not in doc or not name:
                raise ConfigError(f"bad override key {key!r}")
            doc[section][name] = value
        return RunConfig.from_dict(doc)

    def canonical_bytes(self) -> bytes:
        doc = self.to_dict()
        doc.pop("estimator")
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> bytes:
        """32-byte SHA-256 of the canonical encoding (handshake check)."""
        return hashlib.sha256(self.canonical_bytes()).digest()

    # ------------------------------------------------------------ derived objects

    def crypto_params(self) -> CryptoParams:
        return self.crypto.crypto_params()

    def poly_activations(self) -> list[PolyApprox]:
        lo, hi = self.model.activation_interval
        return [_sigmoid_fit(d, float(lo), float(hi)) for d in self.model.degrees]

    def activations(self) -> list:
        """Per-layer activations: polynomials on hidden server layers, sigmoid elsewhere."""
        layers = len(self.model.layer_sizes) - 1
        return self.poly_activations() + ["sigmoid"] * (layers - self.model.split_index + 1)


@functools.lru_cache(maxsize=32)
def _sigmoid_fit(degree: int, lo: float, hi: float) -> PolyApprox:
    return chebyshev_fit("sigmoid", degree, (lo, hi))


def default_config(**sections) -> RunConfig:
    return RunConfig.from_dict(sections)
