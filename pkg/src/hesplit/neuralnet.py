"""Fully connected networks in plaintext, plus polynomial activations.

Weights of layer ``l`` are stored as one ``(out, in + 1)`` matrix whose last
column is the bias, applied against a constant-1 feature appended to every
input. The encrypted path uses the same convention, so the bias is packed with
the weights instead of needing its own encrypted addition.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
from numpy.polynomial import Chebyshev, Polynomial

TARGETS: dict[str, Callable[[np.ndarray], np.ndarray]] = {}


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


TARGETS["sigmoid"] = sigmoid


# ---------------------------------------------------------------- polynomial activations


@dataclass(frozen=True)
class PolyApprox:
    """Polynomial stand-in for an activation, monomial coefficients in ``x``."""

    coefficients: tuple[float, ...]
    interval: tuple[float, float]
    target: str = "sigmoid"
    error_bound: float = float("nan")
    basis: str = "monomial"

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    @property
    def levels_consumed(self) -> int:
        return math.ceil(math.log2(self.degree + 1))

    def __call__(self, x):
        return np.polynomial.polynomial.polyval(np.asarray(x, dtype=np.float64), self.coefficients)

    def rescaled(self, input_scale: float) -> PolyApprox:
        """Same function of ``x`` expressed in ``u = x / input_scale``."""
        h = float(input_scale)
        coeffs = tuple(float(c) * h**k for k, c in enumerate(self.coefficients))
        lo, hi = self.interval
        return PolyApprox(coeffs, (lo / h, hi / h), self.target, self.error_bound, self.basis)

    def derivative(self) -> PolyApprox:
        d = np.polynomial.polynomial.polyder(self.coefficients) if self.degree else np.zeros(1)
        return PolyApprox(tuple(float(c) for c in d), self.interval, f"d/dx {self.target}")


def chebyshev_fit(target: str, degree: int, interval: tuple[float, float], grid: int = 100_000) -> PolyApprox:
    """Chebyshev interpolant of ``target`` on ``interval``, converted to monomials.

    The stored error bound is the max deviation on a uniform grid of ``grid``
    points.
    """
    if degree < 1:
        raise ValueError("degree must be >= 1")
    lo, hi = (float(v) for v in interval)
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
        raise ValueError(f"degenerate interval [{lo}, {hi}]")
    f = TARGETS[target]
    cheb = Chebyshev.interpolate(f, degree, domain=[lo, hi])
    mono = cheb.convert(kind=Polynomial, domain=[lo, hi], window=[lo, hi])
    c = np.zeros(degree + 1)
    c[: mono.coef.size] = mono.coef
    # drop round-off terms (e.g. even powers of an odd function), judged on [-1, 1]
    h = max(abs(lo), abs(hi))
    normalised = np.abs(c * h ** np.arange(degree + 1))
    c[normalised < 1e-12 * normalised.max()] = 0.0
    coeffs = tuple(float(v) for v in c)
    xs = np.linspace(lo, hi, grid)
    err = float(np.max(np.abs(np.polynomial.polynomial.polyval(xs, coeffs) - f(xs))))
    return PolyApprox(coeffs, (lo, hi), target, err)


def _power_table(ct, top: int, backend, keys) -> dict[int, object]:
    """x^(2^j) for 2^j <= top by repeated squaring; x^(2^j) sits j levels down."""
    powers = {1: ct}
    p = 1
    while 2 * p <= top:
        powers[2 * p] = backend.mul_ct(powers[p], powers[p], keys)
        p *= 2
    return powers


def _eval_rec(coeffs: np.ndarray, depth: int, powers, backend, keys):
    """Evaluate a degree < 2**depth polynomial using exactly ``depth`` levels.

    Returns a ciphertext or ``None`` when every non-constant coefficient is
    zero (the constant is added by the caller).
    """
    if depth == 1:
        if coeffs.size < 2 or coeffs[1] == 0.0:
            return None
        return backend.mul_scalar(powers[1], coeffs[1])
    half = 1 << (depth - 1)
    lo, hi = coeffs[:half], coeffs[half:]
    lo_ct = _eval_rec(lo, depth - 1, powers, backend, keys)
    out = None
    if np.any(hi != 0.0):
        hi_ct = _eval_rec(hi, depth - 1, powers, backend, keys)
        giant = powers[half]
        if hi_ct is None:
            # hi is a constant: scale the giant-step power instead
            out = backend.mul_scalar(giant, hi[0])
            out = backend.level_drop(out, backend.level(giant) - 1)
        else:
            hi_ct = backend.add_plain(hi_ct, _const(backend, hi_ct, hi[0])) if hi[0] != 0.0 else hi_ct
            a, b = backend.align(giant, hi_ct)
            out = backend.mul_ct(a, b, keys)
    if lo_ct is not None:
        if out is None:
            return backend.level_drop(lo_ct, backend.level(lo_ct) - 1)
        lo_ct = backend.level_drop(lo_ct, backend.level(out))
        out = backend.add(out, lo_ct)
    return out


def _const(backend, like, value: float):
    return np.full(backend.slot_count, float(value))


def eval_poly_encrypted(ct, p: PolyApprox, backend, keys, input_scale: float = 1.0):
    """Slotwise ``p(x)`` under encryption, consuming ``p.levels_consumed`` levels.

    ``ct`` encrypts ``x / input_scale``. Choosing ``input_scale`` so the encrypted
    values lie in [-1, 1] matters for accuracy: every product adds an absolute
    error near the scheme's noise floor, and evaluating on raw ``x`` multiplies
    the error of small high-order terms by ``|x|**(d - 1)``. Scaling is free when
    the party that encrypts ``x`` applies it, whereas a homomorphic rescaling
    would cost a level.
    """
    if input_scale != 1.0:
        p = p.rescaled(input_scale)
    need = p.levels_consumed
    lvl = backend.level(ct)
    if lvl < need:
        raise ValueError(f"polynomial of degree {p.degree} needs {need} levels, ciphertext has {lvl}")
    coeffs = np.asarray(p.coefficients, dtype=np.float64)
    if need == 0:
        return backend.add_plain(backend.sub(ct, ct), _const(backend, ct, coeffs[0]))
    powers = _power_table(ct, 1 << (need - 1), backend, keys)
    out = _eval_rec(coeffs, need, powers, backend, keys)
    if out is None:
        out = backend.level_drop(backend.sub(ct, ct), lvl - need)
    out = backend.level_drop(out, lvl - need)
    if coeffs[0] != 0.0:
        out = backend.add_plain(out, _const(backend, out, coeffs[0]))
    return out


# ---------------------------------------------------------------- model

Activation = Union[str, PolyApprox]


def activate(act: Activation, z: np.ndarray) -> np.ndarray:
    if isinstance(act, PolyApprox):
        return act(z)
    if act == "sigmoid":
        return sigmoid(z)
    if act == "identity":
        return z
    raise ValueError(f"unknown activation {act!r}")


def activation_grad(act: Activation, z: np.ndarray) -> np.ndarray:
    if isinstance(act, PolyApprox):
        return act.derivative()(z)
    if act == "sigmoid":
        s = sigmoid(z)
        return s * (1.0 - s)
    if act == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {act!r}")


@dataclass(frozen=True)
class LayerSpec:
    in_size: int
    out_size: int
    activation: Activation = "sigmoid"

    def __post_init__(self):
        if self.in_size < 1 or self.out_size < 1:
            raise ValueError("layer sizes must be >= 1")


@dataclass(frozen=True, eq=False)
class Model:
    """Layer specs and augmented weight matrices ``(out, in + 1)``."""

    layers: tuple[LayerSpec, ...]
    weights: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.layers) != len(self.weights):
            raise ValueError("one weight matrix per layer required")
        for i, (spec, w) in enumerate(zip(self.layers, self.weights)):
            if w.shape != (spec.out_size, spec.in_size + 1):
                raise ValueError(f"layer {i}: weight shape {w.shape} != {(spec.out_size, spec.in_size + 1)}")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.out_size != b.in_size:
                raise ValueError("adjacent layer sizes are incompatible")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.layers[0].in_size] + [s.out_size for s in self.layers]

    def W(self, l: int) -> np.ndarray:
        return self.weights[l][:, :-1]

    def b(self, l: int) -> np.ndarray:
        return self.weights[l][:, -1]

    def segment(self, start: int, stop: int | None = None) -> Model:
        return Model(self.layers[start:stop], self.weights[start:stop])


def build_layers(layer_sizes: Sequence[int], activations: Sequence[Activation] | Activation = "sigmoid") -> tuple[LayerSpec, ...]:
    n = len(layer_sizes) - 1
    if n < 1:
        raise ValueError("need at least one layer")
    acts = [activations] * n if isinstance(activations, (str, PolyApprox)) else list(activations)
    if len(acts) != n:
        raise ValueError(f"{len(acts)} activations for {n} layers")
    return tuple(LayerSpec(a, b, act) for a, b, act in zip(layer_sizes[:-1], layer_sizes[1:], acts))


def init_model(layer_sizes: Sequence[int], activations: Sequence[Activation] | Activation = "sigmoid", seed=0) -> Model:
    """Uniform weights and biases in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
    layers = build_layers(layer_sizes, activations)
    rng = np.random.default_rng(seed)
    weights = []
    for spec in layers:
        bound = 1.0 / math.sqrt(spec.in_size)
        weights.append(rng.uniform(-bound, bound, (spec.out_size, spec.in_size + 1)))
    return Model(layers, tuple(weights))


def augment(X: np.ndarray) -> np.ndarray:
    """Append the constant-1 bias feature."""
    X = np.atleast_2d(X)
    return np.hstack([X, np.ones((X.shape[0], 1))])


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # augmented layer inputs
    pre: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)

    @property
    def prediction(self) -> np.ndarray:
        return self.outputs[-1]


def forward(model: Model, X: np.ndarray) -> ForwardCache:
    """Forward pass through every layer of ``model`` (use ``segment`` for ranges)."""
    cache = ForwardCache()
    o = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if o.shape[1] != model.layers[0].in_size:
        raise ValueError(f"input width {o.shape[1]} != {model.layers[0].in_size}")
    for spec, w in zip(model.layers, model.weights):
        x = augment(o)
        z = x @ w.T
        o = activate(spec.activation, z)
        cache.inputs.append(x)
        cache.pre.append(z)
        cache.outputs.append(o)
    return cache


# ---------------------------------------------------------------- losses


def mse_loss(pred: np.ndarray, Y: np.ndarray) -> tuple[float, np.ndarray]:
    """``(1/b) * sum (pred - y)^2`` and its gradient with respect to ``pred``."""
    b = pred.shape[0]
    diff = pred - Y
    return float(np.sum(diff * diff) / b), 2.0 * diff / b


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, Y: np.ndarray) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy on logits; gradient with respect to the logits."""
    b = logits.shape[0]
    p = softmax(logits)
    loss = -float(np.sum(Y * np.log(np.clip(p, 1e-300, None))) / b)
    return loss, (p - Y) / b


LOSSES = {"mse": mse_loss, "cross_entropy": cross_entropy_loss}


def accuracy(pred: np.ndarray, Y: np.ndarray) -> float:
    return float(np.mean(np.argmax(pred, axis=1) == np.argmax(Y, axis=1)))


# ---------------------------------------------------------------- backward / update


@dataclass
class Gradients:
    weights: list[np.ndarray]
    input_grad: np.ndarray  # dJ/d(input of the first layer)
    boundary_delta: np.ndarray  # dJ/dZ of the first layer


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise FloatingPointError(f"non-finite values in {name}: {bad} of {arr.size} entries")


def backward_from(model: Model, cache: ForwardCache, out_grad: np.ndarray, loss: str = "mse") -> Gradients:
    """Backpropagate ``dJ/d(output)`` (or dJ/d(logits) for cross-entropy)."""
    grads: list[np.ndarray] = [None] * len(model.layers)  # type: ignore[list-item]
    g = out_grad
    delta = None
    for l in range(len(model.layers) - 1, -1, -1):
        spec = model.layers[l]
        z = cache.pre[l]
        if l == len(model.layers) - 1 and loss == "cross_entropy":
            delta = g
        else:
            delta = g * activation_grad(spec.activation, z)
        grads[l] = delta.T @ cache.inputs[l]
        _check_finite(f"gradient of layer {l}", grads[l])
        g = delta @ model.weights[l][:, :-1]
    return Gradients(grads, g, delta)


def loss_input(cache: ForwardCache, loss: str) -> np.ndarray:
    """What the loss sees: the prediction for MSE, the last pre-activation (logits) for cross-entropy."""
    return cache.pre[-1] if loss == "cross_entropy" else cache.prediction


def backward(model: Model, cache: ForwardCache, Y: np.ndarray, loss: str = "mse") -> tuple[float, Gradients]:
    value, dpred = LOSSES[loss](loss_input(cache, loss), Y)
    if not math.isfinite(value):
        raise FloatingPointError(f"loss is {value}")
    return value, backward_from(model, cache, dpred, loss)


def sgd_update(model: Model, grads: Sequence[np.ndarray], lr: float) -> Model:
    if len(grads) != len(model.weights):
        raise ValueError("gradient count does not match layer count")
    new = []
    for i, (w, g) in enumerate(zip(model.weights, grads)):
        if g.shape != w.shape:
            raise ValueError(f"layer {i}: gradient shape {g.shape} != weight shape {w.shape}")
        new.append(w - lr * g)
        _check_finite(f"weights of layer {i}", new[-1])
    return replace(model, weights=tuple(new))


# ---------------------------------------------------------------- plaintext trainer


def batch_order(n_samples: int, batch_size: int, epoch: int, seed: int, shuffle: bool = True) -> list[np.ndarray]:
    """Sample indices per batch; shared by the split protocol and the monolith."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    idx = np.arange(n_samples)
    if shuffle:
        idx = np.random.default_rng([seed, epoch]).permutation(n_samples)
    return [idx[i:i + batch_size] for i in range(0, n_samples, batch_size)]


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float


def train_plain(
    model: Model, X: np.ndarray, Y: np.ndarray, epochs: int, batch_size: int, lr: float,
    loss: str = "mse", seed: int = 0, shuffle: bool = True,
) -> tuple[Model, list[EpochMetrics]]:
    """Monolithic mini-batch gradient descent; accuracy is the running epoch figure."""
    history = []
    for e in range(epochs):
        total, correct = 0.0, 0
        for idx in batch_order(X.shape[0], batch_size, e, seed, shuffle):
            cache = forward(model, X[idx])
            value, g = backward(model, cache, Y[idx], loss)
            total += value * len(idx)
            correct += int(np.sum(np.argmax(cache.prediction, 1) == np.argmax(Y[idx], 1)))
            model = sgd_update(model, g.weights, lr)
        history.append(EpochMetrics(e, total / X.shape[0], correct / X.shape[0]))
    return model, history


def evaluate(model: Model, X: np.ndarray, Y: np.ndarray, loss: str = "mse") -> EpochMetrics:
    cache = forward(model, X)
    return EpochMetrics(-1, LOSSES[loss](loss_input(cache, loss), Y)[0], accuracy(cache.prediction, Y))


# ---------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"HSCK"
_CKPT_VERSION = 1


def save_checkpoint(path, weights: Sequence[np.ndarray], config_hash: bytes = b"") -> None:
    """Versioned binary: magic, u16 version, u16 layer count, 32-byte config hash,
    then per layer u32 rows, u32 cols and float64 little-endian row-major data."""
    digest = (config_hash or b"").ljust(32, b"\0")[:32]
    parts = [_CKPT_MAGIC, struct.pack("<HH", _CKPT_VERSION, len(weights)), digest]
    for w in weights:
        w = np.asarray(w, dtype="<f8")
        parts.append(struct.pack("<II", *w.shape))
        parts.append(w.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[list[np.ndarray], bytes]:
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, count = struct.unpack_from("<HH", data, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    digest = data[8:40]
    off = 40
    weights = []
    for _ in range(count):
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        n = rows * cols * 8
        if off + n > len(data):
            raise ValueError(f"truncated checkpoint at byte {off}")
        weights.append(np.frombuffer(data, "<f8", rows * cols, off).reshape(rows, cols).astype(np.float64))
        off += n
    return weights, digest


def config_digest(canonical: bytes) -> bytes:
    return hashlib.sha256(canonical).digest()
