"""Shared test oracles."""

from __future__ import annotations

import numpy as np

from hesplit.neuralnet import LOSSES, Model, backward, forward, loss_input


def numeric_gradients(model: Model, X, Y, loss: str = "mse", eps: float = 1e-6) -> list[np.ndarray]:
    """Central finite differences of the batch loss with respect to every weight."""
    out = []
    for l, w in enumerate(model.weights):
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            vals = []
            for sign in (1.0, -1.0):
                ws = [v.copy() for v in model.weights]
                ws[l][idx] += sign * eps
                cache = forward(Model(model.layers, tuple(ws)), X)
                vals.append(LOSSES[loss](loss_input(cache, loss), Y)[0])
            g[idx] = (vals[0] - vals[1]) / (2 * eps)
        out.append(g)
    return out


def gradient_check(model: Model, X, Y, loss: str = "mse", points: int = 10, seed: int = 0) -> float:
    """Worst relative error between analytic and numeric gradients over ``points`` random weight draws."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        ws = tuple(rng.uniform(-1, 1, w.shape) for w in model.weights)
        m = Model(model.layers, ws)
        _, g = backward(m, forward(m, X), Y, loss)
        num = numeric_gradients(m, X, Y, loss)
        for a, n in zip(g.weights, num):
            scale = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
            worst = max(worst, float(np.abs(a - n).max() / scale))
    return worst


def zero_noise_config(layer_sizes, split_index=1, **protocol):
    """Toy-ring simulator config with no noise and no quantization."""
    from hesplit.config import default_config

    proto = {"epochs": 2, "batch_size": 16, "learning_rate": 2.0, **protocol}
    return default_config(
        model={"layer_sizes": list(layer_sizes), "split_index": split_index, "activation_degree": 3},
        crypto={"backend": "noise-sim", "params": "toy", "noise_stddev": 0.0, "precision_bits": 52},
        protocol=proto,
    )


def plain_reference(config, dataset):
    """The monolithic trainer run with the same initial weights and batch order as the protocol."""
    from hesplit.neuralnet import init_model, train_plain

    m, p = config.model, config.protocol
    model = init_model(m.layer_sizes, config.activations(), seed=m.init_seed)
    return train_plain(model, dataset.features, dataset.labels, p.epochs, p.batch_size, p.learning_rate,
                       m.loss, p.seed, p.shuffle)


def max_weight_gap(a, b) -> float:
    return max(float(np.abs(x - y).max()) for x, y in zip(a.weights, b.weights))
