"""Walk through the library: encrypted arithmetic, a packed product, a split run and an estimate.

Run with ``python demos/quickstart.py``; it takes a few seconds.
"""

from __future__ import annotations

import numpy as np

from hesplit.backend import CkksBackend
from hesplit.ckks import CryptoParams
from hesplit.config import default_config
from hesplit.data_io import synth
from hesplit.estimator import MB, EstimateRequest, MicrobenchProfile, estimate_epoch
from hesplit.neuralnet import evaluate, init_model, train_plain
from hesplit.packing import matmat_rotsum, pack_columns_rotsum
from hesplit.protocol import run_local


def main() -> None:
    params = CryptoParams.toy()
    be = CkksBackend(params, seed=0)
    keys = be.keygen([1, 2, 4], seed=1)

    # encrypted slotwise arithmetic
    a = np.array([0.5, -0.25, 1.0])
    ct = be.encrypt(a, keys)
    print("a * a     :", np.round(be.decrypt(be.mul_ct(ct, ct, keys), keys)[:3], 5))
    print("rotate(a) :", np.round(be.decrypt(be.rotate(ct, 1, keys), keys)[:3], 5))

    # rotate-and-sum product of a 3x3 matrix with an encrypted 3x5 matrix
    A = np.arange(1.0, 10.0).reshape(3, 3) / 10
    B = np.arange(1.0, 16.0).reshape(3, 5) / 10
    res = matmat_rotsum(A, pack_columns_rotsum(B, be, keys), be, keys)
    got = res.extract([be.decrypt(c, keys) for c in res.ciphertexts])
    print(f"A @ B max error {np.abs(got - A @ B).max():.2e} using {res.rotations} rotations")

    # split training against the plaintext trainer, zero-noise simulator
    cfg = default_config(
        model={"layer_sizes": [8, 16, 2], "split_index": 1},
        crypto={"backend": "noise-sim", "params": "toy", "noise_stddev": 0.0, "precision_bits": 52},
        protocol={"epochs": 10, "batch_size": 20, "learning_rate": 4.0},
    )
    ds = synth(200, 8, 2, seed=0)
    run = run_local(cfg, ds)
    init = init_model(cfg.model.layer_sizes, cfg.activations(), seed=cfg.model.init_seed)
    ref, _ = train_plain(init, ds.features, ds.labels, epochs=10, batch_size=20, lr=4.0)
    gap = max(float(np.abs(x - y).max()) for x, y in zip(run.model.weights, ref.weights))
    print(f"split vs monolith weight gap {gap:.1e}, accuracy {evaluate(run.model, ds.features, ds.labels).accuracy:.3f}")

    # estimator for the 784x128x32x10 network on 10000 samples
    set2 = CryptoParams.set2()
    req = EstimateRequest((784, 128, 32, 10), set2, desired_time=3600.0, bandwidth=MB, samples=10000)
    print(estimate_epoch(req, MicrobenchProfile.constant(1e-3, set2)).to_table())


if __name__ == "__main__":
    main()
