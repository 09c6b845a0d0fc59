"""Versioned numeric constants shared across modules."""

from __future__ import annotations

CONSTANTS_VERSION = 1

# Simulator: per-multiplication Gaussian noise is 2**(-scale_log + 4). Measured
# real-scheme error after one multiplication at scale 2**30 is ~1e-5 max over
# 4096 slots (stddev ~2e-6), so this default is optimistic by roughly 2**5.
SIM_NOISE_LOG2_OFFSET = 4
SIM_DEFAULT_PRECISION_BITS = 30

# Packing chooser: scalar packing when (N/2) / |l_2| is strictly below this.
PACKING_RATIO_THRESHOLD = 2.7

# Idealized ciphertext size used in the reference traffic figure for N = 2**13, in megabytes.
IDEALIZED_CIPHERTEXT_MB = 0.0078125


def sim_default_stddev(scale_log: int) -> float:
    return 2.0 ** (-scale_log + SIM_NOISE_LOG2_OFFSET)
