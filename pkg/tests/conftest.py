from __future__ import annotations

import numpy as np
import pytest

from hesplit.backend import CkksBackend, NoiseModel, NoiseSimBackend
from hesplit.ckks import CryptoParams


@pytest.fixture(scope="session")
def toy_params() -> CryptoParams:
    return CryptoParams.toy()


@pytest.fixture(scope="session")
def set2_params() -> CryptoParams:
    return CryptoParams.set2()


@pytest.fixture(scope="session")
def toy_ckks(toy_params):
    """Real CKKS on a 2**10 ring with power-of-two rotation keys."""
    be = CkksBackend(toy_params, seed=11)
    keys = be.keygen([1 << i for i in range(9)], seed=12)
    return be, keys


@pytest.fixture
def exact_sim(toy_params):
    """Zero-noise simulator: an exact float64 oracle for layout logic."""
    be = NoiseSimBackend(toy_params, NoiseModel(0.0, 52), seed=0)
    return be, be.keygen([1 << i for i in range(9)])


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(k, ok, detail)`` records one pass/fail line, prints it, then asserts."""

    def report(k: int, ok: bool, detail: str) -> None:
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
