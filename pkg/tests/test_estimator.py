from __future__ import annotations

import json

import pytest

from hesplit.ckks import CryptoParams
from hesplit.data_io import synth
from hesplit.estimator import (
    MB, EstimateRequest, MicrobenchProfile, SplitEstimate, estimate_epoch, estimate_split, load_profile,
    max_last_layer, recommend_split, refresh_rule, run_microbench, save_profile, serialized_ct_bytes,
)
from hesplit.protocol import run_local

from .oracles import zero_noise_config

SET2 = CryptoParams.set2()
MODEL1 = (784, 128, 32, 10)
MODEL2 = (784, 128, 128, 128, 128, 128, 128, 32, 10)


def _req(**kw):
    base = dict(layer_sizes=MODEL1, params=SET2, desired_time=3600.0, bandwidth=MB, samples=10000)
    base.update(kw)
    return EstimateRequest(**base)


def test_model1_traffic_reproduces_the_reference_figure():
    est = estimate_split(_req(), MicrobenchProfile.constant(1e-3, SET2), 1)
    assert est.traffic_mb_idealized == 2.44140625
    assert est.traffic_bytes == 10000 * 128 / 4096 * serialized_ct_bytes(SET2)
    assert est.comm_seconds == est.traffic_bytes / MB
    assert est.rotations == 0 and est.mode == "dense"


def test_empty_dataset_costs_nothing():
    est = estimate_split(_req(samples=0), MicrobenchProfile.constant(1e-3, SET2), 1)
    assert est.traffic_bytes == 0 and est.compute_seconds == 0 and est.rotations == 0
    assert est.total_seconds == est.setup_seconds
    assert max_last_layer(_req(samples=0), 1.0) is None


def test_constant_profile_gives_operation_count_times_constant():
    one = estimate_split(_req(layer_sizes=MODEL2), MicrobenchProfile.constant(1.0, SET2), 3)
    two = estimate_split(_req(layer_sizes=MODEL2), MicrobenchProfile.constant(2.0, SET2), 3)
    assert two.compute_seconds == 2 * one.compute_seconds
    assert two.setup_seconds == 2 * one.setup_seconds


def test_microbench_with_a_fake_clock(tmp_path):
    ticks = iter(range(10**6))
    toy = CryptoParams.toy()
    prof = run_microbench(toy, reps=10, clock=lambda: float(next(ticks)))
    assert all(getattr(prof, f"t_{op}") == 1.0 for op in ("rot", "mulct", "encrypt"))
    assert prof.mad["rot"] == 0.0 and prof.reps == 10
    with pytest.raises(ValueError):
        run_microbench(toy, reps=9)
    path = save_profile(prof, tmp_path)
    assert json.loads(path.read_text())["params_hash"] == toy.digest()
    assert load_profile(toy, tmp_path) == prof
    assert load_profile(CryptoParams.toy(levels=3), tmp_path) is None


def test_profile_must_match_the_parameters():
    with pytest.raises(ValueError):
        estimate_epoch(_req(), MicrobenchProfile.constant(1e-3, CryptoParams.toy()))
    with pytest.raises(ValueError):
        MicrobenchProfile.constant(0.0, SET2)


def test_refresh_rule():
    assert refresh_rule([7, 7, 7], 3, 4)
    assert not refresh_rule([], 1, 4)
    assert not refresh_rule([3], 2, 4)  # 2 + 2 = 4 fits exactly
    assert refresh_rule([3], 2, 3)


def test_compute_is_monotone_in_the_split_index():
    report = estimate_epoch(_req(layer_sizes=MODEL2), MicrobenchProfile.constant(1e-3, SET2))
    compute = [s.compute_seconds for s in report.splits]
    assert [s.split_index for s in report.splits] == list(range(1, 8))
    assert all(a <= b for a, b in zip(compute, compute[1:]))
    assert "recommendation" in report.to_table()
    assert json.loads(report.to_json())["splits"][0]["split_index"] == 1


@pytest.mark.parametrize("sizes,n", [((8, 6, 2), 1), ((8, 6, 5, 2), 2), ((8, 6, 5, 4, 2), 3)])
def test_executed_rotations_match_a_live_run(sizes, n):
    cfg = zero_noise_config(sizes, n, epochs=1)
    run = run_local(cfg, synth(40, 8, 2, 1))
    req = EstimateRequest.from_config(cfg, samples=40)
    est = estimate_split(req, MicrobenchProfile.constant(1e-3, cfg.crypto_params()), n)
    assert est.rotations_executed == run.server.stats[0].rotations


def test_recommendation_rules():
    prof = MicrobenchProfile.constant(1e-6, SET2)
    assert recommend_split(_req(layer_sizes=MODEL2, desired_time=1e9), prof)["split_index"] == 7
    slow = MicrobenchProfile.constant(1e-3, SET2)
    splits = [estimate_split(_req(layer_sizes=MODEL2), slow, n) for n in range(1, 8)]
    budget = (splits[0].total_seconds + splits[1].total_seconds) / 2
    assert recommend_split(_req(layer_sizes=MODEL2, desired_time=budget), slow)["split_index"] == 1
    assert recommend_split(_req(layer_sizes=MODEL2, desired_time=1e-9), slow)["split_index"] is None
    tied = [SplitEstimate(n, total_seconds=5.0, feasible=True) for n in (1, 2, 3)]
    assert recommend_split(_req(), slow, tied)["split_index"] == 1


def test_max_last_layer():
    req = _req(desired_time=100.0, epochs=2)
    c = serialized_ct_bytes(SET2)
    expect = int(0.5 * 100.0 * MB * 4096 // (2 * 10000 * c))
    assert max_last_layer(req, c) == expect
    assert max_last_layer(req, 0.0078125 * MB) == int(0.5 * 100 * MB * 4096 // (2 * 10000 * 0.0078125 * MB))
