from __future__ import annotations

import json

import pytest

from hesplit.config import ConfigError, RunConfig, default_config


def test_defaults_round_trip(tmp_path):
    cfg = default_config()
    assert cfg.model.layer_sizes == (9, 128, 32, 2) and cfg.crypto.params == "set2"
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = RunConfig.load(path)
    assert again.digest() == cfg.digest() and len(cfg.digest()) == 32


def test_digest_ignores_the_estimator_section():
    cfg = default_config()
    assert cfg.with_overrides({"estimator.bandwidth": 5.0}).digest() == cfg.digest()
    assert cfg.with_overrides({"protocol.epochs": 3}).digest() != cfg.digest()


def test_overrides():
    cfg = default_config().with_overrides({"protocol.batch_size": 32, "crypto.seed": None,
                                           "data": {"kind": "synth", "samples": 10}})
    assert cfg.protocol.batch_size == 32 and cfg.data == {"kind": "synth", "samples": 10}
    with pytest.raises(ConfigError):
        cfg.with_overrides({"protocol": 3})
    with pytest.raises(ConfigError):
        cfg.with_overrides({"nosuch.key": 1})


@pytest.mark.parametrize("doc", [
    {"model": {"layer_sizes": [4, 2]}},
    {"model": {"layer_sizes": [4, 3, 2], "split_index": 2}},
    {"model": {"loss": "hinge"}},
    {"model": {"layer_sizes": [4, 3, 3, 2], "split_index": 3, "activation_degree": [3]}},
    {"crypto": {"backend": "paillier"}},
    {"protocol": {"batch_size": 0}},
    {"protocol": {"packing": "diagonal"}},
    {"estimator": {"bandwidth": 0}},
    {"protocol": {"nope": 1}},
    {"extra": {}},
])
def test_invalid_documents_are_rejected(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_invalid_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_activations_per_layer():
    cfg = default_config(model={"layer_sizes": [4, 8, 8, 8, 2], "split_index": 3, "activation_degree": [3, 5]})
    acts = cfg.activations()
    assert [a.degree for a in acts[:2]] == [3, 5] and acts[2:] == ["sigmoid", "sigmoid"]
    assert cfg.poly_activations()[0] is cfg.poly_activations()[0]
    assert default_config(crypto={"params": "toy"}).crypto_params().ring_size == 1 << 10
    with pytest.raises(ConfigError):
        default_config(crypto={"params": "set9"}).crypto_params()
