import pytest

from flowspeech.config import load_config, resolve
from flowspeech.errors import ContractError


def test_defaults_and_tiny_profile():
    full = resolve()
    tiny = resolve(profile="tiny")
    assert full.rfm.layers == 8 and full.rfm.hidden == 512
    assert tiny.rfm.layers == 2 and tiny.encoders.hidden == 64
    assert tiny.tokenize.content_clusters == tiny.data.n_content_symbols
    assert full.hash != tiny.hash


def test_unknown_keys_and_bad_types_rejected():
    with pytest.raises(ContractError):
        resolve({"rfm": {"layerz": 3}})
    with pytest.raises(ContractError):
        resolve({"rfm": {"layers": "three"}})
    with pytest.raises(ContractError):
        resolve({"eval": {"write_csv": 1}})
    with pytest.raises(ContractError):
        resolve(profile="huge")


def test_seed_precedence():
    env = {"FLOWSPEECH_SEED": "7"}
    assert resolve(env=env).seed == 7
    assert resolve({"seed": 3}, env=env).seed == 3
    assert resolve({"seed": 3}, seed=5, env=env).seed == 5
    assert resolve(env={}).seed == 0


def test_hash_is_stable_and_sensitive(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("rfm:\n  steps: 10\n")
    a = load_config(p, env={})
    assert a.hash == load_config(p, env={}).hash
    assert a.hash != resolve({"rfm": {"steps": 11}}, env={}).hash


def test_bad_file(tmp_path):
    with pytest.raises(ContractError):
        load_config(tmp_path / "missing.yaml")
    p = tmp_path / "list.yaml"
    p.write_text("- 1\n")
    with pytest.raises(ContractError):
        load_config(p)


def test_published_hyperparameters_are_the_defaults():
    from flowspeech import dsp, encoders, rfm
    assert encoders.LABEL_SMOOTHING == 0.1
    assert rfm.DecoderConfig().cond_dropout == 0.1
    assert rfm.SamplerConfig().steps == 30 and rfm.SamplerConfig().guidance_scale == 2.0
    assert (dsp.N_MELS, dsp.HOP, dsp.WINDOW) == (80, 160, 640)
    full = resolve(env={})
    assert full.rfm.sampler_steps == 30 and full.rfm.cfg_scale == 2.0
