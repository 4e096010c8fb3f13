import json

import numpy as np
import pytest

from flowspeech import cli, data
from flowspeech.numerics import checkpoint

MICRO = """\
profile: tiny
data: {n_clips: 6}
tokenize: {vqvae_steps: 20, kmeans_iters: 10}
encoders: {steps: 8, speaker_steps: 8, embedder_steps: 20}
rfm: {steps: 8}
dsp: {griffin_lim_iters: 2}
eval: {write_csv: true}
"""

STAGES = ["prepare", "train-kmeans", "train-vqvae", "train-content", "train-pitch", "train-speaker",
          "train-decoder"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    cfg = root / "cfg.yaml"
    cfg.write_text(MICRO)
    out = root / "out"
    for stage in STAGES:
        assert run(stage, "--config", cfg, "--out-dir", out) == 0, stage
    assert run("synth", "--config", cfg, "--out-dir", out, "--steps", 3) == 0
    return cfg, out


def test_stage_before_its_producer_exits_3(tmp_path, capsys):
    assert run("train-content", "--tiny", "--out-dir", tmp_path) == 3
    assert "flowspeech prepare" in capsys.readouterr().err
    cfg = tmp_path / "c.yaml"
    cfg.write_text(MICRO)
    assert run("prepare", "--config", cfg, "--out-dir", tmp_path / "w") == 0
    capsys.readouterr()
    assert run("train-content", "--config", cfg, "--out-dir", tmp_path / "w") == 3
    assert "train-kmeans" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("rfm: {nope: 1}\n")
    assert run("prepare", "--config", cfg, "--out-dir", tmp_path) == 2


def test_prepare_is_idempotent(workspace, capsys):
    cfg, out = workspace
    before = {p: p.read_bytes() for p in out.rglob("*") if p.is_file() and p.name != "stamps.json"}
    capsys.readouterr()
    assert run("prepare", "--config", cfg, "--out-dir", out) == 0
    assert json.loads(capsys.readouterr().out)["written"] == 0
    for p, blob in before.items():
        assert p.read_bytes() == blob


def test_artifacts_carry_config_hash(workspace):
    cfg, out = workspace
    h = json.loads((out / "synth" / "v" / "synth.json").read_text())["config_hash"]
    assert data.load_feature(out / "features" / "mel" / "clip0000.fsft").meta["config_hash"] == h
    assert checkpoint.load(out / "models" / "decoder.fspk")[1]["config_hash"] == h
    stamps = json.loads((out / "stamps.json").read_text())
    assert all(s["config"] == h for s in stamps.values())


def test_synth_outputs_are_valid(workspace):
    cfg, out = workspace
    params = json.loads((out / "synth" / "v" / "synth.json").read_text())
    for cid in params["clips"]:
        mel = data.load_feature(out / "synth" / "v" / f"{cid}.fsft").data
        assert mel.shape[1] == 80 and mel.min() >= 0 and mel.max() <= 1
        assert data.read_wav(out / "synth" / "v" / f"{cid}.wav").samples.size > 0


def test_eval_writes_report(workspace, capsys):
    cfg, out = workspace
    capsys.readouterr()
    assert run("eval", "--config", cfg, "--out-dir", out) == 0
    rep = json.loads((out / "reports" / "v.json").read_text())
    assert set(rep["means"]) == {"mae_f0", "secs", "mel_mse", "token_accuracy"}
    assert (out / "reports" / "v.csv").exists()


def test_eval_refuses_mixed_configs_unless_forced(workspace):
    cfg, out = workspace
    assert run("eval", "--config", cfg, "--out-dir", out, "--seed", 99) == 2
    assert run("eval", "--config", cfg, "--out-dir", out, "--seed", 99, "--force") == 0


def test_eval_missing_pair_exits_2_after_writing_report(workspace, tmp_path):
    cfg, out = workspace
    assert run("synth", "--config", cfg, "--out-dir", out, "--steps", 2, "--variant", "a") == 0
    params = json.loads((out / "synth" / "a" / "synth.json").read_text())
    (out / "synth" / "a" / f"{params['clips'][0]}.wav").unlink()
    assert run("eval", "--config", cfg, "--out-dir", out, "--generated", "a") == 2
    rep = json.loads((out / "reports" / "a.json").read_text())
    assert rep["missing"] == [params["clips"][0]]


def test_synth_rejects_unknown_clip(workspace):
    cfg, out = workspace
    assert run("synth", "--config", cfg, "--out-dir", out, "--clips", "nope") == 2


def test_variant_a_needs_reference_audio(workspace):
    cfg, out = workspace
    ws = cli.Workspace(out, cli.load_config(cfg))
    synth = cli.Synthesizer(ws, "a", steps=1)
    rec = dict(ws.records()[0], wav=None)
    with pytest.raises(cli.ContractError):
        synth(rec)


def test_jobs_do_not_change_outputs(workspace):
    cfg, out = workspace
    ref = {p.name: p.read_bytes() for p in (out / "synth" / "v").iterdir()}
    assert run("synth", "--config", cfg, "--out-dir", out, "--steps", 3, "--jobs", 3) == 0
    for p in (out / "synth" / "v").iterdir():
        assert p.read_bytes() == ref[p.name]
