import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowspeech import data, dsp
from flowspeech.errors import BadMagicError, ContractError, HeaderMismatchError, TruncatedPayloadError


def test_feature_round_trip(tmp_path):
    f = data.Feature("mel", np.arange(160, dtype=np.float32).reshape(2, 80), 100.0, True, {"config_hash": "x"})
    data.save_feature(tmp_path / "a.fsft", f)
    g = data.load_feature(tmp_path / "a.fsft", kind="mel", frame_rate=100.0)
    assert np.array_equal(g.data, f.data) and g.normalized and g.meta["config_hash"] == "x"


def test_feature_errors(tmp_path):
    blob = data.feature_bytes(data.Feature("f0", np.ones((4, 2)), 100.0))
    with pytest.raises(BadMagicError):
        data.parse_feature(b"XXXXX" + blob[5:])
    with pytest.raises(TruncatedPayloadError):
        data.parse_feature(blob[:-4])
    with pytest.raises(HeaderMismatchError):
        data.parse_feature(blob + b"\0\0\0\0")
    (tmp_path / "f.fsft").write_bytes(blob)
    with pytest.raises(HeaderMismatchError):
        data.load_feature(tmp_path / "f.fsft", kind="mel")
    with pytest.raises(HeaderMismatchError):
        data.load_feature(tmp_path / "f.fsft", frame_rate=50.0)


def test_wav_round_trip(tmp_path):
    x = np.sin(np.linspace(0, 100, 1600)) * 0.5
    data.write_wav(tmp_path / "a.wav", dsp.Waveform(x))
    y = data.read_wav(tmp_path / "a.wav")
    assert y.sample_rate == 16000
    assert np.max(np.abs(y.samples - x)) < 1e-4


def test_manifest_rejects_duplicates(tmp_path):
    with pytest.raises(ContractError):
        data.write_manifest(tmp_path / "m.jsonl", [{"id": "a", "duration": 1}, {"id": "a", "duration": 2}])
    (tmp_path / "m.jsonl").write_text(json.dumps({"id": "a"}) + "\n")
    with pytest.raises(ContractError):
        data.load_manifest(tmp_path / "m.jsonl")


durations = st.lists(st.floats(0.1, 5.0), min_size=1, max_size=40)


@settings(max_examples=50, deadline=None)
@given(durs=durations, budget=st.floats(1.0, 12.0), seed=st.integers(0, 100))
def test_batches_respect_budget_and_cover_all_clips(durs, budget, seed):
    recs = [{"id": f"c{i}", "duration": d} for i, d in enumerate(durs)]
    plan, skipped = data.plan_batches(recs, budget, seed)
    by_id = {r["id"]: r["duration"] for r in recs}
    for b in plan:
        assert sum(by_id[i] for i in b) <= budget + 1e-9
    got = sorted(i for b in plan for i in b) + sorted(skipped)
    assert sorted(got) == sorted(by_id)
    assert set(skipped) == {i for i, d in by_id.items() if d > budget}
    assert plan == data.plan_batches(recs, budget, seed)[0]


def test_pad_sequences_masks():
    out, mask, lengths = data.pad_sequences([np.ones((3, 2)), np.ones((5, 2))])
    assert out.shape == (2, 5, 2)
    assert lengths.tolist() == [3, 5]
    assert mask.sum() == 8 and not mask[0, 3:].any()
    assert np.all(out[0, 3:] == 0)


def test_make_batches_per_stream_masks():
    recs = [{"id": "a", "duration": 1.0}, {"id": "b", "duration": 1.5}]
    feats = {"a": {"x": np.ones(4)}, "b": {"x": np.ones(6)}}
    (batch,) = list(data.make_batches(recs, 5.0, features=feats))
    assert batch.arrays["x"].shape == (2, 6)
    assert batch.masks["x"].sum() == 10


def test_synthetic_corpus_is_deterministic(tmp_path):
    spec = data.SyntheticSpec(n_clips=4, seed=3)
    data.generate_synthetic_corpus(spec, tmp_path / "a")
    data.generate_synthetic_corpus(spec, tmp_path / "b")
    for p in sorted((tmp_path / "a").rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()
    recs = data.load_manifest(tmp_path / "a" / "manifest.jsonl")
    assert len(recs) == 4
    for r in recs:
        vis = data.load_feature(tmp_path / "a" / r["features"]["visual"], kind="visual")
        assert vis.frame_rate == 25.0
        assert 1.0 <= r["duration"] <= 2.0 + 1e-6


def test_synthetic_spec_validation():
    with pytest.raises(ContractError):
        data.SyntheticSpec(n_speakers=1)
    with pytest.raises(ContractError):
        data.SyntheticSpec(min_seconds=3, max_seconds=2)
