import numpy as np
import pytest

from flowspeech import dsp, encoders
from flowspeech import eval as metrics
from flowspeech.errors import ContractError
from flowspeech.tokenize import TokenSequence


def sine(freq, seconds=1.0):
    t = np.arange(int(seconds * 16000)) / 16000
    return dsp.Waveform(0.5 * np.sin(2 * np.pi * freq * t))


def test_mae_f0_zero_for_identical_and_scale_free():
    a = sine(200)
    assert metrics.mae_f0(a, a) == 0.0
    # z-scored F0 ignores a constant transposition of a steady tone
    assert metrics.mae_f0(sine(200), sine(300)) < 0.05


def test_mae_f0_without_covoiced_frames_warns():
    noise = dsp.Waveform(np.zeros(16000))
    res = metrics.compare_f0(noise, sine(200))
    assert res.value == 0.0 and res.warning and res.covoiced == 0


def test_mae_f0_empty_raises():
    with pytest.raises(ContractError):
        metrics.mae_f0(dsp.Waveform(np.zeros(0)), sine(200))


def test_secs_on_embeddings():
    a = encoders.SpeakerEmbedding(np.array([1.0, 0, 0]))
    b = encoders.SpeakerEmbedding(np.array([0.0, 1, 0]))
    assert metrics.secs(a, a) == pytest.approx(1.0)
    assert metrics.secs(a, b) == pytest.approx(0.0)
    with pytest.raises(ContractError):
        metrics.secs(np.zeros((10, 80)), np.zeros((10, 80)))


def test_mel_mse_contracts():
    m = dsp.MelSpectrogram(np.zeros((5, 80)))
    with pytest.raises(ContractError):
        metrics.mel_mse(m, m)
    a = np.zeros((6, 80))
    b = np.ones((5, 80))
    assert metrics.mel_mse(a, b) == 1.0
    mask = np.array([1, 0, 0, 0, 0], dtype=bool)
    assert metrics.mel_mse(a, b, mask) == 1.0


def test_token_accuracy():
    assert metrics.token_accuracy([1, 2, 3, 4], [1, 2, 0]) == pytest.approx(2 / 3)
    with pytest.raises(ContractError):
        metrics.token_accuracy(TokenSequence([1], 50.0, "content"), TokenSequence([1], 50.0, "pitch"))
    with pytest.raises(ContractError):
        metrics.token_accuracy([], [1])


def test_report_round_trip_and_csv():
    r = metrics.EvalReport(config_hash="abc")
    r.add("b", mae_f0=1.0, secs=0.5)
    r.add("a", mae_f0=3.0, secs=0.7)
    assert r.means == {"mae_f0": 2.0, "secs": pytest.approx(0.6)}
    back = metrics.EvalReport.from_json(r.to_json())
    assert back.per_clip == r.per_clip and back.config_hash == "abc"
    lines = r.to_csv().splitlines()
    assert lines[0].startswith("id,mae_f0") and lines[1].startswith("a,")
