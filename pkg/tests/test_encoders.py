import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowspeech import encoders
from flowspeech.errors import ContractError, ShapeError
from flowspeech.numerics import Tensor, default_dtype
from flowspeech.numerics.gradcheck import analytic_gradient, finite_difference_gradient, max_relative_error

SMALL = dict(input_dim=6, hidden=16, blocks=1, heads=2, kernel=3, output_dim=5, seed=0)


def _plain_ce(ids, logits):
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    return -np.take_along_axis(logp, ids[..., None], -1).mean()


@pytest.mark.parametrize("K", [32, 100])
def test_uniform_logits_give_log_k(K):
    ids = np.random.default_rng(K).integers(0, K, 50)
    for alpha in (0.0, 0.1, 0.5):
        v = encoders.content_loss(ids, np.zeros((50, K)), alpha=alpha).item()
        assert abs(v - np.log(K)) <= 1e-4


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), K=st.integers(2, 40))
def test_alpha_zero_is_plain_ce(seed, K):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(3, 7, K)) * 3
    ids = rng.integers(0, K, (3, 7))
    with default_dtype(np.float64):
        v = encoders.content_loss(ids, Tensor(logits), alpha=0.0).item()
    assert abs(v - _plain_ce(ids, logits)) <= 1e-7


def test_mask_excludes_padding():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 6, 4))
    ids = rng.integers(0, 4, (2, 6))
    mask = np.ones((2, 6), dtype=bool)
    mask[0, 4:] = False
    a = encoders.content_loss(ids, logits, mask=mask).item()
    logits2 = logits.copy()
    logits2[0, 4:] += 50.0
    assert encoders.content_loss(ids, logits2, mask=mask).item() == pytest.approx(a, abs=1e-6)


def test_content_loss_gradient():
    ids = np.array([[1, 0, 3]])
    f = lambda x: encoders.content_loss(ids, x, alpha=0.1)
    x = np.random.default_rng(0).normal(size=(1, 3, 4))
    assert max_relative_error(analytic_gradient(f, x), finite_difference_gradient(f, x)) <= 1e-4


def test_speaker_loss_range_and_zero_vector():
    a = np.array([1.0, 0, 0])
    assert encoders.speaker_loss(a, a).item() == pytest.approx(0.0, abs=1e-7)
    assert encoders.speaker_loss(a, -a).item() == pytest.approx(2.0, abs=1e-6)
    with pytest.raises(ContractError):
        encoders.speaker_loss(a, np.zeros(3))
    with pytest.raises(ContractError):
        encoders.SpeakerEmbedding(np.zeros(4))


def test_encoder_output_rate_and_shapes():
    enc = encoders.ConformerEncoder(encoders.EncoderConfig(**SMALL))
    v = np.random.default_rng(0).normal(size=(10, 6))
    assert enc.logits(v).shape == (1, 20, 5)
    assert len(encoders.predict_tokens(enc, v)) == 20
    with pytest.raises(ShapeError):
        enc.logits(np.zeros((10, 7)))


def test_padding_does_not_change_valid_frames():
    cfg = encoders.EncoderConfig(**SMALL)
    enc = encoders.ConformerEncoder(cfg)
    rng = np.random.default_rng(1)
    v = rng.normal(size=(1, 6, 6))
    padded = np.concatenate([v, rng.normal(size=(1, 3, 6))], axis=1)
    a = enc.hidden(v)[0].data[0]
    b = enc.hidden(padded, lengths=[6])[0].data[0, :12]
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_embed_is_unit_norm():
    cfg = encoders.EncoderConfig(**dict(SMALL, head="embed"))
    enc = encoders.ConformerEncoder(cfg)
    e = encoders.speaker_forward(np.random.default_rng(2).normal(size=(8, 6)), enc)
    assert abs(np.linalg.norm(e.vector) - 1) < 1e-6


def test_encoder_training_reduces_loss_and_is_deterministic():
    rng = np.random.default_rng(0)
    data = []
    for i in range(6):
        sym = rng.integers(0, 3, 8)
        vis = np.eye(6)[sym] + 0.05 * rng.normal(size=(8, 6))
        data.append(encoders.EncoderExample(f"c{i}", vis, np.repeat(sym, 2), 0.32))
    cfg = encoders.EncoderConfig(**dict(SMALL, output_dim=3, steps=40, lr=1e-2, warmup_steps=5, batch_seconds=1.0))
    m1, h1 = encoders.train_attribute_encoder("content", data, cfg)
    m2, h2 = encoders.train_attribute_encoder("content", data, cfg)
    assert h1 == h2
    assert np.mean(h1[-5:]) < 0.5 * h1[0]
    with pytest.raises(ContractError):
        encoders.train_attribute_encoder("timbre", data, cfg)


def test_prototypes_are_orthonormal():
    p = encoders.speaker_prototypes(4, 16)
    np.testing.assert_allclose(p @ p.T, np.eye(4), atol=1e-10)


def test_mel_statistics_are_gain_invariant():
    m = np.random.default_rng(0).uniform(0, 1, size=(30, 80))
    np.testing.assert_allclose(encoders.mel_statistics(m), encoders.mel_statistics(m + 0.2), atol=1e-12)
