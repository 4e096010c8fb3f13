import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowspeech import rfm
from flowspeech.errors import ContractError, ShapeError
from flowspeech.numerics import Tensor, stream
from flowspeech.numerics.gradcheck import analytic_gradient, finite_difference_gradient, max_relative_error

SMALL = dict(layers=2, hidden=16, heads=2, content_vocab=6, pitch_vocab=5, content_dim=4, pitch_dim=3,
             speaker_dim=5, time_dim=8, n_mels=80)


def small(**kw):
    return rfm.Decoder(rfm.DecoderConfig(**dict(SMALL, **kw)))


def _cond(model, T=9, seed=0):
    rng = np.random.default_rng(seed)
    spk = rng.normal(size=5)
    return rfm.assemble_condition(rng.integers(0, 6, 4), rng.integers(0, 5, 4), spk / np.linalg.norm(spk), T,
                                  model.embedder)


def test_fresh_decoder_outputs_zero_and_blocks_are_identity():
    m = small()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 7, 80))
    c = rng.normal(size=(2, 7, m.cfg.cond_dim))
    assert np.max(np.abs(m(x, np.array([0.2, 0.9]), c).data)) <= 1e-6
    h = Tensor(rng.normal(size=(2, 7, 16)))
    temb = Tensor(rng.normal(size=(2, 16)))
    for block in m.net.blocks:
        assert np.max(np.abs(block(h, temb).data - h.data)) <= 1e-6


def test_concat_variant_is_not_zero_at_init():
    m = small(conditioning="concat")
    out = rfm.concat_conditioning_forward(np.random.default_rng(0).normal(size=(5, 80)), 0.3, _cond(m, 5), m)
    assert np.abs(out.data).max() > 1e-3
    with pytest.raises(ContractError):
        rfm.concat_conditioning_forward(np.zeros((5, 80)), 0.3, _cond(small(), 5), small())


def test_condition_layout_and_ablation():
    m = small()
    b = _cond(m, T=11)
    assert b.assembled.shape == (11, m.cfg.cond_dim) and b.length == 11
    sl = m.embedder.channel_slices()
    a = rfm.ablate_condition(b, "pitch", m.embedder)
    null = m.embedder.null.data
    np.testing.assert_allclose(a.assembled.data[:, sl["pitch"]], np.broadcast_to(null[sl["pitch"]], (11, 3)))
    np.testing.assert_array_equal(a.assembled.data[:, sl["content"]], b.assembled.data[:, sl["content"]])
    np.testing.assert_array_equal(a.assembled.data[:, sl["speaker"]], b.assembled.data[:, sl["speaker"]])
    with pytest.raises(ContractError):
        rfm.ablate_condition(b, "timbre", m.embedder)


def test_condition_contracts():
    m = small()
    with pytest.raises(ContractError):
        rfm.assemble_condition([0, 9], [0], np.ones(5) / np.sqrt(5), 4, m.embedder)
    with pytest.raises(ShapeError):
        rfm.assemble_condition([0], [0], np.ones(4) / 2, 4, m.embedder)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.floats(0.0, 1.0))
def test_interpolant_endpoints_and_target(seed, t):
    rng = np.random.default_rng(seed)
    x0, x1 = rng.normal(size=(2, 2, 3, 4))
    fs = rfm.FlowSample(x0, x1, np.full(2, t))
    np.testing.assert_allclose(fs.xt, (1 - t) * x0 + t * x1, atol=1e-12)
    assert rfm.flow_matching_loss(Tensor(x1 - x0), x0, x1).item() == pytest.approx(0.0, abs=1e-10)


def test_logit_normal_timesteps():
    t = rfm.sample_timestep(20000, seed=1)
    assert np.all((t > 0) & (t < 1))
    assert abs(np.median(t) - 0.5) < 0.02
    assert abs(np.mean(np.log(t / (1 - t)))) < 0.03


def test_masked_loss_ignores_padding():
    rng = np.random.default_rng(0)
    v, x0, x1 = rng.normal(size=(3, 2, 5, 4))
    mask = np.ones((2, 5), dtype=bool)
    mask[1, 3:] = False
    a = rfm.flow_matching_loss(Tensor(v), x0, x1, mask).item()
    v2 = v.copy()
    v2[1, 3:] = 100
    assert rfm.flow_matching_loss(Tensor(v2), x0, x1, mask).item() == pytest.approx(a, rel=1e-6)


def test_flow_loss_gradient():
    rng = np.random.default_rng(3)
    x0, x1 = rng.normal(size=(2, 2, 3, 4))
    mask = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)
    f = lambda v: rfm.flow_matching_loss(v, x0, x1, mask)
    v = rng.normal(size=(2, 3, 4))
    assert max_relative_error(analytic_gradient(f, v), finite_difference_gradient(f, v)) <= 1e-4


def test_null_flag_rate():
    rng = stream(0, "nulltest")
    flags = np.concatenate([rfm.draw_null_flags(rng, 16, 0.1) for _ in range(2000)])
    assert abs(flags.mean() - 0.1) < 0.01
    assert not rfm.draw_null_flags(rng, 16, 0.0).any()


def test_euler_grid():
    grid, eps = rfm.euler_grid(30)
    assert len(grid) == 30 and grid[0] == 0 and grid[-1] == pytest.approx(1 - eps)
    with pytest.raises(ContractError):
        rfm.euler_grid(0)


@settings(max_examples=20, deadline=None)
@given(steps=st.integers(1, 60), k=st.floats(-3, 3), g=st.floats(0.5, 8))
def test_constant_field_moves_by_k(steps, k, g):
    field = rfm.ConstantField(np.full(4, k))
    x0 = np.random.default_rng(steps).normal(size=(3, 4))
    out = rfm.euler_sample_cfg(None, (3, 4), rfm.SamplerConfig(steps, g), field, x0=x0, clamp=False)
    np.testing.assert_allclose(out, x0 + k, atol=1e-9)


def test_guidance_one_equals_conditional_field():
    m = small()
    c = _cond(m)
    rng = np.random.default_rng(0)
    for p in m.parameters():
        p.data = p.data + 0.05 * rng.normal(size=p.shape).astype(p.data.dtype)
    trace = []
    rfm.euler_sample_cfg(c, 9, rfm.SamplerConfig(3, 1.0, seed=2), m, trace=trace, clamp=False)
    x = stream(2, "sampler", "x0").standard_normal((9, 80))
    for t, v_c, v_u in trace:
        assert not np.allclose(v_c, v_u)
        x = x + v_c / 3
    np.testing.assert_allclose(rfm.euler_sample_cfg(c, 9, rfm.SamplerConfig(3, 1.0, seed=2), m, clamp=False), x,
                               atol=1e-10)


def test_sampler_contracts_and_determinism():
    with pytest.raises(ContractError):
        rfm.SamplerConfig(0, 1.0)
    with pytest.raises(ContractError):
        rfm.SamplerConfig(10, 0.0)
    m = small()
    c = _cond(m)
    a = rfm.euler_sample_cfg(c, 9, rfm.SamplerConfig(4, 2.0, seed=5), m)
    b = rfm.euler_sample_cfg(c, 9, rfm.SamplerConfig(4, 2.0, seed=5), m)
    assert np.array_equal(a, b) and a.min() >= 0 and a.max() <= 1
    with pytest.raises(ContractError):
        rfm.ddim_sample(c, 9, 4, m)
    with pytest.raises(ContractError):
        rfm.euler_sample_cfg(c, 9, rfm.SamplerConfig(4, 2.0), small(parameterization="epsilon"))


def test_cosine_schedule_floor_and_monotone():
    s = np.linspace(0, 1, 101)
    a = rfm.cosine_alpha_bar(s)
    assert a[0] == pytest.approx(1.0) and a[-1] == rfm.ALPHA_FLOOR
    assert np.all(np.diff(a) <= 1e-15)


def test_linear_point_field_optimum_is_exact():
    x1 = np.linspace(-1, 1, 4)
    m = rfm.LinearPointField(4)
    m.W.data = -np.eye(4, dtype=m.W.data.dtype)
    m.b.data = x1.astype(m.b.data.dtype)
    assert rfm.point_toy_loss(m, x1) < 1e-10
    out = rfm.euler_sample_cfg(None, (8, 4), rfm.SamplerConfig(1, 1.0), m, clamp=False)
    np.testing.assert_allclose(out, np.broadcast_to(x1, (8, 4)), atol=1e-6)


def test_decoder_training_smoke():
    rng = np.random.default_rng(0)
    data = []
    for i in range(4):
        T = 20
        spk = rng.normal(size=5)
        data.append(rfm.DecoderExample(f"c{i}", rng.uniform(0, 1, (T, 80)), rng.integers(0, 6, T // 2),
                                       rng.integers(0, 5, T // 2), spk / np.linalg.norm(spk), T / 100))
    cfg = rfm.DecoderConfig(**dict(SMALL, steps=30, lr=3e-3, warmup_steps=2, batch_seconds=0.4))
    m1, h1, nf = rfm.train_decoder(data, cfg)
    m2, h2, _ = rfm.train_decoder(data, cfg)
    assert h1 == h2
    assert np.mean(h1[-5:]) < np.mean(h1[:5])
    assert 0 <= nf <= 1


def test_mode_fidelity():
    mode, other = np.array([1.0, 0]), np.array([-1.0, 0])
    s = np.array([[1.0, 0], [1.5, 0], [-0.9, 0], [4.0, 0]])
    assert rfm.mode_fidelity(s, mode, other, sigma=0.5) == 0.5


def test_config_validation():
    with pytest.raises(ContractError):
        rfm.DecoderConfig(conditioning="film")
    with pytest.raises(ContractError):
        rfm.DecoderConfig(parameterization="score")


def test_guided_toy_means_track_class_means():
    mu, sigma = np.array([0.75, 0.0]), 0.5
    model = rfm.ToyClassField(2, 2, hidden=64, seed=1)
    rfm.train_class_toy(model, mu, sigma, steps=1500, seed=1)
    x0 = stream(1, "cfg-mean").standard_normal((2048, 2))
    for label, mode in ((0, mu), (1, -mu)):
        out = rfm.euler_sample_cfg(label, x0.shape, rfm.SamplerConfig(30, 1.0), model, x0=x0, clamp=False)
        assert np.linalg.norm(out.mean(axis=0) - mode) <= 0.1 * np.linalg.norm(mu)
        # stronger guidance pushes further along the class direction, never back toward the other class
        g4 = rfm.euler_sample_cfg(label, x0.shape, rfm.SamplerConfig(30, 4.0), model, x0=x0, clamp=False)
        assert np.dot(g4.mean(axis=0), mode) >= np.dot(out.mean(axis=0), mode)
