import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowspeech.errors import ContractError, NumericError, ShapeError
from flowspeech.numerics import F, Tensor, adam_step, AdamState, checkpoint, stream
from flowspeech.numerics.gradcheck import (
    analytic_gradient,
    finite_difference_gradient,
    max_relative_error,
)
from flowspeech.numerics.nn import Linear, Module


def _rand(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    return np.abs(x) + 0.5 if positive else x


# (name, input sampler, scalar function of one Tensor)
def _primitive_cases():
    W = np.random.default_rng(99).normal(size=(3, 2))
    ids = np.array([2, 0, 2, 1])
    tgt = np.array([[1], [0]])
    mask = np.array([True, False, True, True])
    weights = np.linspace(-1, 1, 24)
    return [
        ("add", lambda r: _rand(r, 2, 3), lambda x: F.sum_((x + Tensor(W.T)) * x)),
        ("sub", lambda r: _rand(r, 4), lambda x: F.sum_((1.0 - x) * x)),
        ("mul_broadcast", lambda r: _rand(r, 2, 3), lambda x: F.sum_(x * x[:, :1])),
        ("div", lambda r: _rand(r, 5, positive=True), lambda x: F.sum_(1.0 / x + x / 3.0)),
        ("pow", lambda r: _rand(r, 4, positive=True), lambda x: F.sum_(x ** 3)),
        ("matmul", lambda r: _rand(r, 2, 3), lambda x: F.sum_(F.matmul(x, Tensor(W)) ** 2)),
        ("matmul_batched", lambda r: _rand(r, 2, 2, 2),
         lambda x: F.sum_(F.matmul(x, F.transpose(x, (0, 2, 1))) * 0.5)),
        ("transpose", lambda r: _rand(r, 2, 3), lambda x: F.sum_(x.T * Tensor(W))),
        ("reshape", lambda r: _rand(r, 6), lambda x: F.sum_(x.reshape(3, 2) * Tensor(W))),
        ("slice", lambda r: _rand(r, 2, 4), lambda x: F.sum_(x[:, 1:3] ** 2)),
        ("concat", lambda r: _rand(r, 2, 2), lambda x: F.sum_(F.concat([x, x * x], axis=1) * Tensor(weights[:8].reshape(2, 4)))),
        ("sum_axis", lambda r: _rand(r, 2, 3), lambda x: F.sum_(F.sum_(x, axis=1) ** 2)),
        ("mean_axis", lambda r: _rand(r, 2, 3), lambda x: F.sum_(F.mean(x, axis=0) ** 2)),
        ("softmax", lambda r: _rand(r, 2, 3), lambda x: F.sum_(F.softmax(x) * Tensor(W.T))),
        ("log_softmax", lambda r: _rand(r, 2, 3), lambda x: F.sum_(F.log_softmax(x) * Tensor(W.T))),
        ("layer_norm", lambda r: _rand(r, 2, 4), lambda x: F.sum_(F.layer_norm(x) * Tensor(weights[:8].reshape(2, 4)))),
        ("silu", lambda r: _rand(r, 5), lambda x: F.sum_(F.silu(x))),
        ("gelu", lambda r: _rand(r, 5), lambda x: F.sum_(F.gelu(x))),
        ("sigmoid", lambda r: _rand(r, 5), lambda x: F.sum_(F.sigmoid(x) * x)),
        ("relu", lambda r: (lambda v: np.sign(v) * (np.abs(v) + 0.01))(_rand(r, 5)), lambda x: F.sum_(F.relu(x) * x)),
        ("tanh", lambda r: _rand(r, 5), lambda x: F.sum_(F.tanh(x))),
        ("exp", lambda r: _rand(r, 4), lambda x: F.sum_(F.exp(x))),
        ("log", lambda r: _rand(r, 4, positive=True), lambda x: F.sum_(F.log(x))),
        ("sqrt", lambda r: _rand(r, 4, positive=True), lambda x: F.sum_(F.sqrt(x))),
        ("embedding", lambda r: _rand(r, 3, 2), lambda x: F.sum_(F.embedding(x, ids) ** 2)),
        ("take_along", lambda r: _rand(r, 2, 3), lambda x: F.sum_(F.take_along(x, tgt, axis=1) ** 2)),
        ("where", lambda r: _rand(r, 4), lambda x: F.sum_(F.where(mask, x * x, x * 3.0))),
        ("interp", lambda r: _rand(r, 3, 2), lambda x: F.sum_(F.interpolate_time(x, 5, axis=0) ** 2)),
        ("conv1d", lambda r: _rand(r, 1, 5, 2),
         lambda x: F.sum_(F.conv1d(x, Tensor(weights[:12].reshape(3, 2, 2)), stride=2, padding=1) ** 2)),
        ("depthwise_conv1d", lambda r: _rand(r, 1, 4, 2),
         lambda x: F.sum_(F.depthwise_conv1d(x, Tensor(weights[:6].reshape(3, 2)), padding=1) ** 2)),
        ("l2_normalize", lambda r: _rand(r, 2, 3), lambda x: F.sum_(F.l2_normalize(x) * Tensor(W.T))),
    ]


PRIMITIVES = _primitive_cases()


@pytest.mark.parametrize("name,sample,f", PRIMITIVES, ids=[c[0] for c in PRIMITIVES])
def test_primitive_gradients_match_central_differences(name, sample, f):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(20):
        x = sample(rng)
        num = finite_difference_gradient(f, x, h=1e-3)
        ana = analytic_gradient(f, x)
        worst = max(worst, max_relative_error(ana, num))
    assert worst <= 1e-4, f"{name}: max relative error {worst:.2e}"


def test_matmul_identity():
    v = Tensor([[1.5, -2.0, 3.0]])
    out = F.matmul(Tensor([[1.0]]), v)
    np.testing.assert_array_equal(out.data, v.data)


def test_layer_norm_constant_row_is_zero():
    out = F.layer_norm(Tensor(np.full((2, 5), 3.7)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_softmax_symmetric():
    np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


@given(st.integers(1, 6), st.integers(2, 9), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_softmax_rows_and_layer_norm_moments(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=3.0, size=(rows, cols))
    s = F.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    ln = F.layer_norm(Tensor(x)).data.astype(np.float64)
    assert np.all(np.abs(ln.mean(axis=-1)) <= 1e-5)
    var_in = x.var(axis=-1)
    expected_var = var_in / (var_in + 1e-5)
    np.testing.assert_allclose(ln.var(axis=-1), expected_var, atol=1e-4)
    assert np.all(np.abs(ln.var(axis=-1)[var_in > 0.1] - 1.0) <= 1e-4)


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    F.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, 1.0)


def test_backward_mean_square():
    x = Tensor([3.0], requires_grad=True)
    F.mean(x * x).backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_accumulates_across_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = F.sum_(x * x)
    loss.backward()
    loss.backward()
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_shape_mismatch_is_descriptive():
    with pytest.raises(ShapeError, match="inner dimensions"):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        F.log(Tensor([0.0, 1.0]))
    with pytest.raises(NumericError):
        F.exp(Tensor([1000.0]))


def test_finite_difference_examples():
    x = np.random.default_rng(1).normal(size=(2, 3))
    g = finite_difference_gradient(lambda t: F.sum_(t), x, h=1e-3)
    np.testing.assert_allclose(g.data, 1.0, atol=1e-9)
    g = finite_difference_gradient(lambda t: F.sum_(t * t), np.array([2.0]), h=1e-3)
    np.testing.assert_allclose(g.data, [4.0], atol=1e-6)


# -- Adam ------------------------------------------------------------------
def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0], dtype=np.float32)
    state = AdamState(learning_rate=0.1)
    adam_step([p], [np.zeros(2, dtype=np.float32)], state)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    assert state.step == 1


def test_adam_one_step_constant_gradient():
    # by hand: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    p = np.zeros(3, dtype=np.float64)
    g = np.array([0.5, -2.0, 3.0])
    state = AdamState(learning_rate=0.01)
    adam_step([p], [g], state)
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p, expected, atol=1e-5)


def test_adam_length_mismatch():
    with pytest.raises(ContractError):
        adam_step([np.zeros(2)], [], AdamState())


def _train_run(seed):
    class Tiny(Module):
        def __init__(self, rng):
            self.a = Linear(3, 4, rng)
            self.b = Linear(4, 1, rng)

        def forward(self, x):
            return self.b(F.silu(self.a(x)))

    from flowspeech.numerics import Adam
    model = Tiny(stream(seed, "init"))
    opt = Adam(model.parameters(), lr=1e-2)
    data_rng = stream(seed, "data")
    for _ in range(20):
        x = Tensor(data_rng.normal(size=(8, 3)))
        loss = F.mean((model(x) - 1.0) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model.state_dict()


def test_training_is_bitwise_deterministic():
    a, b = _train_run(5), _train_run(5)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    c = _train_run(6)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_rng_streams_independent_and_repeatable():
    a = stream(3, "x").normal(size=5)
    b = stream(3, "x").normal(size=5)
    c = stream(3, "y").normal(size=5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


# -- checkpoint container --------------------------------------------------
def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    records = {"w": rng.normal(size=(3, 4)).astype(np.float32),
               "b": rng.normal(size=(4,)).astype(np.float32),
               "émbed": np.array(np.float32(np.pi))}
    meta = {"config_hash": "abc", "optimizer": {"step": 3}}
    path = tmp_path / "m.fspk"
    checkpoint.save(path, records, meta)
    back, meta2 = checkpoint.load(path)
    assert meta2 == meta
    for k, v in records.items():
        assert back[k].tobytes() == v.tobytes() and back[k].shape == v.shape
    assert path.read_bytes()[:5] == b"FSPK1"
    assert checkpoint.dumps(back, meta2) == path.read_bytes()
