import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timl import adgraph as ad
from timl.adgraph import ParamSet, Tensor
from timl.encoder import TaskEmbedding
from timl.models import ModelSpec, forward, init_params, loss_fn

MLP = ModelSpec("mlp", 4, (8, 6), output="binary-logit")
LSTM = ModelSpec("lstm", 3, hidden_size=5, timesteps=4, output="scalar-regression")


def test_same_seed_same_params():
    a, b = init_params(MLP, 3), init_params(MLP, 3)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_parameter_count_4_8_1():
    assert init_params(ModelSpec("mlp", 4, (8,)), 0).num_params == 49


def test_initial_biases():
    p = init_params(MLP, 0)
    for k in p:
        if k.endswith("bias"):
            assert not p[k].data.any()
    lstm = init_params(LSTM, 0)["lstm.bias"].data
    h = LSTM.hidden_size
    assert np.all(lstm[h : 2 * h] == 1.0)
    assert not np.delete(lstm, np.s_[h : 2 * h]).any()


def test_init_bounds():
    p = init_params(ModelSpec("mlp", 16, (64,)), 1)
    assert np.abs(p["layer0.weight"].data).max() <= 0.25
    assert np.abs(p["head.weight"].data).max() <= 1 / 8


def test_head_is_linear():
    spec = ModelSpec("mlp", 1, (1,), output="scalar-regression")
    p = init_params(spec, 0).replace({"head.weight": np.array([[2.0]]), "head.bias": np.zeros(1)})
    out, h = forward(spec, p, np.array([[3.0]]), return_hidden=True)
    assert out.data[0] == 2.0 * h.data[0, 0]
    # unit hidden weight: the head doubles gelu(3)
    p = p.replace({"layer0.weight": np.array([[1.0]])})
    out, h = forward(spec, p, np.array([[3.0]]), return_hidden=True)
    assert out.data[0] == 2.0 * ad.gelu(Tensor(3.0)).item()


@pytest.mark.parametrize("spec", [MLP, LSTM], ids=["mlp", "lstm"])
def test_film_identity_is_exact(spec):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, spec.input_dim)) if spec.kind == "mlp" else rng.normal(size=(5, 4, 3))
    p = init_params(spec, 0)
    plain = forward(spec, p, x).data
    ident = forward(spec, p, x, TaskEmbedding.identity(spec.point_pairs)).data
    assert np.array_equal(plain, ident)


def test_embedding_width_mismatch():
    bad = TaskEmbedding.identity((("hidden0", 8), ("hidden1", 5)))
    with pytest.raises(ValueError, match="width"):
        forward(MLP, init_params(MLP, 0), np.zeros((1, 4)), bad)


def test_input_shape_mismatch():
    with pytest.raises(ValueError):
        forward(MLP, init_params(MLP, 0), np.zeros((1, 3)))


def _sig(z):
    return 1 / (1 + np.exp(-z))


def test_lstm_matches_hand_unrolled_equations():
    rng = np.random.default_rng(2)
    p = init_params(LSTM, 2)
    x = rng.normal(size=(3, 4, 3))
    w_ih, w_hh, b = (p[k].data for k in ("lstm.w_ih", "lstm.w_hh", "lstm.bias"))
    hs = LSTM.hidden_size
    h = np.zeros((3, hs))
    c = np.zeros((3, hs))
    for t in range(4):
        z = x[:, t] @ w_ih + h @ w_hh + b
        i, f, g, o = _sig(z[:, :hs]), _sig(z[:, hs : 2 * hs]), np.tanh(z[:, 2 * hs : 3 * hs]), _sig(z[:, 3 * hs :])
        c = f * c + i * g
        h = o * np.tanh(c)
    expected = h @ p["head.weight"].data[:, 0] + p["head.bias"].data[0]
    np.testing.assert_allclose(forward(LSTM, p, x).data, expected, rtol=1e-12)


def test_lstm_zero_recurrence_depends_on_last_step_only():
    p = init_params(LSTM, 0).replace({"lstm.w_hh": np.zeros((5, 20))})
    x = np.ones((1, 4, 3))
    # with constant inputs and no recurrence, each step sees the same gate values
    z = x[0, 0] @ p["lstm.w_ih"].data + p["lstm.bias"].data
    hs = 5
    i, f, g, o = _sig(z[:hs]), _sig(z[hs : 2 * hs]), np.tanh(z[2 * hs : 3 * hs]), _sig(z[3 * hs :])
    c = 0.0
    for _ in range(4):
        c = f * c + i * g
    h = o * np.tanh(c)
    np.testing.assert_allclose(forward(LSTM, p, x).data[0], h @ p["head.weight"].data[:, 0], rtol=1e-12)


def test_lstm_flattened_input_accepted():
    p = init_params(LSTM, 0)
    x = np.random.default_rng(0).normal(size=(2, 4, 3))
    assert np.array_equal(forward(LSTM, p, x).data, forward(LSTM, p, x.reshape(2, 12)).data)


@settings(max_examples=10, deadline=None)
@given(st.permutations(range(6)))
def test_lstm_batch_order_invariance(perm):
    p = init_params(LSTM, 1)
    x = np.random.default_rng(1).normal(size=(6, 4, 3))
    out = forward(LSTM, p, x).data
    np.testing.assert_array_equal(forward(LSTM, p, x[list(perm)]).data, out[list(perm)])


@pytest.mark.parametrize("spec", [MLP, LSTM], ids=["mlp", "lstm"])
def test_gamma_beta_receive_gradient(spec):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 4)) if spec.kind == "mlp" else rng.normal(size=(4, 4, 3))
    y = np.array([1.0, 0.0, 1.0, 0.0])
    emb = TaskEmbedding(
        {n: Tensor(rng.uniform(0.5, 1.5, w), True) for n, w in spec.point_pairs},
        {n: Tensor(rng.normal(size=w), True) for n, w in spec.point_pairs},
    )
    loss = loss_fn(spec, forward(spec, init_params(spec, 0), x, emb), y)
    wrt = {f"g.{n}": emb.gammas[n] for n, _ in spec.point_pairs}
    wrt.update({f"b.{n}": emb.betas[n] for n, _ in spec.point_pairs})
    grads = ad.grad(loss, wrt)
    assert all(np.abs(g.data).sum() > 0 for g in grads.values())


def test_mlp_gradcheck_through_film():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 4))
    y = (rng.random(5) > 0.5).astype(float)
    params = init_params(MLP, 0).arrays()
    params.update({f"g{n}": rng.uniform(0.5, 1.5, w) for n, w in MLP.point_pairs})
    params.update({f"b{n}": rng.normal(size=w) for n, w in MLP.point_pairs})

    def f(p):
        emb = TaskEmbedding({n: p[f"g{n}"] for n, _ in MLP.point_pairs}, {n: p[f"b{n}"] for n, _ in MLP.point_pairs})
        return loss_fn(MLP, forward(MLP, p, x, emb), y)

    assert ad.finite_diff_check(f, ParamSet.from_arrays(params)) < 1e-5


def test_spec_round_trip():
    assert ModelSpec.from_dict(MLP.to_dict()) == MLP
    assert ModelSpec.from_dict(LSTM.to_dict()) == LSTM
