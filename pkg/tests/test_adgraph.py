import zlib

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timl import adgraph as ad
from timl.adgraph import NonFiniteError, ParamSet, Tape, Tensor


def scalar(v):
    return Tensor(np.array(float(v)), requires_grad=True)


# gelu


def test_gelu_fixed_points():
    assert ad.gelu(Tensor(0.0)).item() == 0.0
    assert abs(ad.gelu(Tensor(10.0)).item() - 10.0) < 1e-9


def test_gelu_one_matches_mpmath_cdf():
    mpmath.mp.dps = 40
    expected = float(mpmath.mpf(1) * mpmath.ncdf(1))
    assert abs(ad.gelu(Tensor(1.0)).item() - expected) < 1e-15


def test_gelu_third_derivative_is_finite_and_checked():
    # d3/dx3 needs the level-2 derivative op to be differentiable too
    x = scalar(0.7)
    g1 = ad.grad(ad.gelu(x), {"x": x}, create_graph=True)["x"]
    g2 = ad.grad(g1, {"x": x}, create_graph=True)["x"]
    g3 = ad.grad(g2, {"x": x})["x"].item()
    h = 1e-4
    second = lambda v: ad.grad(
        ad.grad(ad.gelu(t := scalar(v)), {"x": t}, create_graph=True)["x"], {"x": t}
    )["x"].item()
    fd = (second(0.7 + h) - second(0.7 - h)) / (2 * h)
    assert abs(g3 - fd) < 1e-6


# group_norm


def _gn(x, groups):
    x = Tensor(np.asarray(x, dtype=float).reshape(1, -1))
    c = x.shape[1]
    return ad.group_norm(x, groups, 1e-5, Tensor(np.ones(c)), Tensor(np.zeros(c))).data[0]


def test_group_norm_single_group_standardizes():
    out = _gn([1, 2, 3, 4], 1)
    assert abs(out.mean()) < 1e-12
    assert abs(out.var() - 1.0) < 1e-4


def test_group_norm_constant_input_gives_zeros():
    np.testing.assert_allclose(_gn([5, 5, 5, 5], 1), 0.0, atol=1e-12)


def test_group_norm_two_groups_by_hand():
    # group [1, 2]: mean 1.5, var 0.25; group [10, 20]: mean 15, var 25
    expected = [-0.5 / np.sqrt(0.25 + 1e-5), 0.5 / np.sqrt(0.25 + 1e-5), -5 / np.sqrt(25 + 1e-5), 5 / np.sqrt(25 + 1e-5)]
    np.testing.assert_allclose(_gn([1, 2, 10, 20], 2), expected, rtol=1e-12)


def test_group_norm_rejects_indivisible_channels():
    with pytest.raises(ValueError, match="divisible"):
        _gn([1, 2, 3], 2)


# grad


def test_grad_square():
    t = scalar(3.0)
    assert ad.grad(t * t, {"t": t})["t"].item() == 6.0


def test_grad_chain_rule():
    t = scalar(1.0)
    f = t * 1.0
    assert ad.grad(f * f, {"t": t})["t"].item() == 2.0


def test_meta_gradient_hand_case():
    theta = scalar(1.0)
    g = ad.grad(theta * theta, {"t": theta}, create_graph=True)["t"]
    adapted = theta - 0.1 * g
    meta = ad.grad(adapted * adapted, {"t": theta})["t"].item()
    assert abs(meta - 1.28) < 1e-10


def test_grad_errors():
    t = scalar(1.0)
    with pytest.raises(ValueError, match="scalar"):
        ad.grad(Tensor(np.ones(2), True) * 2.0, {"t": t})
    other = scalar(2.0)
    with pytest.raises(ValueError):
        ad.grad(t * t, {"t": t, "o": other})
    zeros = ad.grad(t * t, {"t": t, "o": other}, allow_unused=True)
    assert zeros["o"].item() == 0.0


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1e308]), True) * 10.0


def test_no_grad_records_nothing():
    t = scalar(2.0)
    with ad.no_grad():
        out = t * t
    assert not out.requires_grad


# finite differences


def test_finite_diff_quadratic():
    p = ParamSet.from_arrays({"w": np.array([0.3, -1.2, 2.0])})
    assert ad.finite_diff_check(lambda q: ad.sum(q["w"] * q["w"]), p) < 1e-8


PRIMITIVES = {
    "matmul": lambda a, b: ad.sum(a @ b.T),
    "add": lambda a, b: ad.sum((a + b) * a),
    "subtract": lambda a, b: ad.sum((a - b) * b),
    "multiply": lambda a, b: ad.sum(a * b * a),
    "sigmoid": lambda a, b: ad.sum(ad.sigmoid(a) * b),
    "tanh": lambda a, b: ad.sum(ad.tanh(a) * b),
    "gelu": lambda a, b: ad.sum(ad.gelu(a) * b),
    "concatenate": lambda a, b: ad.sum(ad.concatenate([a, b * a]) * ad.concatenate([b, a])),
    "slice": lambda a, b: ad.sum(a[:, 1:3] * b[:, :2]),
    "mean": lambda a, b: ad.sum(ad.mean(a * b, axis=1) * ad.mean(a, axis=0)[:2]),
    "sum": lambda a, b: ad.sum(ad.sum(a * a, axis=0, keepdims=True) * b),
    # four channels per group; with two, normalized values are nearly constant +-1
    "group_norm": lambda a, b: ad.sum(
        ad.group_norm(ad.concatenate([a, b]), 2, 1e-5, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        * ad.concatenate([b, a])
    ),
    "bce_with_logits": lambda a, b: ad.bce_with_logits(ad.sum(a * b, axis=1), np.array([1.0, 0.0])),
    "squared_error": lambda a, b: ad.squared_error(ad.sum(a * b, axis=1), np.array([0.5, -1.0])),
}


def _double_backprop_check(f, a, b, rng):
    """Second-order check: differentiate a random projection of the first gradient.

    A plain sum of gradients can vanish identically (group_norm outputs sum
    to zero per group), leaving finite differences to measure roundoff.
    """
    wa, wb = rng.normal(size=a.shape), rng.normal(size=b.shape)

    def projected_grad(p):
        g = ad.grad(f(p["a"], p["b"]), p, create_graph=True)
        return ad.sum(g["a"] * g["a"] * wa) + ad.sum(g["b"] * wb)

    return ad.finite_diff_check(projected_grad, ParamSet.from_arrays({"a": a, "b": b}))


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_first_and_second_order(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a, b = rng.uniform(-3, 3, (2, 4)), rng.uniform(-3, 3, (2, 4))
    f = PRIMITIVES[name]
    params = ParamSet.from_arrays({"a": a, "b": b})
    assert ad.finite_diff_check(lambda p: f(p["a"], p["b"]), params) < 1e-5
    assert _double_backprop_check(f, a, b, rng) < 1e-5


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_gelu_sigmoid_tanh_second_order_random_points(xs):
    a = np.array(xs)
    for f in (ad.gelu, ad.sigmoid, ad.tanh):
        err = ad.finite_diff_check(
            lambda p: ad.sum(ad.grad(ad.sum(f(p["a"]) * p["a"]), p, create_graph=True)["a"]),
            ParamSet.from_arrays({"a": a}),
        )
        assert err < 1e-5


# tape


def test_tape_replay_is_bit_exact():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(3, 3)), True)
    x = Tensor(rng.normal(size=(2, 3)))
    out = ad.sum(ad.gelu(x @ w) * ad.sigmoid(x))
    tape = Tape.record(out)
    ad.grad(out, {"w": w})
    assert np.array_equal(tape.replay(), out.data)


def test_tape_is_topologically_ordered():
    a = scalar(1.0)
    out = (a * a + a) * a
    tape = Tape.record(out)
    for node in tape.nodes:
        assert all(j < node.output for j in node.inputs)


def test_determinism_of_gradients():
    def run():
        rng = np.random.default_rng(5)
        w = Tensor(rng.normal(size=(4, 2)), True)
        x = rng.normal(size=(3, 4))
        return ad.grad(ad.sum(ad.tanh(Tensor(x) @ w)), {"w": w})["w"].data

    assert np.array_equal(run(), run())


# ParamSet


def test_paramset_is_immutable_in_names_and_shapes():
    p = ParamSet.from_arrays({"w": np.zeros(3)})
    with pytest.raises(KeyError):
        p.replace({"v": np.zeros(3)})
    with pytest.raises(ValueError):
        p.replace({"w": np.zeros(4)})
    assert p.replace({"w": np.ones(3)})["w"].data.sum() == 3.0
    assert p.num_params == 3
