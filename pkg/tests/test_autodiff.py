import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakid import autodiff as ad
from weakid.autodiff import DivisionGuardError, LayoutError, NonFiniteError, ParamVector


def pv(**arrays):
    return ParamVector.from_arrays({k: np.asarray(v, dtype=float) for k, v in arrays.items()})


def central_fd(fun, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def test_sum_of_squares_value():
    value, tape = ad.forward(lambda v, t: (v["p"] * v["p"]).sum(), pv(p=[3.0, 4.0]))
    assert value == 25.0
    assert tape.replay() == 25.0


def test_constant_expression_has_empty_gradient():
    params = pv(p=[1.0, 2.0])
    value, tape = ad.forward(lambda v, t: 7.0, params)
    assert value == 7.0
    grad = ad.backward(tape)
    assert np.all(grad.data == 0)
    assert tape.gradients() == {}


def test_square_and_exp_derivatives():
    _, g, _ = ad.value_and_grad(lambda v, t: (v["p"] ** 2).sum(), pv(p=[3.0]))
    assert g["p"][0] == 6.0
    _, g, _ = ad.value_and_grad(lambda v, t: ad.exp(v["p"]).sum(), pv(p=[0.0]))
    assert g["p"][0] == 1.0


def test_replay_is_bit_exact():
    rng = np.random.default_rng(0)
    params = pv(a=rng.normal(size=(4, 3)), b=rng.normal(size=3))

    def expr(v, t):
        h = ad.affine(rng_x, v["a"], v["b"])
        return (ad.exp(h * 0.1) / (1.0 + h * h)).sum()

    rng_x = rng.normal(size=(5, 4))
    value, tape = ad.forward(expr, params)
    assert tape.replay() == value


def test_tape_is_topologically_ordered():
    params = pv(a=[1.0, 2.0], b=[0.5, 0.25])
    _, tape = ad.forward(lambda v, t: ((v["a"] * v["b"] + v["a"]) ** 2).sum(), params)
    for i, rec in enumerate(tape.records):
        assert all(j < i for j in rec.operands)


def test_layout_mismatch_is_structural_error():
    _, tape = ad.forward(lambda v, t: v["p"].sum(), pv(p=[1.0, 2.0]))
    with pytest.raises(LayoutError):
        ad.backward(tape, pv(q=[1.0, 2.0]))


def test_param_vector_partition_checked():
    with pytest.raises(LayoutError):
        ParamVector(np.zeros(5), {"a": (0, (2,)), "b": (3, (2,))})
    with pytest.raises(LayoutError):
        ParamVector(np.zeros(4), {"a": (0, (3,)), "b": (2, (2,))})


def test_nonfinite_names_primitive_and_epoch():
    with pytest.raises(NonFiniteError) as err:
        ad.forward(lambda v, t: ad.exp(v["p"]).sum(), pv(p=[1000.0]), epoch=17)
    assert "exp" in str(err.value) and "17" in str(err.value)
    assert err.value.primitive == "exp" and err.value.epoch == 17


def test_division_guard():
    with pytest.raises(DivisionGuardError):
        ad.forward(lambda v, t: (1.0 / v["p"]).sum(), pv(p=[0.0]))
    with pytest.raises(DivisionGuardError):
        ad.forward(lambda v, t: ad.rational(v["x"], v["n"], v["d"]).sum(),
                   pv(x=[0.5], n=[1, 0, 0, 0], d=[0, 0, 0]))


def _mixture(v, t):
    x = np.linspace(-1, 1, 7)[:, None]
    h = ad.affine(x, v["W"], v["b"])
    h = ad.rational(h, v["num"], v["den"])
    return (h * h).sum() + (v["b"] ** 3).sum() - (ad.exp(v["b"]) / (2.0 + v["b"] * v["b"])).sum()


def _random_params(seed):
    rng = np.random.default_rng(seed)
    return pv(W=rng.normal(size=(1, 3)), b=rng.normal(size=3) * 0.3,
              num=rng.normal(size=4), den=np.array([1.0, 0.1, 0.2]) + rng.uniform(0, 0.1, 3))


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    params = _random_params(seed)
    _, grad, _ = ad.value_and_grad(_mixture, params)
    fd = central_fd(lambda x: ad.forward(_mixture, params.with_data(x))[0], params.data)
    rel = np.abs(grad.data - fd) / np.maximum(np.abs(fd), 1e-8)
    assert rel.max() <= 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(seed, a, b):
    params = _random_params(seed)

    def f(v, t):
        return (v["num"] * v["num"]).sum() + ad.exp(v["b"]).sum()

    def g(v, t):
        return _mixture(v, t)

    _, gf, _ = ad.value_and_grad(f, params)
    _, gg, _ = ad.value_and_grad(g, params)
    _, gc, _ = ad.value_and_grad(lambda v, t: a * f(v, t) + b * g(v, t), params)
    expect = a * gf.data + b * gg.data
    assert np.allclose(gc.data, expect, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(expect).max()))


def test_determinism():
    params = _random_params(3)
    v1, g1, _ = ad.value_and_grad(_mixture, params)
    v2, g2, _ = ad.value_and_grad(_mixture, params)
    assert v1 == v2 and np.array_equal(g1.data, g2.data)


def test_broadcast_gradients_reduce_to_operand_shape():
    params = pv(w=np.ones((2, 3)), c=[1.0, 2.0, 3.0])
    _, g, _ = ad.value_and_grad(lambda v, t: (v["w"] * v["c"]).sum(), params)
    assert g["c"].tolist() == [2.0, 2.0, 2.0]
    assert np.array_equal(g["w"], np.tile([1.0, 2.0, 3.0], (2, 1)))


def test_stack_take_reshape_matmul():
    rng = np.random.default_rng(1)
    params = pv(a=rng.normal(size=4), M=rng.normal(size=(3, 2)))

    def expr(v, t):
        s = ad.stack([v["a"][0:2], v["a"][2:4]], axis=1)  # (2, 2)
        y = (v["M"] @ s).reshape(6)
        return (y * y).sum()

    _, grad, _ = ad.value_and_grad(expr, params)
    fd = central_fd(lambda x: ad.forward(expr, params.with_data(x))[0], params.data)
    assert np.allclose(grad.data, fd, rtol=1e-6, atol=1e-8)
