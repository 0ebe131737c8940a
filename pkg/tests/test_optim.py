import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakid.optim import LBFGS, Adam


def test_adam_zero_gradient_leaves_parameters():
    opt = Adam(4)
    x = np.array([1.0, -2.0, 0.5, 3.0])
    for _ in range(3):
        x_new = opt.step(x, np.zeros(4))
        assert np.array_equal(x_new, x)


def test_adam_first_step_closed_form():
    lr, eps = 1e-3, 1e-8
    g = np.array([0.3, -2.0, 1e-4, 50.0])
    x = np.zeros(4)
    step = Adam(4, lr=lr, eps=eps).step(x, g)
    # bias correction makes m_hat = g and v_hat = g^2 after one step
    expect = -lr * g / (np.abs(g) + eps)
    assert np.allclose(step, expect, rtol=1e-15, atol=0)
    assert np.allclose(step, -lr * np.sign(g), rtol=1e-3)


def test_adam_is_deterministic():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(30, 6))
    runs = []
    for _ in range(2):
        opt, x = Adam(6), np.ones(6)
        for g in grads:
            x = opt.step(x, g)
        runs.append(x)
    assert np.array_equal(runs[0], runs[1])


def test_adam_reset_zeroes_moments():
    opt = Adam(3)
    opt.step(np.zeros(3), np.ones(3))
    opt.reset(np.array([1]))
    assert opt.m[1] == 0.0 and opt.v[1] == 0.0 and opt.m[0] != 0.0


def quadratic(D):
    return lambda x: (0.5 * float(x @ (D * x)), D * x)


def test_lbfgs_solves_diagonal_quadratic():
    D = np.array([1.0, 2.0, 5.0, 10.0, 0.5])
    fun = quadratic(D)
    opt = LBFGS(history=10)
    x = np.array([1.0, -1.0, 2.0, 0.5, -3.0])
    for it in range(20):
        x = opt.step(x, fun).x
        if np.linalg.norm(x) <= 1e-8:
            break
    assert np.linalg.norm(x) <= 1e-8


def test_lbfgs_no_move_at_minimiser():
    res = LBFGS().step(np.zeros(5), quadratic(np.ones(5)))
    assert np.array_equal(res.x, np.zeros(5)) and res.step_size == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_lbfgs_accepted_steps_never_increase_loss(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(6, 6))

    def fun(x):
        r = A @ x + np.sin(x)
        return float(r @ r) + float(np.sum(x**4)), 2 * (A.T @ r + np.cos(x) * r) + 4 * x**3

    opt = LBFGS(history=5)
    x = rng.normal(size=6)
    f = fun(x)[0]
    for _ in range(15):
        res = opt.step(x, fun)
        assert res.f <= f
        x, f = res.x, res.f


def test_lbfgs_skips_flat_curvature_pairs():
    # a linear function has y = 0, so no pair may be stored
    c = np.array([1.0, -2.0])
    opt = LBFGS()
    opt.step(np.zeros(2), lambda x: (float(c @ x), c.copy()))
    assert len(opt.pairs) == 0


def test_lbfgs_failed_line_search_rejects_and_clears(caplog):
    opt = LBFGS(max_line_search=3)
    opt.pairs.append((np.ones(2), np.ones(2), 0.5))
    calls = []

    def fun(x):
        calls.append(x)
        if len(calls) == 1:
            return 0.0, np.array([1.0, 1.0])
        return np.inf, None

    with caplog.at_level(logging.WARNING):
        res = opt.step(np.zeros(2), fun)
    assert not res.accepted and np.array_equal(res.x, np.zeros(2))
    assert len(opt.pairs) == 0
    assert "line search failed" in caplog.text


@pytest.mark.parametrize("history", [1, 3])
def test_lbfgs_history_is_bounded(history):
    opt = LBFGS(history=history)
    fun = quadratic(np.array([1.0, 3.0, 7.0]))
    x = np.array([1.0, 1.0, 1.0])
    for _ in range(6):
        x = opt.step(x, fun).x
    assert len(opt.pairs) <= history
