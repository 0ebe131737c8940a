import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakid.library import LibrarySpec, MultiIndex, default_library
from weakid.weights import (
    Box,
    ConfigurationError,
    QuadGrid,
    WeightFunction,
    bump_1d,
    default_radii,
    dump_tables,
    make_master,
    map_from_master,
    sample_random_weights,
    weight_value,
)

BURGERS = Box.from_bounds(10.0, -8.0, 8.0)


def test_bump_center_boundary_and_half_radius():
    assert bump_1d(2.0, 2.0, 0.5, 5.0, 0) == 1.0
    for order in range(5):
        assert bump_1d(2.5, 2.0, 0.5, 5.0, order) == 0.0
        assert bump_1d(1.5, 2.0, 0.5, 5.0, order) == 0.0
        assert bump_1d(7.0, 2.0, 0.5, 5.0, order) == 0.0
    assert bump_1d(2.25, 2.0, 0.5, 5.0, 0) == pytest.approx(math.exp(-5.0 / 3.0), rel=1e-14)
    assert math.exp(-5.0 / 3.0) == pytest.approx(0.188876, abs=5e-7)


# d^n/ds^n exp(5/(s^2 - 1) + 5) at s = -0.6, -0.2, 0.1, 0.45, 0.7, from symbolic
# differentiation (sympy), frozen here
SYMBOLIC = {
    1: [0.879707049247675, 1.7620146400838421, -0.9700531852840869, -1.9878065783999317, -0.2206180588605905],
    2: [8.121253879122417, -6.454602240584908, -9.102723339514077, 5.160597641312468, 4.411028284012783],
    3: [14.41255888026773, -34.75796083790487, 17.8865664742357, 44.38425201358121, -51.719254444749154],
    4: [-533.9452066092052, 156.7942251780557, 176.325683762184, -184.95345928864862, -50.108302888961944],
}
POINTS = [-0.6, -0.2, 0.1, 0.45, 0.7]


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_series_derivatives_match_symbolic_values(order):
    got = [bump_1d(s, 0.0, 1.0, 5.0, order) for s in POINTS]
    assert np.allclose(got, SYMBOLIC[order], rtol=1e-12, atol=0)


@pytest.mark.parametrize("order", [1, 2])
def test_series_derivatives_match_finite_differences(order):
    h = 1e-5
    for s in POINTS:
        lo, hi = (bump_1d(s + d, 0.0, 1.0, 5.0, order - 1) for d in (-h, h))
        assert bump_1d(s, 0.0, 1.0, 5.0, order) == pytest.approx((hi - lo) / (2 * h), rel=1e-7)


def test_radius_scaling_of_derivatives():
    for order in range(5):
        assert bump_1d(1.3, 1.0, 0.5, 5.0, order) == pytest.approx(
            bump_1d(0.6, 0.0, 1.0, 5.0, order) / 0.5**order, rel=1e-13)


def test_weight_value_at_center():
    w = WeightFunction(np.array([3.0, 1.0]), 0.8)
    assert weight_value(w, w.center, MultiIndex(0, (0,))) == 1.0
    assert weight_value(w, w.center, MultiIndex(1, (0,))) == 0.0


def test_weight_value_second_x_derivative_vs_fd():
    w = WeightFunction(np.array([3.0, 1.0]), 0.8)
    rng = np.random.default_rng(0)
    for _ in range(5):
        p = w.center + rng.uniform(-0.6, 0.6, 2) * w.radius
        h = 1e-4 * w.radius
        f = lambda dx: weight_value(w, p + [0.0, dx])
        fd = (f(h) - 2 * f(0.0) + f(-h)) / h**2
        assert weight_value(w, p, MultiIndex(0, (2,))) == pytest.approx(fd, rel=1e-5)


def test_weight_is_positive_inside_and_zero_on_and_outside_boundary():
    w = WeightFunction(np.array([5.0, 0.0]), 1.0)
    rng = np.random.default_rng(1)
    # beyond |z| ~ 0.99 the value underflows to 0 in double precision
    inside = w.center + rng.uniform(-0.95, 0.95, (200, 2))
    assert all(weight_value(w, p) > 0 for p in inside)
    edge = w.center + np.array([[1.0, 0.3], [-0.2, -1.0], [1.0, 1.0], [1.5, 0.0]])
    for p in edge:
        for alpha in [(0, (0,)), (1, (0,)), (0, (4,)), (1, (3,))]:
            assert weight_value(w, p, MultiIndex(*alpha)) == 0.0


def test_quadrature_weights_and_affine_exactness():
    grid = QuadGrid.on_box([0.0, -1.0], [2.0, 3.0], 5)
    h = np.array([0.5, 1.0])
    ax0 = np.array([h[0] / 2, h[0], h[0], h[0], h[0] / 2])
    ax1 = np.array([h[1] / 2, h[1], h[1], h[1], h[1] / 2])
    assert np.allclose(grid.weights, np.outer(ax0, ax1).ravel(), rtol=0, atol=1e-15)
    pts = grid.points()
    f = 3.0 - 2.0 * pts[:, 0] + 0.5 * pts[:, 1] + 0.25 * pts[:, 0] * pts[:, 1]
    exact = 3.0 * 8 - 2.0 * 2 * 4 + 0.5 * 2 * 4 + 0.25 * 2 * 4
    assert abs(grid.integrate(f) - exact) <= 1e-12


def test_master_tables_cover_library_exactly():
    lib = default_library()
    m = make_master(BURGERS, lib, 11, seed=0)
    assert set(m.tables) == set(lib.multi_indices())
    small = LibrarySpec.from_strings("D_t U", ["D_x^2 U"])
    assert set(make_master(BURGERS, small, 11, seed=0).tables) == {MultiIndex(1, (0,)), MultiIndex(0, (2,))}


def test_master_boundary_nodes_vanish_and_center_is_one():
    lib = default_library()
    m = make_master(BURGERS, lib, 11, seed=3)
    unit = np.abs(m.unit_axis)
    on_edge = (np.add.outer(unit == 1.0, unit == 1.0) > 0).ravel()
    for alpha, table in m.tables.items():
        assert np.all(table[on_edge] == 0.0)
    assert m.tables[MultiIndex(0, (0,))].max() == 1.0


def test_master_alpha0_quadrature_against_fine_reference():
    lib = default_library()
    m = make_master(BURGERS, lib, 128, seed=0)
    quad = m.grid.integrate(m.tables[MultiIndex(0, (0,))])
    # separable: the reference is the square of a fine 1-D integral
    s = np.linspace(-1.0, 1.0, 200_001)
    phi = bump_1d(s, 0.0, 1.0, 5.0, 0)
    one_d = np.trapezoid(phi, s) * m.radius
    assert quad == pytest.approx(one_d**2, rel=1e-6)


def test_master_rejects_tiny_grid():
    with pytest.raises(ConfigurationError):
        make_master(BURGERS, default_library(), 2)


def test_map_translation_only_keeps_tables():
    m = make_master(BURGERS, default_library(), 9, seed=0)
    w = WeightFunction(m.center + [1.0, -2.0], m.radius)
    tabs = map_from_master(m, w)
    for alpha in m.tables:
        assert np.array_equal(tabs.tables[alpha], m.tables[alpha])
    assert np.allclose(tabs.nodes, m.nodes() + [1.0, -2.0])


def test_map_doubling_radius_halves_first_t_derivative():
    m = make_master(BURGERS, default_library(), 9, seed=0)
    w = WeightFunction(np.array([5.0, 0.0]), 2 * m.radius)
    tabs = map_from_master(m, w)
    alpha = MultiIndex(1, (0,))
    assert np.array_equal(tabs.tables[alpha], 0.5 * m.tables[alpha])
    assert np.allclose(tabs.quad, 4 * m.grid.weights, rtol=1e-15)


def test_map_matches_direct_evaluation():
    m = make_master(BURGERS, default_library(), 15, seed=0)
    w = WeightFunction(np.array([4.0, 1.5]), 0.7 * m.radius)
    tabs = map_from_master(m, w)
    alpha = MultiIndex(0, (2,))
    direct = np.array([weight_value(w, p, alpha) for p in tabs.nodes])
    scale = np.abs(direct).max()
    assert np.max(np.abs(tabs.tables[alpha] - direct)) <= 1e-12 * scale


def test_map_rejects_beta_mismatch():
    m = make_master(BURGERS, default_library(), 9, seed=0)
    with pytest.raises(ValueError):
        map_from_master(m, WeightFunction(np.array([5.0, 0.0]), 1.0, beta=4.0))


def test_sample_zero_and_determinism():
    assert sample_random_weights(BURGERS, 0, 1.0, 2.0, seed=0) == []
    a = sample_random_weights(BURGERS, 30, 1.0, 2.0, seed=4)
    b = sample_random_weights(BURGERS, 30, 1.0, 2.0, seed=4)
    assert [(tuple(w.center), w.radius) for w in a] == [(tuple(w.center), w.radius) for w in b]
    assert len({w.id for w in a}) == 30


def test_sampled_balls_lie_inside_domain():
    ws = sample_random_weights(BURGERS, 10_000, 0.5, 2.0, seed=0)
    centers = np.array([w.center for w in ws])
    radii = np.array([w.radius for w in ws])[:, None]
    assert len(ws) == 10_000
    assert np.all(centers - radii >= BURGERS.lo) and np.all(centers + radii <= BURGERS.hi)
    assert np.all((radii >= 0.5) & (radii <= 2.0))


def test_thin_domain_is_configuration_error():
    thin = Box.from_bounds(10.0, 0.0, 0.01)
    with pytest.raises(ConfigurationError):
        sample_random_weights(thin, 5, 1.0, 2.0, seed=0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 5.0), st.floats(-3, 3), st.floats(0.5, 20))
def test_default_radii_are_feasible(T, x0, width):
    box = Box.from_bounds(T, x0, x0 + width)
    lo, hi = default_radii(box)
    assert 0 < lo <= hi <= 0.5 * box.widths.min()
    ws = sample_random_weights(box, 3, lo, hi, seed=0)
    assert len(ws) == 3


def test_dump_tables_is_json(tmp_path):
    m = make_master(BURGERS, default_library(), 5, seed=0)
    tabs = map_from_master(m, WeightFunction(np.array([5.0, 0.0]), 1.0, id=7))
    path = tmp_path / "w.json"
    dump_tables(tabs, path)
    doc = json.loads(path.read_text())
    assert doc["id"] == 7 and len(doc["nodes"]) == 25
