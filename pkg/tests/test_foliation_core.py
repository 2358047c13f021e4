import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from foliation_lab import foliation_core as fc
from foliation_lab.foliation_core import make_chart

L1, L2 = fc.LINEAR_LAMBDA


@pytest.fixture(scope="module")
def saddle_node():
    return make_chart("saddle-node")


def saddle_node_exact(z, t):
    # x' = x^2, y' = y
    return np.array([z[0] / (1 - z[0] * t), z[1] * np.exp(t)])


def test_linear_singularity():
    chart = make_chart("linear")
    (p,) = chart.singular_points
    assert np.allclose(p.point, 0, atol=1e-12)
    assert p.kind == "non-degenerate"
    assert sorted(p.eigenvalues, key=lambda c: c.imag) == pytest.approx([L1, L2])


def test_saddle_node_singularity(saddle_node):
    (p,) = saddle_node.singular_points
    assert p.kind == "saddle-node"
    assert np.linalg.norm(p.point) < 1e-6


def _dense_newton_roots(field, box, per_axis=9, iters=60):
    """Independent root census: Newton from a dense grid of seeds, roots merged at 1e-6."""
    g = np.linspace(-1, 1, per_axis)
    re = np.array(np.meshgrid(g, g, g, g, indexing="ij")).reshape(4, -1).T * (box.hi[0] - box.lo[0]) / 2
    z = np.stack([re[:, 0] + 1j * re[:, 1], re[:, 2] + 1j * re[:, 3]], axis=-1)
    for _ in range(iters):
        F = field(z)
        J = field.jacobian(z)
        with np.errstate(all="ignore"):
            z = z - np.linalg.solve(J, F[..., None])[..., 0]
    ok = np.all(np.isfinite(z), axis=1) & (np.linalg.norm(field(np.nan_to_num(z)), axis=1) < 1e-10)
    ok &= box.contains(np.nan_to_num(z, nan=10))
    roots = []
    for p in z[ok]:
        if all(np.linalg.norm(p - q) > 1e-6 for q in roots):
            roots.append(p)
    return roots


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_quadratic_singularities(seed):
    chart = make_chart("custom", seed=seed)
    pts = chart.singular_points
    assert all(p.kind == "non-degenerate" for p in pts)
    for p in pts:
        assert np.linalg.norm(chart.field(p.point)) < 1e-10
        assert abs(np.linalg.det(chart.field.jacobian(p.point))) > 1e-6
    oracle = _dense_newton_roots(chart.field, chart.box)
    assert len(pts) == len(oracle)


def test_field_json_round_trip():
    fld = fc.random_quadratic_field(4)
    back = fc.PolynomialVectorField.from_json(fld.to_json())
    assert np.array_equal(back.coeffs_x, fld.coeffs_x) and np.array_equal(back.coeffs_y, fld.coeffs_y)


def test_linear_flow_integrator_matches_exponential():
    """The adaptive integrator (not the closed-form path) against x e^{l1 t}, y e^{l2 t}."""
    chart = make_chart("linear")
    z = np.array([[0.3 + 0.1j, -0.2 + 0.4j]])
    for t in (0.3, 0.5j, -0.4 + 0.2j):
        res = chart._dp_segment(z.copy(), np.array([t]), check=False, stop_precision=1e-10)
        exact = np.array([z[0, 0] * np.exp(L1 * t), z[0, 1] * np.exp(L2 * t)])
        assert np.max(np.abs(res.end[0] - exact)) < 1e-9


def test_saddle_node_flow_matches_closed_form(saddle_node):
    z = np.array([0.2 + 0.1j, 0.3 - 0.2j])
    t = 0.8 + 0.5j
    out = saddle_node.flow(z, [t]).point
    assert np.max(np.abs(out - saddle_node_exact(z, t))) < 1e-9


def test_zero_path_is_identity(saddle_node):
    z = np.array([0.2 + 0.1j, 0.3 - 0.2j])
    assert np.array_equal(saddle_node.flow(z, [0j]).point, z)


@given(st.complex_numbers(max_magnitude=0.6), st.complex_numbers(max_magnitude=0.6))
def test_flow_reversible_and_additive(t1, t2):
    chart = make_chart("saddle-node")
    z = np.array([0.1 + 0.05j, 0.2 - 0.1j])
    try:
        there = chart.flow(z, [t1, t1 + t2]).point
        two_step = chart.flow(chart.flow(z, [t1]).point, [t2]).point
        back = chart.flow(there, [-(t1 + t2)]).point
    except fc.FoliationError:
        return
    assert np.max(np.abs(there - two_step)) < 1e-8
    assert np.max(np.abs(back - z)) < 1e-8


def test_tolerance_sweep(saddle_node):
    z = np.array([[0.2 + 0.1j, 0.3 - 0.2j]])
    t = np.array([0.7 - 0.6j])
    for rtol in (1e-6, 1e-8, 1e-10):
        a = replace(saddle_node, rtol=rtol, atol=rtol * 1e-2)._dp_segment(z.copy(), t, False, 1e-10).end
        b = replace(saddle_node, rtol=rtol / 2, atol=rtol * 5e-3)._dp_segment(z.copy(), t, False, 1e-10).end
        assert np.max(np.abs(a - b)) < 10 * rtol


def test_flow_errors():
    chart = make_chart("linear")
    with pytest.raises(fc.SingularApproach):
        chart.flow(np.array([1e-6, 1e-6 + 0j]), [1.0])
    with pytest.raises(fc.SingularApproach):
        chart.flow(np.array([0.5 + 0j, 0j]), [-20.0])
    with pytest.raises(fc.DomainExit):
        chart.flow(np.array([0.5 + 0j, 0.5 + 0j]), [2.0])


def test_distance_to_singular():
    chart = make_chart("linear")
    assert chart.distance_to_singular(np.zeros((1, 2), dtype=complex))[0] == 0.0
    assert chart.distance_to_singular(np.array([[0.3j, 0.4]]))[0] == pytest.approx(0.5)
    rng = np.random.default_rng(0)
    pts = chart.box.sample(200, rng)
    d = chart.distance_to_singular(pts)
    rho = 0.4
    inside = np.linalg.norm(pts, axis=1) <= rho
    assert np.array_equal(d <= rho, inside)


def test_product_flow_box_is_product():
    chart = make_chart("product")
    fb = fc.build_flow_box(chart, np.array([0.1 + 0j, 0.2 + 0j]))
    assert fb.r0 > 0
    zeta = np.array([0.3 + 0.2j, -0.5j])
    for k in range(fb.transversal.size):
        pts = fb.plaque_points(k, zeta)
        base = fb.center + fb.transversal[k] * fb.normal
        assert np.allclose(pts[:, 0], base[0] + fb.r0 * zeta, atol=1e-14)
        assert np.allclose(pts[:, 1], base[1], atol=1e-14)
    z, s, conv = fb.coordinates(fb.point(zeta, fb.transversal[2]))
    assert np.all(conv) and np.allclose(z, zeta) and np.allclose(s, fb.transversal[2])


def test_linear_flow_box_within_ten_halvings():
    chart = make_chart("linear")
    x = np.array([0.5 + 0.2j, -0.4 + 0.3j])
    fb = fc.build_flow_box(chart, x)
    room = min(float(chart.box.margin(x)), float(chart.distance_to_singular(x)) - 10 * chart.guard_radius)
    r_start = room / np.linalg.norm(chart.field(x))
    assert fb.r0 >= r_start / 2 ** 10


def test_flow_box_rejects_near_singular_points():
    with pytest.raises(fc.FoliationError):
        fc.build_flow_box(make_chart("linear"), np.array([1e-4, 0j]))
