import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.integrate import quad

from foliation_lab.conformal import (
    ZipperMap,
    disk_to_square_derivative,
    distance_to_polygon,
    polygon_contains,
    resample_polygon,
    signed_area,
)
from foliation_lab.foliation_core import PolynomialVectorField, make_chart
from foliation_lab.jets import Jet
from foliation_lab.uniformization import (
    InfeasibleRadius,
    LeafUniformization,
    brody_constant,
    trace_time_domain,
    uniformize,
)

SQUARE = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j])


def random_star_polygon(rng, n=None):
    n = n or int(rng.integers(5, 13))
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(0.6, 1.4, n)
    return rad * np.exp(1j * ang)


def square_map(xi, C):
    """Schwarz-Christoffel map of the disk onto the square of half-side 1, by quadrature."""
    f = lambda s: C * xi * (1 + (s * xi) ** 4) ** -0.5
    return quad(lambda s: f(s).real, 0, 1, epsabs=1e-14)[0] + 1j * quad(lambda s: f(s).imag, 0, 1, epsabs=1e-14)[0]


def test_koebe_bracket_random_polygons():
    rng = np.random.default_rng(0)
    done = 0
    while done < 100:
        poly = random_star_polygon(rng)
        if signed_area(poly) <= 0 or not polygon_contains(poly, np.array([0j]))[0]:
            continue
        zm = uniformize(poly, check=False)
        d = float(distance_to_polygon(poly, np.array([0j]))[0])
        p = zm.derivative_at_center()
        assert d <= p <= 4 * d
        done += 1


def test_disk_scaling():
    for s in (0.3, 1.0, 2.5):
        zm = ZipperMap(s * np.exp(2j * np.pi * np.arange(2000) / 2000))
        assert zm.derivative_at_center() == pytest.approx(s, abs=1e-8)


def test_square_constant():
    zm = ZipperMap(resample_polygon(SQUARE, 0.02))
    assert zm.derivative_at_center() == pytest.approx(disk_to_square_derivative(), rel=1e-5)
    # Gamma-function closed form: 2 sqrt(pi) / Gamma(1/4)^2 * ... reduced to sqrt(8 pi) * 2 / Gamma(1/4)^2
    assert disk_to_square_derivative() == pytest.approx(4 * math.sqrt(2 * math.pi) * math.sqrt(2)
                                                        / math.gamma(0.25) ** 2, rel=1e-15)


def test_zipper_boundary_residual():
    zm = ZipperMap(resample_polygon(SQUARE, 0.02))
    assert zm.boundary_residual() < 1e-3
    xi = np.array([0.2 + 0.1j, -0.6j])
    assert np.allclose(zm.to_disk(zm.from_disk(xi)), xi, atol=1e-10)


def test_product_time_domain_is_box_section():
    chart = make_chart("product")
    x = np.array([0.2 - 0.1j, 0.3j])
    om = trace_time_domain(chart, x)
    v = om.vertices + x[0]
    rect = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j])
    assert np.max(distance_to_polygon(rect, v)) < 1e-6


def _linear_stop_radius(chart, x, alpha, t_max):
    """Independent stop radius of the ray t = s e^{i alpha}: dense scan of the exponential solution."""
    s = np.linspace(0, t_max, 200001)
    t = s * np.exp(1j * alpha)
    z = np.stack([x[0] * np.exp(chart.field.coeffs_x[1] * t), x[1] * np.exp(chart.field.coeffs_y[2] * t)], axis=-1)
    bad = (np.linalg.norm(z, axis=1) < chart.guard_radius) | (chart.box.margin(z) < 0)
    return s[np.argmax(bad)] if bad.any() else t_max


def test_linear_rays_match_exponential_prediction():
    chart = make_chart("linear")
    x = np.array([0.3 + 0.2j, 0.4 - 0.1j])
    assert chart.field.coeffs_x[1] == 1.0  # the coefficient of x in X_1
    om = trace_time_domain(chart, x)
    for k in range(0, om.angles.size, max(1, om.angles.size // 16)):
        pred = _linear_stop_radius(chart, x, om.angles[k], om.t_max)
        assert om.radii[k] == pytest.approx(pred, abs=2 * om.t_max / 200000 + 1e-9)


def test_time_domain_area_converges():
    chart = make_chart("linear")
    x = np.array([0.3 + 0.2j, 0.4 - 0.1j])
    a1 = trace_time_domain(chart, x, n_rays=64).area
    a2 = trace_time_domain(chart, x, n_rays=128).area
    assert abs(a2 - a1) < 0.01 * a2


def test_product_eta_is_square_constant():
    chart = make_chart("product", "euclidean")
    leaf = LeafUniformization.build(chart, np.array([0j, 0.3 + 0j]))
    assert leaf.eta == pytest.approx(disk_to_square_derivative(), rel=1e-5)
    assert brody_constant(chart, 16).c0 == pytest.approx(leaf.eta, rel=1e-12)


def test_eta_field_scaling_invariance():
    """X -> 2X halves the time domain; with the time cap halved too the traced patch is the same."""
    chart = make_chart("linear")
    fld = chart.field
    doubled = replace(chart, field=PolynomialVectorField(fld.degree, 2 * fld.coeffs_x, 2 * fld.coeffs_y))
    x = np.array([0.3 + 0.2j, 0.4 - 0.1j])
    e1 = LeafUniformization.build(chart, x, t_max=30.0).eta
    e2 = LeafUniformization.build(doubled, x, t_max=15.0).eta
    assert e2 == pytest.approx(e1, rel=1e-8)


def test_eta_decays_toward_singularity():
    chart = make_chart("linear")
    d = np.array([0.5 + 0.1j, 0.4 - 0.2j])
    etas = [LeafUniformization.build(chart, s * d).eta for s in (0.8, 0.4, 0.2, 0.1)]
    assert all(a > b for a, b in zip(etas, etas[1:]))


def test_brody_constant_presets():
    for preset in ("product", "linear", "saddle-node"):
        est = brody_constant(make_chart(preset), 8)
        assert 0 < est.c0 < math.inf
    prod = make_chart("product")
    a, b = brody_constant(prod, 16).c0, brody_constant(prod, 32).c0
    assert abs(a - b) < 0.05 * a


def test_leaf_map_normalization_and_product_spot_values():
    chart = replace(make_chart("product", "euclidean"), zipper_spacing=0.005)
    x = np.array([0j, 0.3 + 0j])
    leaf = LeafUniformization.build(chart, x)
    assert np.array_equal(leaf.points(np.zeros(1))[0], x)
    C = disk_to_square_derivative()
    for xi in (0.3 + 0.2j, -0.5j, 0.6 * np.exp(0.3j)):
        p = leaf.points(np.array([xi]))[0]
        assert abs(p[0] - square_map(xi, C)) < 1e-6 and p[1] == x[1]


def test_leaf_map_points_lie_on_leaf(linear_leaf):
    xi = 0.6 * np.exp(2j * np.pi * np.arange(16) / 16)
    jx, jy = linear_leaf.jets(xi, 1)
    p = np.stack([jx.c[0], jy.c[0]], axis=-1)
    X = linear_leaf.chart.field(p)
    cross = jx.c[1] * X[:, 1] - jy.c[1] * X[:, 0]
    assert np.max(np.abs(cross) / (np.abs(jx.c[1]) + np.abs(jy.c[1])) / np.linalg.norm(X, axis=1)) < 1e-6


def test_poincare_metric_at_center(linear_leaf, product_leaf):
    for leaf in (linear_leaf, product_leaf):
        jx, jy = leaf.jets(np.zeros(1), 1)
        v = np.array([jx.c[1][0], jy.c[1][0]])
        pulled = 4 * leaf.chart.tangent_norm(leaf.center, v) ** 2 / leaf.eta ** 2
        assert pulled == pytest.approx(4.0, rel=0.02)


def test_recentred_view_is_same_leaf(linear_leaf):
    a = 0.3 + 0.1j
    view = linear_leaf.recentred(a)
    xi = np.array([0.1j, -0.2 + 0.3j])
    from foliation_lab.disk_geometry import DiskAutomorphism

    assert np.allclose(view.points(xi), linear_leaf.points(DiskAutomorphism(a).apply(xi)), atol=1e-12)


def test_infeasible_radius_reports_limit(linear_leaf, tmp_path):
    R = linear_leaf.max_feasible_R
    with pytest.raises(InfeasibleRadius) as info:
        linear_leaf.leaf_map(R + 1.0)
    assert info.value.max_feasible_R == R
    grid = linear_leaf.leaf_map(3.0, n_radii=3, n_angles=8)
    grid.to_csv(tmp_path / "g.csv")
    rows = list(csv.reader(open(tmp_path / "g.csv")))
    assert rows[0] == ["R_index", "angle", "x_re", "x_im", "y_re", "y_im", "error_bound"] and len(rows) == 25
