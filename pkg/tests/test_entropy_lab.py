import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from foliation_lab.disk_geometry import poincare_distance
from foliation_lab.entropy_lab import (
    AdmissibleMeasure,
    BallProfile,
    BowenConfig,
    CircleSampler,
    EntropyError,
    IntervalSchedule,
    SeparationError,
    automorphism_admissible_measure,
    automorphism_lower_bound,
    ball_mass,
    ball_mass_by_count,
    bowen_distance,
    brody_bound,
    check_separation,
    circle_profile,
    comparability_constant,
    comparability_sample,
    covering_number,
    decay_rates,
    entropy_gap,
    entropy_slope,
    local_entropy,
    prescribed_steps_bridge,
    product_bowen_distance,
    rotation_admissible_measure,
    rotation_lower_bound,
    schedule_from_profile,
    separation_lower_bound,
    singular_interval_schedule,
    transversal_mass,
    verify_comparability,
)
from foliation_lab.foliation_core import build_flow_box
from foliation_lab.harmonic_measure import WeightedPointMeasure, disintegrate, sample_m_xR
from foliation_lab.prescribed_steps import validate_schedule
from foliation_lab.uniformization import LeafUniformization

from conftest import BASE_POINT

ZETA1 = 0.3 + 0.1j


def same_plaque_distance(l, R):
    """d_R between two points of one product plaque at Poincare distance l (pure translation)."""
    return 2.0 * np.arcsinh(np.cosh(R) * np.sinh(np.asarray(l) / 2.0))


# ---- Bowen distances -----------------------------------------------------------


@pytest.fixture(scope="module")
def product_samplers(product_leaf):
    R = 2.0
    return {
        "x": CircleSampler(product_leaf, R),
        "a": CircleSampler(product_leaf.recentred(0.05 + 0.02j), R),
        "b": CircleSampler(product_leaf.recentred(-0.03 + 0.04j), R),
    }


def test_bowen_identity(product_samplers):
    cfg = BowenConfig(2.0, 0.25)
    res = bowen_distance(product_samplers["x"], product_samplers["x"], cfg)
    assert res.lower == 0.0
    assert res.upper < cfg.eps / 10


def test_bowen_symmetry(product_samplers):
    cfg = BowenConfig(2.0, 0.25)
    ab = bowen_distance(product_samplers["a"], product_samplers["b"], cfg)
    ba = bowen_distance(product_samplers["b"], product_samplers["a"], cfg)
    assert ab.lower <= ab.upper and ba.lower <= ba.upper
    assert max(ab.lower, ba.lower) <= min(ab.upper, ba.upper)


def test_bowen_triangle_inequality_on_upper_brackets(product_samplers):
    cfg = BowenConfig(2.0, 0.25)
    S = product_samplers
    d = {(p, q): bowen_distance(S[p], S[q], cfg) for p in S for q in S if p != q}
    for p, q, r in (("x", "a", "b"), ("a", "x", "b"), ("x", "b", "a")):
        assert d[(p, r)].lower <= d[(p, q)].upper + d[(q, r)].upper


@pytest.mark.parametrize("a1, a2, R", [(0.1, 0.2 + 0.05j, 2.0), (0.0, 0.1j, 3.0), (-0.3, 0.1 + 0.2j, 1.0)])
def test_same_plaque_closed_form_matches_product_oracle(a1, a2, R):
    l = float(poincare_distance(a1, a2))
    assert same_plaque_distance(l, R) == pytest.approx(product_bowen_distance(a1, 0j, a2, 0j, R), abs=1e-8)


def test_bowen_bracket_contains_closed_form_and_refines(product_leaf):
    R = 2.0
    a = 0.05 + 0.02j
    exact = float(same_plaque_distance(poincare_distance(0j, a), R))
    sx, sa = CircleSampler(product_leaf, R), CircleSampler(product_leaf.recentred(a), R)
    coarse = bowen_distance(sx, sa, BowenConfig(R, 0.5))
    fine = bowen_distance(sx, sa, BowenConfig(R, 0.5, width_fraction=1.0 / 24.0))
    assert coarse.lower <= exact <= coarse.upper
    assert fine.lower <= exact <= fine.upper
    assert fine.upper - fine.lower < coarse.upper - coarse.lower
    assert coarse.upper - coarse.lower < 0.5 / 4


@pytest.mark.parametrize("R", [2.0, 3.0])
def test_transversal_translate_distance(product_chart, product_leaf, R):
    y = BASE_POINT + np.array([0, 0.05])
    delta = float(product_chart.distance(BASE_POINT[None], y[None])[0])
    res = bowen_distance(product_leaf, LeafUniformization.build(product_chart, y), BowenConfig(R, 0.25))
    assert res.lower <= delta <= res.upper


# ---- covering numbers and slopes --------------------------------------------------------


def test_covering_single_point():
    c = covering_number([0], 3.0, 0.1, lambda i, js, R: (np.zeros(len(js)), np.zeros(len(js))))
    assert (c.upper, c.lower) == (1, 1)


def test_covering_two_transversal_points(product_chart, product_leaf):
    y = BASE_POINT + np.array([0, 0.2])
    ly = LeafUniformization.build(product_chart, y)
    eps = float(product_chart.distance(BASE_POINT[None], y[None])[0]) / 10
    R = 2.0
    S = [CircleSampler(product_leaf, R), CircleSampler(ly, R)]

    def dist(i, js, R):
        res = [bowen_distance(S[i], S[j], BowenConfig(R, eps)) for j in js]
        return np.array([r.lower for r in res]), np.array([r.upper for r in res])

    c = covering_number([0, 1], R, eps, dist)
    assert (c.upper, c.lower) == (2, 2)


def _plaque_distance(Y):
    def dist(i, js, R):
        d = same_plaque_distance(poincare_distance(Y[i], Y[js]), R)
        return d, d
    return dist


@given(st.integers(0, 10_000), st.floats(0.2, 1.0), st.floats(1.0, 3.0))
def test_covering_monotone_in_eps_and_R(seed, eps, R):
    rng = np.random.default_rng(seed)
    Y = 0.5 * np.sqrt(rng.uniform(size=40)) * np.exp(2j * np.pi * rng.uniform(size=40))
    dist = _plaque_distance(Y)
    base = covering_number(Y, R, eps, dist)
    coarser = covering_number(Y, R, 2 * eps, dist)
    later = covering_number(Y, R + 0.5, eps, dist)
    assert base.lower <= base.upper
    # N(2 eps) <= N(eps) <= N at a later time, read through the brackets
    assert coarser.lower <= base.upper
    assert base.lower <= later.upper


def test_entropy_slope_synthetic():
    R = [1.0, 2.0, 3.0, 4.0]
    const = entropy_slope([(r, 7, 7) for r in R])
    assert const.lower == pytest.approx(0.0, abs=1e-12) and const.upper == pytest.approx(0.0, abs=1e-12)
    exp2 = entropy_slope([(r, math.exp(2 * r), math.exp(2 * r)) for r in R])
    assert exp2.lower == pytest.approx(2.0, abs=1e-10) and exp2.upper == pytest.approx(2.0, abs=1e-10)
    assert exp2.fit_upper.r2 == pytest.approx(1.0)
    with pytest.raises(EntropyError):
        entropy_slope([(r, 1, 1) for r in R[:3]])


def test_product_plaque_covering_slope():
    # a region of hyperbolic radius 1 in one plaque, uniform in Poincare area
    rng = np.random.default_rng(0)
    n = 30_000
    rho = np.arccosh(1 + rng.uniform(size=n) * (math.cosh(1.0) - 1))
    Y = np.tanh(rho / 2) * np.exp(2j * np.pi * rng.uniform(size=n))
    dist = _plaque_distance(Y)
    rows = []
    for R in (1.5, 2.0, 2.5, 3.0, 3.5):
        c = covering_number(Y, R, 0.5, dist)
        rows.append((R, c.upper, c.lower))
    sl = entropy_slope(rows)
    assert 1.7 <= sl.lower <= sl.upper <= 2.3
    assert min(sl.fit_lower.r2, sl.fit_upper.r2) >= 0.99


# ---- decay rates, local and transversal entropies -----------------------------------------


def test_decay_rates_synthetic():
    R = np.array([2.0, 3.0, 4.0, 5.0])
    m = np.exp(-2 * R)
    est = decay_rates(R, m, m)
    assert all(w[2] == pytest.approx(2.0) and w[3] == pytest.approx(2.0) for w in est.windows)
    assert est.h_minus.lower == pytest.approx(2.0) and est.h_plus.upper == pytest.approx(2.0)
    wide = decay_rates(R, 0.5 * m, 2 * m)
    assert wide.h_minus.lower < 2.0 < wide.h_minus.upper
    with pytest.raises(EntropyError):
        decay_rates(R, -m, m)
    with pytest.raises(EntropyError):
        decay_rates(R, 2 * m, m)
    with pytest.raises(EntropyError):
        decay_rates(np.array([1.0, 1.5]), m[:2], m[:2])


@pytest.fixture(scope="module")
def product_gap(product_leaf):
    return entropy_gap(product_leaf, ZETA1, 0.25, [2.0, 3.0, 4.0, 5.0], n_samples=20_000, seed=0, preset="product")


def test_product_local_entropy_near_two(product_gap):
    loc = product_gap.local
    for br in (loc.h_minus, loc.h_plus):
        assert br.lower <= 2.0 <= br.upper
        assert 1.7 <= br.lower and br.upper <= 2.3


def test_product_ball_masses_nonincreasing_in_R(product_gap):
    loc = product_gap.local
    assert np.all(loc.lower_mass[1:] <= loc.upper_mass[:-1])


def test_eps_doubling_does_not_increase_local_entropy(product_leaf, product_gap):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        wide, masses = local_entropy(product_leaf, ZETA1, 0.5, [2.0, 3.0, 4.0, 5.0])
    loc = product_gap.local
    # larger balls carry more mass, read through the brackets
    assert np.all(wide.upper_mass >= loc.lower_mass)
    assert wide.h_minus.mid <= loc.h_minus.mid
    assert wide.h_plus.mid <= loc.h_plus.mid


def test_product_transversal_entropy_of_atomic_measure_is_zero(product_gap):
    tr = product_gap.transversal
    assert tr.h_minus.lower <= 0.0 <= tr.h_minus.upper
    assert tr.h_plus.lower <= 0.0 <= tr.h_plus.upper
    assert product_gap.gap_minus.lower <= 2.0 <= product_gap.gap_minus.upper
    assert product_gap.gap_plus.lower <= 2.0 <= product_gap.gap_plus.upper


def test_transversal_uniform_product_measure_has_R_independent_mass(product_chart, product_leaf):
    fb = build_flow_box(product_chart, BASE_POINT)
    rng = np.random.default_rng(0)
    n = 4000
    zeta = np.sqrt(rng.uniform(0, 0.81, n)) * np.exp(2j * np.pi * rng.uniform(size=n))
    s = fb.transversal[rng.integers(0, fb.transversal.size, n)]
    mu = WeightedPointMeasure(fb.point(zeta, s), np.ones(n))
    dis = disintegrate(mu, fb)
    eps = 0.3
    # on the product model a plaque meets B_R(y, eps) iff its transversal distance to y is below eps
    w = product_chart.metric_coords(mu.points)[:, 1]
    wy = product_chart.metric_coords(BASE_POINT[None])[0, 1]
    inside = poincare_distance(w, wy) < eps
    others = {int(k): bool(inside[k]) for k in range(n)}
    masses = []
    for R in (2.0, 3.0, 4.0):
        prof = BallProfile(R, eps, np.linspace(0, 2 * np.pi, 8, endpoint=False), np.full(8, 0.1 * math.exp(-R)),
                           np.full(8, 0.2 * math.exp(-R)))
        tm = transversal_mass(dis, product_leaf, prof, mu, eps, others)
        assert tm.lower == tm.upper
        masses.append(tm.lower)
    assert masses[0] == masses[1] == masses[2]
    assert 0 < masses[0] < 1
    est = decay_rates([2.0, 3.0, 4.0], masses, masses)
    assert est.h_minus.lower == pytest.approx(0.0, abs=1e-12) and est.h_plus.upper == pytest.approx(0.0, abs=1e-12)


def test_ball_mass_count_agrees_with_quadrature(product_leaf):
    R, eps, R_max = 1.0, 0.25, 3.0
    quad = ball_mass(product_leaf, ZETA1, R, eps, R_max)
    counts = []
    for seed in (0, 1):
        mu = sample_m_xR(product_leaf, R_max, 16_000, seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            counts.append(ball_mass_by_count(product_leaf, mu, ZETA1, R, eps))
    for c in counts:
        se = c.angular_error
        assert c.inner - 3 * se <= quad.upper and quad.lower <= c.outer + 3 * se
    a, b = counts
    assert a.inner - 3 * a.angular_error <= b.outer + 3 * b.angular_error
    assert b.inner - 3 * b.angular_error <= a.outer + 3 * a.angular_error


# ---- admissible sets ----------------------------------------------------------------


@pytest.mark.parametrize("R", [2.0, 4.0])
def test_rotation_set_closed_form_on_product(product_leaf, R):
    eps = 0.25
    S = CircleSampler(product_leaf, R)
    m = rotation_admissible_measure(S, R, eps)
    r = math.tanh(R / 2)
    exact = 4 * math.asin(math.sinh(eps / 2) * (1 - r * r) / (2 * r))
    assert m.inner <= m.estimate <= m.outer
    assert m.inner <= exact <= m.outer
    assert abs(m.estimate - exact) < 1e-6
    assert m.extra_components == 0
    assert m.inner >= rotation_lower_bound(brody_bound(S), eps, R)


def test_automorphism_set_lower_bound_and_rotation_slice(product_leaf):
    R, eps = 3.0, 0.25
    S = CircleSampler(product_leaf, R)
    a = automorphism_admissible_measure(S, R, eps, n_dir=12)
    assert a.inner <= a.outer
    assert a.inner >= automorphism_lower_bound(brody_bound(S), eps, R)
    rot = rotation_admissible_measure(S, R, eps)
    sl = automorphism_admissible_measure(S, R, eps, directions=[[0, 0, 1], [0, 0, -1]])
    assert float(np.sum(sl.rho_inner)) == pytest.approx(rot.inner, rel=1e-3)


# ---- singular schedules ---------------------------------------------------------------


def _profile(Rs, windows):
    F = np.zeros((3, Rs.size))
    for j, (a, b) in enumerate(windows):
        if a is not None:
            F[j, (Rs >= a) & (Rs <= b)] = 0.5
    return F


def test_schedule_without_singular_visits():
    Rs = np.arange(0.05, 8.0 + 1e-9, 0.05)
    s = schedule_from_profile(Rs, np.zeros((3, Rs.size)), 8.0, 0.01)
    assert s.N == 0
    assert s.intervals == ((8.0, math.inf),)
    assert s.ok


def test_schedule_brackets_a_synthetic_window():
    Rs = np.arange(0.05, 30.0 + 1e-9, 0.05)
    # U_3 on [6, 14], U_2 on [7, 13], U_1 on [9, 11]
    F = _profile(Rs, [(9.0, 11.0), (7.0, 13.0), (6.0, 14.0)])
    s = schedule_from_profile(Rs, F, 30.0, 0.1)
    assert s.N == 1
    (a, b), tail = s.intervals
    assert a <= 7.0 + 0.05 and b >= 13.0 - 0.05
    assert a >= 6.0 and b <= 14.0
    assert tail == (30.0, math.inf)
    assert s.ok


def test_schedule_window_without_U1_is_skipped():
    Rs = np.arange(0.05, 30.0 + 1e-9, 0.05)
    F = _profile(Rs, [(None, None), (7.0, 13.0), (6.0, 14.0)])
    assert schedule_from_profile(Rs, F, 30.0, 0.1).N == 0


def test_schedule_merge_rule_near_R():
    Rs = np.arange(0.05, 20.0 + 1e-9, 0.05)
    F = _profile(Rs, [(16.0, 17.0), (15.0, 18.0), (14.0, 18.5)])
    s = schedule_from_profile(Rs, F, 20.0, 0.1)
    assert s.N == 0
    assert s.intervals[0][0] == pytest.approx(15.0, abs=0.05)
    assert math.isinf(s.intervals[0][1])


def test_schedule_separation_error():
    Rs = np.arange(0.05, 30.0 + 1e-9, 0.05)
    F = _profile(Rs, [(9.0, 9.5), (9.0, 10.0), (8.0, 11.0)])
    with pytest.raises(SeparationError):
        schedule_from_profile(Rs, F, 30.0, 0.1)


@given(st.lists(st.tuples(st.floats(5.0, 60.0), st.floats(4.0, 10.0)), min_size=0, max_size=4), st.floats(0.05, 0.3))
def test_generated_schedules_give_strictly_valid_step_schedules(wins, delta):
    Rs = np.arange(0.05, 80.0 + 1e-9, 0.05)
    F = np.zeros((3, Rs.size))
    for a, length in wins:
        F[2, (Rs >= a - 0.5) & (Rs <= a + length + 0.5)] = 0.5
        F[1, (Rs >= a) & (Rs <= a + length)] = 0.5
        F[0, (Rs >= a + 1) & (Rs <= a + 2)] = 0.5
    try:
        s = schedule_from_profile(Rs, F, 80.0, delta)
    except SeparationError:
        return
    inv = s.invariants()
    assert inv["lengths_ge_4"] and inv["gaps_ge_4"] and inv["last_infinite"]
    rep = validate_schedule(s.step_schedule(1e-3 * math.exp(-1), 1.5), strict=True)
    assert rep.ok, rep.message


def test_circle_profile_on_product_leaf_is_empty(product_leaf):
    Rs, F = circle_profile(product_leaf, 3.0, (0.1, 0.2, 0.3), step=0.5, n_angles=64)
    assert np.all(F == 0)


def test_singular_schedule_argument_errors(linear_leaf):
    with pytest.raises(ValueError):
        singular_interval_schedule(linear_leaf, 6.0, 0.2, 0.1, 0.3)
    with pytest.raises(SeparationError):
        singular_interval_schedule(linear_leaf, 6.0, 0.1, 0.2, 5.0)


def test_linear_leaf_schedule_invariants(linear_leaf):
    s = singular_interval_schedule(linear_leaf, 8.0, 2e-4, 2.2e-4, 4e-3, n_samples=4000, seed=0)
    assert isinstance(s, IntervalSchedule)
    assert s.ok, s.invariants()
    assert s.delta < 0.01


def test_separation_bound_and_check():
    from foliation_lab.entropy_lab import SeparationSample

    t = np.array([0.0, 1.0, 2.0])
    far = SeparationSample(t, np.array([1.0, 1.0, 1.0]), np.ones(3))
    assert separation_lower_bound([far], 0.1, 0.5) == math.inf
    close = SeparationSample(t, np.array([0.05, 0.6, 0.7]), np.array([0.05, 1.0, 1.0]))
    b = separation_lower_bound([close], 0.1, 0.5)
    assert b == pytest.approx(0.5 * max(abs(math.log(0.05)), math.log1p(1.0 / 0.05)))
    with pytest.raises(SeparationError):
        check_separation([close], 0.1, 0.5, 0.9)


# ---- comparability and the prescribed-steps bridge --------------------------------------


def test_comparability_on_product(product_chart):
    samples = comparability_sample(product_chart, seed=0)
    comp = comparability_constant(product_chart, 0.01, samples)
    assert comp.c == pytest.approx(1.1, rel=1e-6)
    chk = verify_comparability(comp, samples, 0.01, n_pairs=1000)
    assert chk.n_pairs >= 1000 and chk.n_pass == chk.n_pairs


def test_comparability_on_linear(linear_chart):
    samples = comparability_sample(linear_chart, seed=0)
    comp = comparability_constant(linear_chart, 2e-4, samples)
    chk = verify_comparability(comp, samples, 2e-4, n_pairs=1000)
    assert chk.n_pass == chk.n_pairs
    assert comp.c > 1.0 and comp.eps0 > 0
    # smaller rho1 admits more of the sample, so c cannot shrink
    assert comparability_constant(linear_chart, 1e-5, samples).c >= comparability_constant(linear_chart, 0.3, samples).c


def test_bridge_single_band_passes(product_leaf):
    sched = IntervalSchedule(8.0, ((8.0, math.inf),), 0.01)
    S = CircleSampler(product_leaf, 8.0)
    m = rotation_admissible_measure(S, 8.0, 0.25)
    rep = prescribed_steps_bridge(sched, m, 0.25, 1.1)
    assert rep.passed and rep.n_pairs == 200 * 199 // 2


def test_bridge_detects_forbidden_gaps():
    sched = IntervalSchedule(20.0, ((5.0, 10.0), (14.0, math.inf)), 0.1)
    eps, c = 0.01, 1.1
    bands = sched.step_schedule(eps, c).bands
    lo_gap, hi_gap = bands[1][1], bands[0][0]
    ok = AdmissibleMeasure(20.0, eps, 0.5 * lo_gap, 0.5 * lo_gap, 0.5 * lo_gap)
    assert prescribed_steps_bridge(sched, ok, eps, c).passed
    wide = AdmissibleMeasure(20.0, eps, 4 * hi_gap, 4 * hi_gap, 4 * hi_gap)
    rep = prescribed_steps_bridge(sched, wide, eps, c)
    assert rep.n_fail > 0
    assert all(lo_gap < d < hi_gap or d > bands[0][1] for _, _, d in rep.offending)
