import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from foliation_lab import prescribed_steps as ps
from foliation_lab.prescribed_steps import StepSchedule

TERNARY = StepSchedule(((2 / 3, 1.0), (2 / 27, 1 / 9), (2 / 243, 1 / 81), (0.0, 1 / 729)))


@st.composite
def schedules(draw, max_levels=4):
    N = draw(st.integers(0, max_levels))
    e2 = 1.0
    bands = []
    for _ in range(N):
        e1 = e2 * draw(st.floats(0.3, 0.45))
        bands.append((e1, e2))
        e2 = e1 * draw(st.floats(0.1, 0.3))
    bands.append((0.0, e2))
    return StepSchedule(tuple(bands))


def test_validate_examples():
    assert ps.validate_schedule(StepSchedule(((0.0, 1.0),))).ok
    loose = StepSchedule(((0.5, 1.0), (0.0, 0.3)))
    assert ps.validate_schedule(loose).ok
    rep = ps.validate_schedule(loose, strict=True)
    assert not rep.ok and rep.indices == (1, 0)
    assert ps.validate_schedule(TERNARY, strict=True).ok


def test_validate_reports_interleaving_failure():
    rep = ps.validate_schedule(StepSchedule(((0.5, 1.0), (0.0, 0.6))))
    assert not rep.ok and "eps2_1" in rep.message


def test_measure_bound_examples():
    assert ps.measure_bound(StepSchedule(((0.0, 0.2),)), 2) == pytest.approx(math.pi * 0.04)
    # hand value 2 * 0.1 * 3 * (1 / 0.4)
    assert ps.measure_bound(StepSchedule(((0.4, 1.0), (0.0, 0.1))), 1) == pytest.approx(1.5)
    with pytest.raises(ps.ScheduleError):
        ps.measure_bound(StepSchedule(((0.5, 1.0), (0.0, 0.3))), 1)


def test_generate_ternary():
    s = ps.generate_cantor(TERNARY, 2, 1, seed=0)
    assert s.points.shape == (8, 1)
    e1, e2 = TERNARY.eps1, TERNARY.eps2
    for i, j in itertools.combinations(range(8), 2):
        d = abs(s.points[i, 0] - s.points[j, 0])
        assert any(a - 1e-15 <= d <= b + 1e-15 for a, b in zip(e1, e2))
    assert ps.generate_cantor(StepSchedule(((0.0, 1.0),)), 2, 2).points.shape == (1, 2)


def test_generate_infeasible_raises():
    with pytest.raises(ps.ScheduleError):
        ps.generate_cantor(StepSchedule(((0.45, 0.5), (0.0, 0.2))), 3, 1)


@given(schedules(), st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_generated_sets_meet_bounds(s, n, seed):
    try:
        aset = ps.generate_cantor(s, 2, n, seed=seed)
    except ps.ScheduleError:
        return
    assert ps.find_step_violation(aset.points, s, aset.atom_radius) is None
    # diameter of a set with prescribed steps is at most eps2_0
    if len(aset.points) > 1:
        diam = max(np.linalg.norm(p - q) for p, q in itertools.combinations(aset.points, 2))
        assert diam <= s.eps2[0] + 1e-12
    br = ps.brute_measure(aset, aset.atom_radius / 4.5)
    assert br.inner <= br.outer <= ps.measure_bound(s, n)
    balls = ps.cover(aset.points, s)
    assert len(balls) <= ps.covering_count_bound(s, n)
    centers = np.array([c for c, _ in balls])
    dist = np.linalg.norm(aset.points[:, None] - centers[None], axis=-1).min(axis=1)
    assert np.all(dist <= s.eps2[-1] + 1e-12)


def test_cover_examples():
    s = StepSchedule(((0.0, 0.5),))
    pts = np.array([[0.0], [0.1], [0.3]])
    assert len(ps.cover(pts, s)) == 1
    assert ps.cover(np.zeros((0, 1)), s) == []
    with pytest.raises(ps.StepViolation):
        ps.cover(np.array([[0.0], [0.7]]), s)


def test_cover_level_two_blocks():
    s = StepSchedule(((0.3, 1.0), (0.02, 0.1), (0.0, 0.004)))
    aset = ps.generate_cantor(s, 2, 1, seed=3)
    balls = ps.cover(aset.points, s)
    assert 4 <= len(balls) <= ps.covering_count_bound(s, 1)


def test_brute_measure_single_and_disjoint_balls():
    one = ps.PrescribedStepSet(np.array([[0.0]]), 0.1)
    br = ps.brute_measure(one, 0.001)
    assert abs(br.outer - 0.2) <= 2 * 0.001 + 1e-12 and abs(br.inner - 0.2) <= 2 * 0.001 + 1e-12
    two = ps.PrescribedStepSet(np.array([[0.0], [1.0]]), 0.1)
    # additive up to the cell alignment of each ball
    assert ps.brute_measure(two, 0.001).outer == pytest.approx(2 * br.outer, abs=4 * 0.001)
    with pytest.raises(ps.ScheduleError):
        ps.brute_measure(one, 0.05)


def test_schedule_from_radii_single_interval():
    s = ps.schedule_from_radii([(5.0, math.inf)], 0.1, 1.5)
    assert s.bands == ((0.0, 2 * math.asin(16 * 1.5 * 0.1 * math.exp(-5))),)


@given(st.floats(4.01, 10.0), st.floats(4.0, 8.0), st.floats(4.0, 8.0), st.floats(0.01, 1.0), st.floats(1.0, 3.0),
       st.sampled_from(["rotation", "automorphism"]))
def test_schedule_from_radii_is_strict(r02, length, gap, eps, c, variant):
    radii = [(r02, r02 + length), (r02 + length + gap, math.inf)]
    try:
        s = ps.schedule_from_radii(radii, eps, c, variant)
    except ps.ScheduleError:
        return  # only the arcsin range can refuse
    assert s.N == len(radii) - 1
    assert ps.validate_schedule(s, strict=True).ok


def test_schedule_from_radii_gap_exactly_four():
    s = ps.schedule_from_radii([(5.0, 9.0), (13.0, math.inf)], 0.01, 1.0)
    assert ps.validate_schedule(s, strict=True).ok
    with pytest.raises(ps.ScheduleError):
        ps.schedule_from_radii([(5.0, 9.0), (12.5, math.inf)], 0.01, 1.0)
    with pytest.raises(ps.ScheduleError):
        ps.schedule_from_radii([(3.0, math.inf)], 0.01, 1.0)


def test_json_round_trips():
    assert StepSchedule.from_json(TERNARY.to_json()) == TERNARY
    aset = ps.generate_cantor(TERNARY, 2, 1)
    back = ps.PrescribedStepSet.from_json(aset.to_json())
    assert np.array_equal(back.points, aset.points) and back.atom_radius == aset.atom_radius
