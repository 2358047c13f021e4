"""Sets whose pairwise distances fall in a ladder of bands.

A :class:`StepSchedule` lists bands ``[eps1_i, eps2_i]`` from the coarsest
(i = 0) to the finest (i = N, with eps1_N = 0).  Finite unions of small balls
with such distances are generated, covered and measured here.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma
from scipy.spatial.distance import pdist, squareform

from .disk_geometry import AUT_BAND_C1


class ScheduleError(ValueError):
    pass


class StepViolation(ValueError):
    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


@dataclass(frozen=True)
class StepSchedule:
    bands: tuple

    def __post_init__(self):
        bands = tuple((float(a), float(b)) for a, b in self.bands)
        if not bands:
            raise ScheduleError("a schedule needs at least one band")
        object.__setattr__(self, "bands", bands)

    @property
    def N(self):
        return len(self.bands) - 1

    @property
    def eps1(self):
        return np.array([b[0] for b in self.bands])

    @property
    def eps2(self):
        return np.array([b[1] for b in self.bands])

    def to_json(self):
        return json.dumps({"bands": [list(b) for b in self.bands]})

    @classmethod
    def from_json(cls, text):
        return cls(tuple(tuple(b) for b in json.loads(text)["bands"]))


@dataclass(frozen=True)
class ScheduleReport:
    ok: bool
    message: str = ""
    indices: tuple = ()


def validate_schedule(s: StepSchedule, strict=False) -> ScheduleReport:
    e1, e2 = s.eps1, s.eps2
    N = s.N
    for i in range(N + 1):
        if not e2[i] > 0:
            return ScheduleReport(False, f"eps2_{i} = {e2[i]} must be positive", (i,))
        if e1[i] < 0:
            return ScheduleReport(False, f"eps1_{i} = {e1[i]} must be non-negative", (i,))
    if e1[N] != 0:
        return ScheduleReport(False, f"eps1_{N} = {e1[N]} must be 0 for the finest band", (N,))
    for i in range(N):
        if not e2[i + 1] < e1[i]:
            return ScheduleReport(False, f"eps2_{i + 1} = {e2[i + 1]} must be < eps1_{i} = {e1[i]}", (i + 1, i))
        if not e1[i] < e2[i]:
            return ScheduleReport(False, f"eps1_{i} = {e1[i]} must be < eps2_{i} = {e2[i]}", (i, i))
    if strict:
        for i in range(1, N + 1):
            if not e2[i] < e1[i - 1] / 2:
                return ScheduleReport(
                    False, f"strict: eps2_{i} = {e2[i]} must be < eps1_{i - 1}/2 = {e1[i - 1] / 2}", (i, i - 1)
                )
    return ScheduleReport(True)


def unit_ball_volume(n):
    return math.pi ** (n / 2.0) / gamma(n / 2.0 + 1.0)


def covering_count_bound(s: StepSchedule, n):
    """p_N = 3^{nN} prod_{i<N} (eps2_i / eps1_i)^n."""
    e1, e2 = s.eps1, s.eps2
    ratio = np.prod(e2[:-1] / e1[:-1]) if s.N > 0 else 1.0
    return float(3.0 ** (n * s.N) * ratio ** n)


def measure_bound(s: StepSchedule, n):
    """Lebesgue bound V_n eps2_N^n 3^{nN} prod_{i<N} (eps2_i/eps1_i)^n."""
    rep = validate_schedule(s, strict=True)
    if not rep.ok:
        raise ScheduleError(rep.message)
    return unit_ball_volume(n) * s.eps2[-1] ** n * covering_count_bound(s, n)


def _band_index(d, s: StepSchedule, slack=0.0):
    """Index of a band containing [d - slack, d + slack] (clipped at 0), or -1."""
    lo, hi = max(d - slack, 0.0), d + slack
    for i, (e1, e2) in enumerate(s.bands):
        if lo >= e1 and hi <= e2:
            return i
    return -1


def find_step_violation(points, s: StepSchedule, atom_radius=0.0):
    """First pair whose distance (widened by the atom radius) fits no band, or None."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if 2.0 * atom_radius > s.eps2[-1]:
        return (0, 0, 2.0 * atom_radius)
    if p.shape[0] < 2:
        return None
    D = squareform(pdist(p))
    slack = 2.0 * atom_radius
    ok = np.zeros_like(D, dtype=bool)
    for e1, e2 in s.bands:
        ok |= (np.maximum(D - slack, 0.0) >= e1) & (D + slack <= e2)
    np.fill_diagonal(ok, True)
    bad = np.argwhere(~ok)
    if bad.size == 0:
        return None
    i, j = bad[0]
    return (int(i), int(j), float(D[i, j]))


@dataclass(frozen=True)
class PrescribedStepSet:
    """Finite union of closed balls of ``atom_radius`` around ``points`` in R^n."""

    points: np.ndarray
    atom_radius: float
    schedule: StepSchedule | None = field(default=None, compare=False)

    @property
    def n(self):
        return self.points.shape[1]

    def to_json(self):
        return json.dumps({"n": self.n, "atom_radius": self.atom_radius, "points": self.points.tolist()})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        pts = np.asarray(d["points"], dtype=float).reshape(-1, int(d["n"]))
        return cls(pts, float(d["atom_radius"]))


def _greedy_separated(points, radius):
    """Greedy maximal radius-separated subset in input order, with the assignment of every point."""
    centers = []
    assign = np.empty(len(points), dtype=int)
    for k, x in enumerate(points):
        for ci, c in enumerate(centers):
            if np.linalg.norm(points[c] - x) <= radius:
                assign[k] = ci
                break
        else:
            centers.append(k)
            assign[k] = len(centers) - 1
    return centers, assign


def cover(points, s: StepSchedule):
    """Cover by balls of radius eps2_N, following the level-by-level separated-set induction."""
    p = np.atleast_2d(np.asarray(points, dtype=float)) if len(points) else np.zeros((0, 1))
    if p.shape[0] == 0:
        return []
    bad = find_step_violation(p, s)
    if bad is not None:
        i, j, d = bad
        raise StepViolation(f"points {i} and {j} at distance {d:.6g} fit no band", (i, j))
    clusters = [np.arange(p.shape[0])]
    centers = [0]
    for level in range(1, s.N + 1):
        radius = s.eps2[level]
        new_clusters, new_centers = [], []
        for members in clusters:
            cidx, assign = _greedy_separated(p[members], radius)
            for ci, c in enumerate(cidx):
                new_clusters.append(members[assign == ci])
                new_centers.append(members[c])
        clusters, centers = new_clusters, new_centers
    return [(p[c].copy(), float(s.eps2[-1])) for c in centers]


def _sibling_offsets(b, n, dist, rng):
    """b offsets in R^n with all pairwise distances within a factor of ``dist`` (see callers)."""
    if n == 1:
        offs = (np.arange(b) - (b - 1) / 2.0) * dist
        return offs.reshape(b, 1)
    if b <= n + 1:
        # regular simplex on b vertices, edge length dist
        e = np.eye(b)
        centered = e - e.mean(axis=0)
        u, sv, _ = np.linalg.svd(centered, full_matrices=False)
        coords = u[:, : b - 1] * sv[: b - 1]
        coords *= dist / np.linalg.norm(coords[0] - coords[1])
        q, _ = np.linalg.qr(rng.normal(size=(n, n)))
        pad = np.zeros((b, n))
        pad[:, : b - 1] = coords
        return pad @ q.T
    raise ScheduleError(f"branching {b} does not fit a regular layout in dimension {n}")


def generate_cantor(s: StepSchedule, branching=2, n=1, seed=0, atom_fraction=0.25):
    """Hierarchical atom cloud with prescribed steps.

    Each node at level i-1 spawns ``branching`` children whose mutual distances sit in
    the middle of band i-1, shrunk by the spread of their descendants so every pair of
    atoms still fits a band.
    """
    rep = validate_schedule(s, strict=True)
    if not rep.ok:
        raise ScheduleError(rep.message)
    if branching < 2:
        raise ScheduleError("branching must be at least 2")
    rng = np.random.default_rng(seed)
    N = s.N
    e1, e2 = s.eps1, s.eps2
    atom = atom_fraction * e2[N]
    reach = np.zeros(N + 2)  # distance from a parent to its farthest child
    spread = np.zeros(N + 2)  # distance from a level-i node to its farthest descendant atom
    spread[N] = atom
    gaps = np.zeros(N + 1)
    for level in range(N, 0, -1):
        lo = e1[level - 1] + 2.0 * spread[level]
        hi = e2[level - 1] - 2.0 * spread[level]
        factor = (branching - 1) if n == 1 else 1
        if not lo <= hi or (n == 1 and factor * lo > hi):
            raise ScheduleError(
                f"cannot place {branching} children at level {level}: need gaps in [{lo:.4g}, {hi:.4g}]"
            )
        if n == 1:
            g = 0.5 * (lo + hi / factor)
            reach[level] = 0.5 * factor * g
        else:
            g = 0.5 * (lo + hi)
            reach[level] = g * math.sqrt((branching - 1) / (2.0 * branching))
        gaps[level] = g
        spread[level - 1] = spread[level] + reach[level]
    pts = np.zeros((1, n))
    for level in range(1, N + 1):
        children = []
        for p in pts:
            offs = _sibling_offsets(branching, n, gaps[level], rng)
            children.append(p + offs)
        pts = np.concatenate(children)
    out = PrescribedStepSet(pts, float(atom), s)
    bad = find_step_violation(pts, s, atom)
    if bad is not None:
        raise ScheduleError(f"generated set violates the schedule at pair {bad}")
    return out


@dataclass(frozen=True)
class MeasureBracket:
    inner: float
    outer: float
    resolution: float


def brute_measure(aset: PrescribedStepSet, resolution):
    """Grid-count bracket of the Lebesgue measure of a union of balls."""
    a = aset.atom_radius
    if not (a > 0 and resolution < a / 4.0):
        raise ScheduleError(f"resolution {resolution} too coarse for atom radius {a} (need < radius/4)")
    h = float(resolution)
    n = aset.n
    outer_cells, inner_cells = set(), set()
    for c in aset.points:
        lo = np.floor((c - a) / h).astype(int) - 1
        hi = np.ceil((c + a) / h).astype(int) + 1
        axes = [np.arange(l, u + 1) for l, u in zip(lo, hi)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        centers = (grid + 0.5) * h
        # distance from the ball center to the nearest and farthest point of each cell
        delta = np.abs(centers - c)
        nearest = np.linalg.norm(np.maximum(delta - 0.5 * h, 0.0), axis=1)
        farthest = np.linalg.norm(delta + 0.5 * h, axis=1)
        for idx in map(tuple, grid[nearest <= a]):
            outer_cells.add(idx)
        for idx in map(tuple, grid[farthest <= a]):
            inner_cells.add(idx)
    vol = h ** n
    return MeasureBracket(len(inner_cells) * vol, len(outer_cells) * vol, h)


def _check_radii(radii):
    radii = [(float(a), float(b)) for a, b in radii]
    if not radii:
        raise ScheduleError("need at least one interval")
    if not math.isinf(radii[-1][1]):
        raise ScheduleError("the last interval must end at +infinity")
    if not radii[0][0] > 4:
        raise ScheduleError(f"R_0,2 = {radii[0][0]} must exceed 4")
    for i, (r2, r1) in enumerate(radii[:-1]):
        if r1 - r2 < 4:
            raise ScheduleError(f"interval {i} has length {r1 - r2:.4g} < 4")
        if radii[i + 1][0] - r1 < 4:
            raise ScheduleError(f"gap after interval {i} is {radii[i + 1][0] - r1:.4g} < 4")
    return radii


def schedule_from_radii(radii, eps, c, variant="rotation", C1=AUT_BAND_C1):
    """Bands built from radius intervals (R_i2, R_i1); the last R_N1 is +infinity."""
    radii = _check_radii(radii)
    bands = []
    for r2, r1 in radii:
        if variant == "rotation":
            a1 = 8.0 * c * eps * math.exp(-r1) if math.isfinite(r1) else 0.0
            a2 = 16.0 * c * eps * math.exp(-r2)
            if a2 > 1 or a1 > 1:
                raise ScheduleError(f"eps too large for radius {r2}: arcsin argument {a2:.4g} > 1")
            bands.append((2.0 * math.asin(a1), 2.0 * math.asin(a2)))
        elif variant == "automorphism":
            b1 = 4.0 / 3.0 * c * C1 * eps * math.exp(-r1) if math.isfinite(r1) else 0.0
            bands.append((b1, 16.0 * c * C1 * eps * math.exp(-r2)))
        else:
            raise ScheduleError(f"unknown variant {variant!r}")
    return StepSchedule(tuple(bands))


def iter_pairs(n):
    return itertools.combinations(range(n), 2)
