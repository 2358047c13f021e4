"""Leafwise uniformizations phi_x : D_R -> leaf, the eta map and Brody constants.

The leaf through x is parametrized by complex time.  The set of times t for
which the straight flow from x to t stays in the box and away from the
singular set is traced by radial shooting; it is star-shaped from 0 by
construction.  Its conformal map psi : D -> Omega with psi(0) = 0, psi'(0) > 0
gives phi_x(xi) = flow(x, psi(xi)), and eta(x) = psi'(0) |X(x)|.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .conformal import (
    ConformalMapError,
    ZipperMap,
    distance_to_polygon,
    polygon_contains,
    resample_polygon_graded,
    start_on_longest_edge,
    signed_area,
)
from .disk_geometry import DiskAutomorphism, HypRadius, compose
from .foliation_core import STATUS_OK, FoliatedChart, FoliationError, disk_distance
from .jets import Jet


class UniformizationError(RuntimeError):
    pass


class InfeasibleRadius(UniformizationError):
    def __init__(self, message, max_feasible_R):
        super().__init__(message)
        self.max_feasible_R = max_feasible_R


DEFAULT_T_MAX = 30.0


@dataclass(frozen=True)
class TimeDomain:
    """Star-shaped polygon of admissible complex times around 0."""

    base: np.ndarray
    angles: np.ndarray
    radii: np.ndarray
    status: np.ndarray
    t_max: float

    @property
    def vertices(self):
        return self.radii * np.exp(1j * self.angles)

    @property
    def capped(self):
        """Rays that reached t_max without meeting the box boundary or the guard."""
        return self.status == STATUS_OK

    @property
    def area(self):
        return signed_area(self.vertices)

    @property
    def inradius(self):
        return float(distance_to_polygon(self.vertices, np.array([0j]))[0])

    def contains(self, t):
        return polygon_contains(self.vertices, t)

    def cap_edges(self):
        v = self.vertices
        c = self.capped
        return [(v[i], v[(i + 1) % v.size]) for i in range(v.size) if c[i] and c[(i + 1) % v.size]]


def _shoot(chart: FoliatedChart, x, angles, t_max):
    starts = np.repeat(np.asarray(x, dtype=complex)[None, :], angles.size, axis=0)
    res = chart.flow_segment(starts, t_max * np.exp(1j * angles))
    return res.fraction * t_max, res.status


def chord_ok(chart, starts, times, tol):
    """True where ``times`` is reached admissibly, up to ``tol`` outside the box or inside the guard."""
    loose = replace(chart, trace_inset=chart.trace_inset - tol, guard_radius=max(chart.guard_radius - tol, 0.0),
                    isolation_radius=chart.isolation_radius)
    return np.asarray(loose.flow_segment(starts, times).ok)


def trace_time_domain(chart: FoliatedChart, x, R_target=None, n_rays=64, t_max=DEFAULT_T_MAX, refine_tol=0.05,
                      max_rays=1024, chord_tol=None):
    """Radial shooting from t = 0; rays are added where neighbours disagree.

    Two adjacent rays disagree when they stop for different reasons or their
    stop radii differ by more than ``refine_tol`` times the smaller one.  A second
    pass splits edges whose chord leaves the admissible set by more than
    ``chord_tol`` (default 1e-4 box sizes).
    """
    chord_tol = 1e-4 * chart.box.size if chord_tol is None else chord_tol
    x = np.asarray(x, dtype=complex)
    if chart.violation(x[None, :])[0] != STATUS_OK:
        raise FoliationError("base point is outside the box or inside the guard radius")
    angles = 2 * np.pi * np.arange(n_rays) / n_rays
    radii, status = _shoot(chart, x, angles, t_max)
    while angles.size < max_rays:
        nxt = np.roll(np.arange(angles.size), -1)
        dth = (np.roll(angles, -1) - angles) % (2 * np.pi)
        jump = np.abs(radii[nxt] - radii) > refine_tol * np.minimum(radii, radii[nxt]) + 1e-12
        need = (jump | (status[nxt] != status)) & (dth > 1e-4)
        if not np.any(need):
            break
        idx = np.flatnonzero(need)[: max_rays - angles.size]
        new = angles[idx] + 0.5 * dth[idx]
        r_new, s_new = _shoot(chart, x, new, t_max)
        angles = np.concatenate([angles, new])
        radii = np.concatenate([radii, r_new])
        status = np.concatenate([status, s_new])
        order = np.argsort(angles)
        angles, radii, status = angles[order], radii[order], status[order]
    # chords between adjacent rays may cut outside a curved boundary: split them
    probe = np.array([0.25, 0.5, 0.75])
    while angles.size < max_rays:
        nxt = np.roll(np.arange(angles.size), -1)
        dth = (np.roll(angles, -1) - angles) % (2 * np.pi)
        v = radii * np.exp(1j * angles)
        chord = v[:, None] + probe[None, :] * (v[nxt] - v)[:, None]
        starts = np.repeat(x[None, :], chord.size, axis=0)
        bad = ~chord_ok(chart, starts, chord.ravel(), chord_tol).reshape(chord.shape).all(axis=1)
        need = bad & (dth > 1e-4)
        if not np.any(need):
            break
        idx = np.flatnonzero(need)[: max_rays - angles.size]
        new = angles[idx] + 0.5 * dth[idx]
        r_new, s_new = _shoot(chart, x, new, t_max)
        angles = np.concatenate([angles, new])
        radii = np.concatenate([radii, r_new])
        status = np.concatenate([status, s_new])
        order = np.argsort(angles)
        angles, radii, status = angles[order], radii[order], status[order]
    usable = radii > 0
    if np.sum(usable) < 8:
        raise UniformizationError(f"only {int(np.sum(usable))} usable rays: the base point is trapped")
    return TimeDomain(x, angles, radii, status, float(t_max))


def uniformize(omega, spacing=None, interior=0j, check=True, tol=None, max_points=3000):
    """Conformal map of the polygon (TimeDomain or vertex array) onto the disk, with psi(0)=interior.

    Boundary points are spaced ``spacing`` apart near ``interior`` (default 1/200 of
    its distance to the boundary, coarsened to fit the budget) and proportionally further apart far away; the
    near spacing is enlarged if more than ``max_points`` points would be needed.
    The zipper boundary bulges by O(spacing^2) past convex corners, so the
    boundary self-test tolerance defaults to 3/4 of the largest spacing
    (sharp corners bulge by up to half a spacing).
    """
    verts = omega.vertices if isinstance(omega, TimeDomain) else np.asarray(omega, dtype=complex)
    if signed_area(verts) < 0:
        verts = verts[::-1]
    verts = start_on_longest_edge(verts)
    if not polygon_contains(verts, np.array([interior]))[0]:
        raise UniformizationError("base point is not inside the polygon")
    dist0 = float(distance_to_polygon(verts, np.array([interior]))[0])
    h0 = max(dist0 / 200.0, 1e-3) if spacing is None else spacing
    scale = 4.0 * dist0
    while True:
        pts = resample_polygon_graded(verts, h0, interior, scale)
        if pts.size <= max_points:
            break
        h0 *= 1.25
    keep = np.abs(np.diff(np.concatenate([pts, pts[:1]]))) > 1e-14
    pts = pts[keep]
    try:
        zm = ZipperMap(pts, interior=interior)
    except ConformalMapError as exc:
        raise UniformizationError(str(exc)) from exc
    if check:
        d = zm.derivative_at_center()
        if not (dist0 * (1 - 1e-9) <= d <= 4 * dist0 * (1 + 1e-9)):
            raise UniformizationError(f"psi'(0)={d:.6g} violates the Koebe bracket [{dist0:.6g}, {4 * dist0:.6g}]")
        res = zm.boundary_residual(n=2048)
        hmax = float(np.max(np.abs(np.diff(np.concatenate([pts, pts[:1]])))))
        if res > (0.75 * hmax if tol is None else tol):
            raise UniformizationError(f"boundary residual {res:.3g} above tolerance")
    return zm


@dataclass(frozen=True)
class LeafGrid:
    """phi_x sampled on a polar grid of D_R, radii equally spaced in hyperbolic radius."""

    R: np.ndarray
    angles: np.ndarray
    xi: np.ndarray
    points: np.ndarray
    error: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["R_index", "angle", "x_re", "x_im", "y_re", "y_im", "error_bound"])
            for i in range(self.points.shape[0]):
                for j in range(self.points.shape[1]):
                    p = self.points[i, j]
                    w.writerow([i, f"{self.angles[j]:.17g}", f"{p[0].real:.17g}", f"{p[0].imag:.17g}",
                                f"{p[1].real:.17g}", f"{p[1].imag:.17g}", f"{self.error[i, j]:.3g}"])


@dataclass(frozen=True)
class CircleJets:
    """Taylor jets (in xi) of the metric coordinates of phi_x at nodes of a circle."""

    r: float
    nodes: np.ndarray
    W: tuple

    def evaluate(self, xi, node_index):
        h = xi - self.nodes[node_index]
        return np.stack([_eval_at(self.W[j], node_index, h) for j in range(2)], axis=-1)


def _eval_at(jet, idx, h):
    acc = jet.c[-1][idx]
    for ck in reversed(jet.c[:-1]):
        acc = acc * h + ck[idx]
    return acc


class PlaqueMap:
    """Uniformization of a leaf that is a whole plaque of one box section.

    For X = (a, 0) the leaf through z is {z_1 + a t} x {z_2}, so its time domain
    is (S - z_1)/a for the section S and psi is read off the section's own
    conformal map F_S: psi(xi) = (F_S^{-1}(M(xi)) - z_1)/a with M a disk
    automorphism sending 0 to F_S(z_1).
    """

    def __init__(self, section: ZipperMap, z0, a):
        self.section = section
        self.z0 = complex(z0)
        self.a = complex(a)
        self.w0 = complex(section.to_disk(np.array([self.z0]))[0])
        self.u = 1.0 + 0j
        self.shift = 0j
        d = self._derivative()
        self.u = abs(d) / d
        self.shift = -complex(self.from_disk(np.zeros(1))[0])

    def _derivative(self):
        return complex(self.from_disk(Jet.variable(np.zeros(1), 1)).c[1][0])

    @property
    def n_maps(self):
        return self.section.n_maps

    def from_disk(self, xi):
        m = (xi * self.u + self.w0) / (xi * (self.u * np.conj(self.w0)) + 1.0)
        return (self.section.from_disk(m) - self.z0) * (1.0 / self.a) + self.shift

    def to_disk(self, t):
        w = self.section.to_disk(self.z0 + self.a * (np.asarray(t, dtype=complex) - self.shift))
        return (w - self.w0) / (1.0 - np.conj(self.w0) * w) / self.u

    def derivative_at_center(self):
        return float(self._derivative().real)


def _plaque_axis(chart: FoliatedChart):
    """(coordinate index, speed) when X is a constant field along one coordinate."""
    coef = chart._affine
    if coef is None or chart.singular_points:
        return None
    a1, b1, a2, b2 = coef
    if b1 == 0 and b2 == 0 and a2 == 0 and a1 != 0:
        return 0, a1
    if b1 == 0 and b2 == 0 and a1 == 0 and a2 != 0:
        return 1, a2
    return None


@dataclass(frozen=True)
class LeafUniformization:
    """phi_x = flow(x, psi(.)), optionally precomposed with a disk automorphism ``pre``.

    With ``pre`` set, the object describes phi_x o pre, which uniformizes the same
    leaf centred at phi_x(pre(0)).
    """

    chart: FoliatedChart = field(repr=False)
    x: np.ndarray
    omega: TimeDomain = field(repr=False)
    zipper: object = field(repr=False)
    cap_margin: float = 0.2
    pre: DiskAutomorphism = None

    @classmethod
    def build(cls, chart, x, n_rays=64, t_max=DEFAULT_T_MAX, spacing=None, cap_margin=0.2, refine_tol=0.05,
              exact_plaques=True):
        x = np.asarray(x, dtype=complex)
        omega = trace_time_domain(chart, x, n_rays=n_rays, t_max=t_max, refine_tol=refine_tol)
        axis = _plaque_axis(chart) if exact_plaques else None
        if axis is not None:
            j, a = axis
            zm = PlaqueMap(chart._sections[j], x[j], a)
        else:
            zm = uniformize(omega, spacing=spacing)
        return cls(chart, x, omega, zm, cap_margin)

    def recentred(self, a, theta=0.0):
        """The same leaf seen from phi(a): xi -> phi(tau_a(e^{i theta} xi))."""
        g = DiskAutomorphism(a, theta)
        return replace(self, pre=g if self.pre is None else compose(self.pre, g))

    @property
    def center(self):
        return self.points(np.zeros(1))[0]

    @property
    def psi_prime0(self):
        return self.zipper.derivative_at_center()

    @cached_property
    def eta(self):
        """|phi'(0)| in the ambient metric."""
        if self.pre is None:
            X = self.chart.field(self.x)
            return float(self.psi_prime0 * self.chart.tangent_norm(self.x, X))
        jx, jy = self.jets(np.zeros(1), 1)
        p = np.array([jx.c[0][0], jy.c[0][0]])
        v = np.array([jx.c[1][0], jy.c[1][0]])
        return float(self.chart.tangent_norm(p, v))

    def _pre(self, xi):
        return xi if self.pre is None else self.pre.apply(xi)

    def psi(self, xi):
        return self.zipper.from_disk(self._pre(np.asarray(xi, dtype=complex)))

    def points(self, xi):
        """phi_x(xi) in the chart."""
        xi = np.asarray(xi, dtype=complex)
        t = self.psi(xi.ravel())
        starts = np.repeat(self.x[None, :], t.size, axis=0)
        return self.chart.flow_to(starts, t).reshape(xi.shape + (2,))

    def coords(self, xi):
        """Metric coordinates of phi_x(xi)."""
        return self.chart.metric_coords(self.points(xi))

    def jets(self, xi, order=3):
        """Jets in xi of the chart coordinates of phi_x."""
        xi = np.asarray(xi, dtype=complex).ravel()
        tj = self.zipper.from_disk(self._pre(Jet.variable(xi, order)))
        if self.chart._affine is not None:
            return self.chart.closed_form_jet(self.x, tj)
        z = self.chart.flow_to(np.repeat(self.x[None, :], xi.size, axis=0), tj.c[0])
        xt, yt = self.chart.taylor_in_time(z, order)
        return xt.compose_after(tj), yt.compose_after(tj)

    def coord_jets(self, xi, order=3):
        return self.chart.metric_coords(self.jets(xi, order))

    def circle_jets(self, r, n_nodes, order=3):
        nodes = r * np.exp(2j * np.pi * np.arange(n_nodes) / n_nodes)
        W = self.coord_jets(nodes, order)
        return CircleJets(float(r), nodes, tuple(W))

    @cached_property
    def max_feasible_R(self):
        """Hyperbolic radius of the closest point lying within cap_margin * t_max of a truncation cap.

        Caps are where rays reached t_max; beyond this radius the traced patch no
        longer stands in for the leaf.
        """
        om = self.omega
        if not np.any(om.capped):
            return math.inf
        margin = self.cap_margin * om.t_max
        near = om.radii > om.t_max - 1.5 * margin
        q = (om.t_max - margin) * np.exp(1j * om.angles[near])
        q = q[om.contains(q)]
        if q.size == 0:
            return math.inf
        w = self.zipper.to_disk(q)
        c = 0j if self.pre is None else self.pre.zeta
        return float(np.min(disk_distance(w, c)))

    def check_R(self, R):
        if R > self.max_feasible_R:
            raise InfeasibleRadius(
                f"R={R} exceeds the traced patch (max feasible R = {self.max_feasible_R:.3g})", self.max_feasible_R
            )

    def leaf_map(self, R, n_radii=16, n_angles=None, grid_const=4.0):
        """phi_x on a polar grid of D_R."""
        self.check_R(R)
        Rs = np.linspace(0.0, R, n_radii)
        if n_angles is None:
            n_angles = int(max(16, math.ceil(grid_const * math.exp(R))))
        ang = 2 * np.pi * np.arange(n_angles) / n_angles
        r = np.array([HypRadius.from_R(v).r for v in Rs])
        xi = r[:, None] * np.exp(1j * ang)[None, :]
        pts = self.points(xi)
        err = self.chart.rtol * (1.0 + np.linalg.norm(pts, axis=-1))
        return LeafGrid(Rs, ang, xi, pts, err)


def eta(chart, x, **kw):
    return LeafUniformization.build(chart, x, **kw).eta


@dataclass(frozen=True)
class BrodyEstimate:
    c0: float
    etas: np.ndarray
    points: np.ndarray
    top_decile: np.ndarray


def brody_constant(chart: FoliatedChart, sample_count=32, seed=0, margin=None, include_center=True, **kw):
    """Empirical sup of eta over uniformly sampled non-guard points of the box."""
    rng = np.random.default_rng(seed)
    margin = 0.02 * chart.box.size if margin is None else margin
    pts = chart.box.sample(sample_count, rng, margin=margin)
    if include_center:
        pts = np.concatenate([chart.box.center[None, :], pts])
    keep = chart.distance_to_singular(pts) > 10 * chart.guard_radius
    pts = pts[keep]
    vals = []
    used = []
    for p in pts:
        try:
            vals.append(eta(chart, p, **kw))
            used.append(p)
        except (UniformizationError, FoliationError):
            continue
    vals = np.array(vals)
    used = np.array(used)
    order = np.argsort(vals)[::-1]
    k = max(1, int(math.ceil(0.1 * vals.size)))
    return BrodyEstimate(float(vals.max()), vals, used, used[order[:k]])
