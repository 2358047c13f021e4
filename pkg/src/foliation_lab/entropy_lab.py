"""Bowen distances, covering numbers, entropy slopes, admissible sets and singular schedules.

Every sup over a circle is bracketed: the maximum over a grid is a lower bound
and the grid maximum plus a Lipschitz slack (measured speed times half the grid
spacing) plus the measured Taylor error is an upper bound.  The sup over the
closed disk D_R is taken on its boundary circle together with the center.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .disk_geometry import DiskAutomorphism, HypRadius, log_kernel_mass, rotation_displacement
from .foliation_core import STATUS_EXIT, FoliatedChart, FoliationError, build_flow_box
from .harmonic_measure import WeightedPointMeasure, disintegrate, mass_near_singular, sample_m_xR
from .prescribed_steps import StepSchedule, find_step_violation, schedule_from_radii, validate_schedule
from .uniformization import LeafUniformization, TimeDomain, UniformizationError, trace_time_domain

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class EntropyError(RuntimeError):
    pass


class SeparationError(EntropyError):
    pass


class MassStarvation(UserWarning):
    pass


@dataclass(frozen=True)
class BowenConfig:
    """Resolution of one Bowen-distance evaluation at time R and scale eps.

    ``width_fraction`` sets the sup-bracket width to that fraction of eps;
    ``theta_grid_count`` is the size of the coarse scan over [-pi, pi) and the
    local refinement stops once the theta step is below eps / (4 c0 e^R).
    """

    R: float
    eps: float
    theta_grid_count: int = 256
    node_spacing: float = 0.25
    order: int = 3
    width_fraction: float = 1.0 / 6.0
    c0: float = None

    def __post_init__(self):
        if not (self.R > 0 and self.eps > 0):
            raise ValueError("R and eps must be positive")

    def theta_resolution(self, c0):
        return self.eps / (4.0 * c0 * math.exp(self.R))


@dataclass(frozen=True)
class Bracket:
    lower: float
    upper: float
    value: float = math.nan

    def __iter__(self):
        return iter((self.lower, self.upper))

    @property
    def width(self):
        return self.upper - self.lower

    @property
    def mid(self):
        return 0.5 * (self.lower + self.upper)

    def contains(self, v):
        return self.lower <= v <= self.upper


def _nan_to_inf(d):
    return np.where(np.isnan(d), np.inf, d)


class CircleSampler:
    """Metric coordinates of a leaf view near the circle |xi| = r(R), via Taylor jets at nodes.

    Nodes are spaced ``node_spacing`` apart in the Poincare metric.  A point near
    the circle is evaluated by the Taylor polynomial of its nearest node; points
    further than half of 1 - r from that node fall back to direct evaluation.
    The Taylor error is measured against direct evaluation on random points of
    the annulus of hyperbolic half-width ``check_band`` and doubled.
    """

    def __init__(self, view: LeafUniformization, R, node_spacing=0.25, order=3, n_check=128, check_band=0.3,
                 seed=0):
        view.check_R(R)
        self.view = view
        self.chart = view.chart
        self.R = float(R)
        hr = HypRadius.from_R(R)
        self.r = hr.r
        self.one_minus_r = hr.one_minus_r
        n = max(64, int(math.ceil(2.0 * math.pi * math.sinh(R) / node_spacing)))
        self.n_nodes = n
        self.step = 2.0 * math.pi / n
        self.nodes = self.r * np.exp(1j * self.step * np.arange(n))
        jets = view.coord_jets(self.nodes, order)
        self.C = np.array([[jets[j].c[k] for k in range(order + 1)] for j in range(2)])
        if not np.all(np.isfinite(self.C)):
            raise UniformizationError(f"the circle of radius R={R} leaves the metric chart")
        w0 = self.C[:, 0, :].T
        dw = (self.C[:, 1, :] * (1j * self.nodes)).T
        self.speed = np.asarray(self.chart.coord_tangent_norm(w0, dw), dtype=float)
        self.center_coords = view.coords(np.zeros(1))[0]
        rng = np.random.default_rng(seed)
        Rs = np.clip(R + check_band * rng.uniform(-1, 1, n_check), 1e-6, None)
        q = np.tanh(Rs / 2.0) * np.exp(2j * np.pi * rng.uniform(size=n_check))
        exact = view.coords(q)
        approx = self.coords(q)
        err = _nan_to_inf(self.chart.coord_distance(approx, exact))
        self.taylor_error = float(2.0 * np.max(err))
        self._fine = {}
        self._points = {}

    @property
    def lipschitz(self):
        """Speed bound per unit angle along the circle (max over nodes, 25% margin)."""
        return 1.25 * float(np.max(self.speed))

    def coords(self, w):
        w = np.asarray(w, dtype=complex)
        flat = w.ravel()
        k = np.rint(np.angle(flat) / self.step).astype(np.int64) % self.n_nodes
        h = flat - self.nodes[k]
        cols = []
        for j in range(2):
            acc = self.C[j, -1][k]
            for kk in range(self.C.shape[1] - 2, -1, -1):
                acc *= h
                acc += self.C[j, kk][k]
            cols.append(acc)
        out = np.stack(cols, axis=-1)
        far = np.abs(h) > 0.5 * self.one_minus_r
        if np.any(far):
            out[far] = self.view.coords(flat[far])
        return out.reshape(w.shape + (2,))

    def point_coords(self, w):
        """Exact coordinates of one point, cached (the image of the center repeats across theta)."""
        w = complex(w)
        if w not in self._points:
            if len(self._points) > 4096:
                self._points.clear()
            self._points[w] = self.view.coords(np.array([w]))[0]
        return self._points[w]

    def fine(self, n):
        """Grid of n points on the circle with their coordinates (cached)."""
        if n not in self._fine:
            xi = self.r * np.exp(2j * np.pi * np.arange(n) / n)
            self._fine[n] = (xi, self.coords(xi))
        return self._fine[n]

    def grid_size(self, other, width):
        """Fine grid size giving a Lipschitz slack of width/2."""
        L = self.lipschitz + other.lipschitz
        return int(max(256, math.ceil(2.0 * math.pi * L / width)))


def _max_distance(chart, A, B):
    """max over rows of the metric distance, transforming only the maximum."""
    if chart.metric == "euclidean":
        q = np.sum((A.real - B.real) ** 2 + (A.imag - B.imag) ** 2, axis=-1)
        m = float(np.max(q))
        return math.sqrt(m) if np.isfinite(m) else math.inf
    da = 1.0 - (A.real ** 2 + A.imag ** 2)
    db = 1.0 - (B.real ** 2 + B.imag ** 2)
    diff = A - B
    with np.errstate(invalid="ignore", divide="ignore"):
        q = (diff.real ** 2 + diff.imag ** 2) / (da * db)
    q = np.where((da > 0) & (db > 0), q, np.inf)
    m = float(np.nanmax(q)) if not np.any(np.isnan(q)) else math.inf
    return 2.0 * math.asinh(math.sqrt(m)) if np.isfinite(m) else math.inf


def circle_sup(sa: CircleSampler, sb: CircleSampler, g: DiskAutomorphism, n, sub=None):
    """Bracket for sup over D_R of d(V_a(xi), V_b(g xi)) from an n-point circle grid.

    With ``sub`` only every sub-th grid point is used (lower bound only is sharp).
    """
    xi, A = sa.fine(n)
    if sub:
        xi = xi[::sub]
        A = A[::sub]
    B = sb.coords(g.apply(xi))
    top = _max_distance(sa.chart, A, B)
    c = _nan_to_inf(sa.chart.coord_distance(sa.center_coords, sb.point_coords(g.zeta)))
    top = float(max(top, c))
    err = sa.taylor_error + sb.taylor_error
    slack = (sa.lipschitz + sb.lipschitz) * math.pi / (xi.size if sub else n)
    return Bracket(max(0.0, top - err), top + slack + err, top)


def _golden_min(f, a, b, tol, fa=None):
    """Golden-section search of a scalar function on [a, b]; returns (x, f(x))."""
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


@dataclass(frozen=True)
class BowenResult:
    lower: float
    upper: float
    theta: float
    n_grid: int

    def __iter__(self):
        return iter((self.lower, self.upper))


def inf_over_theta(sa, sb, cfg: BowenConfig, pre=None, window=None, candidates=3, stop_below=None):
    """inf over theta of sup_{D_R} d(V_a(xi), V_b(pre r_theta xi)), bracketed.

    A coarse scan on a subsampled grid picks candidate basins; each is refined by
    golden-section search, first on the subsample and then on the full grid,
    down to the theta resolution of ``cfg``.  The reported lower bound is the
    refined basin minimum less the theta slack; the global minimum is trusted to
    lie in one of the scanned basins.
    """
    pre = DiskAutomorphism(0j, 0.0) if pre is None else pre
    n = sa.grid_size(sb, cfg.width_fraction * cfg.eps)
    sub = max(1, n // 4096)
    c0 = max(sa.lipschitz, sb.lipschitz) / max(math.sinh(cfg.R), 1e-12) * 2.0
    c0 = cfg.c0 if cfg.c0 is not None else c0
    res = cfg.theta_resolution(c0)
    L_theta = sb.lipschitz

    def g(t):
        return DiskAutomorphism(pre.zeta, float(pre.theta + t))

    def f_sub(t):
        return circle_sup(sa, sb, g(t), n, sub).lower

    lo, hi = (-math.pi, math.pi) if window is None else window
    M = cfg.theta_grid_count
    grid = lo + (hi - lo) * (np.arange(M) + 0.5) / M
    vals = np.array([f_sub(t) for t in grid])
    if window is None:
        left, right = np.roll(vals, 1), np.roll(vals, -1)
    else:
        left = np.concatenate([[np.inf], vals[:-1]])
        right = np.concatenate([vals[1:], [np.inf]])
    minima = np.flatnonzero((vals <= left) & (vals <= right))
    minima = minima[np.argsort(vals[minima])][:candidates]
    half = (hi - lo) / M
    best = None
    lowest = math.inf
    for j in minima:
        t0 = grid[j]
        t1, _ = _golden_min(f_sub, t0 - half, t0 + half, max(res, half * 1e-3))
        fine_half = max(8.0 * res, 4.0 * math.pi / (n / sub) / max(1.0, 1.0))
        fine_half = min(fine_half, half)
        t2, _ = _golden_min(lambda t: circle_sup(sa, sb, g(t), n).lower, t1 - fine_half, t1 + fine_half, res)
        br = circle_sup(sa, sb, g(t2), n)
        lowest = min(lowest, br.lower - 0.5 * L_theta * res)
        if best is None or br.upper < best[1].upper:
            best = (t2, br)
        if stop_below is not None and br.upper < stop_below:
            break
    return BowenResult(max(0.0, lowest), best[1].upper, best[0], n)


def bowen_distance(x, y, cfg: BowenConfig, samplers=None):
    """d_R(x, y) = inf_theta sup_{D_R} dist(phi_x(xi), phi_y(e^{i theta} xi)) as a (lower, upper) bracket.

    ``x`` and ``y`` are leaf views (LeafUniformization) or CircleSamplers already
    built at cfg.R.
    """
    sa = x if isinstance(x, CircleSampler) else CircleSampler(x, cfg.R, cfg.node_spacing, cfg.order)
    sb = y if isinstance(y, CircleSampler) else CircleSampler(y, cfg.R, cfg.node_spacing, cfg.order)
    return inf_over_theta(sa, sb, cfg)


# ---- product-model oracle ---------------------------------------------------


def _circle_sup_closed(r, g: DiskAutomorphism, n=4096):
    """sup over |xi| = r of the Poincare displacement of g, by a grid plus local refinement."""
    ang = 2 * np.pi * np.arange(n) / n
    xi = r * np.exp(1j * ang)
    d = _disk_dist(xi, g.apply(xi))
    k = int(np.argmax(d))
    f = lambda a: -float(_disk_dist(r * np.exp(1j * a), g.apply(r * np.exp(1j * a))))
    a, v = _golden_min(f, ang[k] - 2 * np.pi / n, ang[k] + 2 * np.pi / n, 1e-12)
    return max(float(d[k]), -v)


def _disk_dist(u, v):
    u = np.asarray(u, dtype=complex)
    v = np.asarray(v, dtype=complex)
    return 2.0 * np.arcsinh(np.abs(u - v) / np.sqrt((1 - np.abs(u) ** 2) * (1 - np.abs(v) ** 2)))


def product_bowen_distance(a1, w1, a2, w2, R, n_theta=721):
    """Closed-form d_R on the product preset with the Kobayashi metric.

    Points are given by their plaque coordinate a (disk coordinate in the
    uniformization of one fixed plaque) and transversal disk coordinate w.  The
    leaf part reduces to inf over theta of the sup of the Poincare displacement
    of tau_{a1}^{-1} tau_{a2} r_theta on |xi| = r, the transversal part to
    d_D(w1, w2).
    """
    r = HypRadius.from_R(R).r
    h = _mobius_between(a1, a2)
    base = DiskAutomorphism(h.zeta, h.theta)
    f = lambda t: _circle_sup_closed(r, DiskAutomorphism(base.zeta, float(base.theta + t)), n=512)
    grid = np.linspace(-math.pi, math.pi, n_theta, endpoint=False)
    vals = np.array([f(t) for t in grid])
    j = int(np.argmin(vals))
    t, v = _golden_min(f, grid[j] - 2 * math.pi / n_theta, grid[j] + 2 * math.pi / n_theta, 1e-10)
    leaf = min(v, float(vals[j]))
    return max(leaf, float(_disk_dist(w1, w2)))


def _mobius_between(a1, a2):
    """Normal form tau_zeta r_theta of tau_{a1}^{-1} tau_{a2}."""
    from .disk_geometry import compose

    inv = DiskAutomorphism(-complex(a1), 0.0)
    return compose(inv, DiskAutomorphism(complex(a2), 0.0))


# ---- covering numbers and slopes --------------------------------------------


@dataclass(frozen=True)
class CoverCount:
    upper: int
    lower: int
    centers: tuple


def covering_number(Y, R, eps, distance):
    """Greedy (R, eps)-cover of the sample Y.

    ``distance(i, js, R)`` returns (lower, upper) arrays of Bowen brackets from
    Y[i] to the points Y[js].  The greedy cover uses upper brackets, so every
    point is within eps of a chosen center and the count bounds N(Y, R, eps) from
    above.  A greedy set that is 2 eps-separated in lower brackets meets each
    eps-ball at most once, so its size bounds N(Y, R, eps) from below.
    """
    n = len(Y)
    if n == 0:
        return CoverCount(0, 0, ())
    covered = np.zeros(n, dtype=bool)
    centers = []
    for i in range(n):
        if covered[i]:
            continue
        centers.append(i)
        js = np.flatnonzero(~covered)
        lo, up = distance(i, js, R)
        covered[js[np.asarray(up) < eps]] = True
        covered[i] = True
    sep = []
    for i in range(n):
        if not sep:
            sep.append(i)
            continue
        lo, up = distance(i, np.array(sep), R)
        if np.all(np.asarray(lo) >= 2.0 * eps):
            sep.append(i)
    return CoverCount(len(centers), len(sep), tuple(centers))


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    stderr: float


def fit_slope(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    dof = max(1, x.size - 2)
    sxx = float(np.sum((x - x.mean()) ** 2))
    se = math.sqrt(ss_res / dof / sxx) if sxx > 0 else math.inf
    return SlopeFit(float(coef[0]), float(coef[1]), r2, se)


@dataclass(frozen=True)
class SlopeBracket:
    lower: float
    upper: float
    fit_lower: SlopeFit
    fit_upper: SlopeFit

    def __iter__(self):
        return iter((self.lower, self.upper))


def entropy_slope(counts):
    """Least-squares slopes of log N against R for the upper and the lower counts.

    ``counts`` is a list of (R, N_upper, N_lower).  Returns (h_lower, h_upper) with
    the regression diagnostics.
    """
    if len({c[0] for c in counts}) < 4:
        raise EntropyError("entropy_slope needs at least 4 distinct R values")
    R = np.array([c[0] for c in counts], dtype=float)
    up = np.log(np.array([c[1] for c in counts], dtype=float))
    lo = np.log(np.array([c[2] for c in counts], dtype=float))
    fu = fit_slope(R, up)
    fl = fit_slope(R, lo)
    return SlopeBracket(min(fu.slope, fl.slope), max(fu.slope, fl.slope), fl, fu)


# ---- admissible sets -----------------------------------------------------------


def _first_crossing(f, x0, level, x_max, grow=2.0, max_steps=60):
    """Smallest doubling step x with f(x) >= level, starting from x0 (f(0) < level assumed)."""
    lo, x = 0.0, x0
    for _ in range(max_steps):
        x = min(x, x_max)
        if f(x) >= level:
            return lo, x
        if x >= x_max:
            return x, math.inf
        lo, x = x, x * grow
    return lo, math.inf


def _root(f, level, lo, hi, rtol=1e-4):
    """Boundary between f < level (at lo) and f >= level (at hi) by Brent's method."""
    from scipy.optimize import brentq

    if not math.isfinite(hi):
        return lo
    flo, fhi = f(lo) - level, f(hi) - level
    if flo >= 0:
        return lo
    if fhi < 0:
        return hi
    return brentq(lambda x: f(x) - level, lo, hi, xtol=rtol * hi, rtol=1e-10)


@dataclass(frozen=True)
class AdmissibleMeasure:
    """Lebesgue measure of an admissible set: inner <= true <= outer (up to quadrature error)."""

    R: float
    eps: float
    inner: float
    outer: float
    estimate: float
    error: float = 0.0
    extra_components: int = 0
    n_grid: int = 0
    rho_inner: np.ndarray = field(default=None, repr=False, compare=False)

    def __iter__(self):
        return iter((self.inner, self.outer))


def brody_bound(sampler: CircleSampler):
    """Measured sup of eta over the center and the circle (eta = 2 speed / sinh R)."""
    return float(max(sampler.view.eta, 2.0 * np.max(sampler.speed) / math.sinh(sampler.R)))


def rotation_lower_bound(c0, eps, R):
    """c0^-1 (eps/2) e^-R."""
    return (eps / 2.0) * math.exp(-R) / c0


def automorphism_lower_bound(c0, eps, R):
    """Volume 2 pi s^3 of {|zeta| <= s, |theta| <= s} with s sufficient for admissibility.

    For ||(zeta, theta)||_inf <= s and |xi| <= r the displacement ratio of
    tau_zeta r_theta is at most 3s / ((1 - r^2) - 3s); with ambient speed at most
    c0/2 per unit of Poincare length the condition 2 atanh(ratio) < 2 eps / c0
    gives s = T (1 - r^2) / (3 (1 + T)), T = tanh(eps / c0).
    """
    T = math.tanh(eps / c0)
    one_minus_r2 = 1.0 / math.cosh(R / 2.0) ** 2
    s = T * one_minus_r2 / (3.0 * (1.0 + T))
    return 2.0 * math.pi * s ** 3


def rotation_admissible_measure(y, R, eps, cfg: BowenConfig = None, scan=256, rtol=1e-7):
    """Leb{theta : sup_{D_R} d(phi_y o r_theta, phi_y) < eps} as an inner/outer bracket.

    The boundary on each side of 0 is found by Brent's method for the upper
    bracket (inner set), the lower bracket (outer set) and the grid value
    (estimate).  A scan of the rest of the circle of angles counts extra
    components, whose scan cells are added to the outer measure.
    """
    cfg = cfg or BowenConfig(R, eps)
    S = y if isinstance(y, CircleSampler) else CircleSampler(y, R, cfg.node_spacing, cfg.order)
    n = S.grid_size(S, cfg.width_fraction * eps)
    cache = {}

    def F(t):
        if t not in cache:
            cache[t] = circle_sup(S, S, DiskAutomorphism(0j, float(t)), n)
        return cache[t]

    speed = max(float(np.max(S.speed)), 1e-300)
    widths = {"inner": 0.0, "outer": 0.0, "estimate": 0.0}
    reach = 0.0
    for sign in (1.0, -1.0):
        lo, hi = _first_crossing(lambda t: F(sign * t).lower, 0.5 * eps / speed, eps, math.pi)
        top = hi if math.isfinite(hi) else math.pi
        widths["outer"] += _root(lambda t: F(sign * t).lower, eps, lo, hi, rtol)
        widths["estimate"] += _root(lambda t: F(sign * t).value, eps, 0.0, top, rtol)
        widths["inner"] += _root(lambda t: F(sign * t).upper, eps, 0.0, top, rtol)
        reach = max(reach, hi if math.isfinite(hi) else math.pi)
    grid = np.linspace(-math.pi, math.pi, scan, endpoint=False)
    grid = grid[np.abs(grid) > reach]
    sub = max(1, n // 4096)
    extra = sum(1 for t in grid if circle_sup(S, S, DiskAutomorphism(0j, float(t)), n, sub).lower < eps)
    outer = widths["outer"] + extra * 2 * math.pi / scan
    return AdmissibleMeasure(R, eps, widths["inner"], outer, widths["estimate"], 0.0, extra, n)


def fibonacci_sphere(n, seed=0):
    """n quasi-uniform unit vectors, randomly rotated by the seed."""
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    phi = math.pi * (1 + math.sqrt(5.0)) * k
    rad = np.sqrt(1 - z * z)
    v = np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(3, 3)))
    return v @ q.T


def automorphism_admissible_measure(y, R, eps, r0=1.0, cfg: BowenConfig = None, n_dir=24, seed=0, directions=None):
    """Leb{(zeta, theta) in D_r0 x [-pi, pi] : sup_{D_R} d(phi_y o tau_zeta o r_theta, phi_y) < eps}.

    The set is star-shaped about (0, 0) at the scales involved; along n_dir
    quasi-uniform directions u of (Re zeta, Im zeta, theta) the boundary radius
    rho(u) is located for the inner and outer brackets, and the volume is
    (4 pi / 3) mean(rho^3).  ``error`` is the Monte-Carlo standard error of the
    direction average.  ``directions`` overrides the quasi-uniform unit vectors.
    """
    cfg = cfg or BowenConfig(R, eps)
    S = y if isinstance(y, CircleSampler) else CircleSampler(y, R, cfg.node_spacing, cfg.order)
    n = S.grid_size(S, cfg.width_fraction * eps)
    U = fibonacci_sphere(n_dir, seed) if directions is None else np.asarray(directions, dtype=float)
    n_dir = len(U)
    speed = max(float(np.max(S.speed)), 1e-300)
    rho_in = np.zeros(n_dir)
    rho_out = np.zeros(n_dir)
    for k, u in enumerate(U):
        cache = {}

        def F(s, u=u, cache=cache):
            if s not in cache:
                zeta = s * complex(u[0], u[1])
                cache[s] = circle_sup(S, S, DiskAutomorphism(zeta, float(s * u[2])), n)
            return cache[s]

        s_max = min(math.pi / max(abs(u[2]), 1e-12), 0.999 * r0 / max(math.hypot(u[0], u[1]), 1e-12))
        lo, hi = _first_crossing(lambda s: F(s).lower, 0.5 * eps / speed, eps, s_max)
        rho_out[k] = _root(lambda s: F(s).lower, eps, lo, hi)
        rho_in[k] = _root(lambda s: F(s).upper, eps, 0.0, hi if math.isfinite(hi) else s_max)
    vol_in = 4.0 * math.pi / 3.0 * float(np.mean(rho_in ** 3))
    vol_out = 4.0 * math.pi / 3.0 * float(np.mean(rho_out ** 3))
    mid = 0.5 * (rho_in ** 3 + rho_out ** 3)
    err = 4.0 * math.pi / 3.0 * float(np.std(mid, ddof=1) / math.sqrt(n_dir)) if n_dir > 1 else math.inf
    return AdmissibleMeasure(R, eps, vol_in, vol_out, 0.5 * (vol_in + vol_out), err, 0, n, rho_in)


@dataclass(frozen=True)
class ScalingFit:
    R: np.ndarray
    inner: np.ndarray
    outer: np.ndarray
    fit_inner: SlopeFit
    fit_outer: SlopeFit

    @property
    def slope(self):
        return 0.5 * (self.fit_inner.slope + self.fit_outer.slope)

    @property
    def r2(self):
        return min(self.fit_inner.r2, self.fit_outer.r2)


def measure_scaling(measures):
    """Slopes of log(inner) and log(outer) against R."""
    R = np.array([m.R for m in measures])
    inner = np.array([m.inner for m in measures])
    outer = np.array([m.outer for m in measures])
    return ScalingFit(R, inner, outer, fit_slope(R, np.log(inner)), fit_slope(R, np.log(outer)))


# ---- Bowen-ball masses -------------------------------------------------------


class _ThetaTracker:
    """inf over theta of the sup-bracket for pre = tau_a, warm-started along a ray."""

    def __init__(self, S: CircleSampler, cfg: BowenConfig, halfwidth=32):
        self.S = S
        self.cfg = cfg
        self.theta = None
        self.halfwidth = halfwidth
        self.res = cfg.theta_resolution(cfg.c0 if cfg.c0 is not None else 2.0 * S.lipschitz / math.sinh(S.R))

    def __call__(self, a):
        pre = DiskAutomorphism(complex(a), 0.0)
        if self.theta is None:
            out = inf_over_theta(self.S, self.S, self.cfg, pre=pre)
            self.theta = out.theta
            return out
        S, n = self.S, self.S.grid_size(self.S, self.cfg.width_fraction * self.cfg.eps)

        def F(t):
            return circle_sup(S, S, DiskAutomorphism(pre.zeta, float(t)), n)

        w = max(self.halfwidth * self.res, 0.25 * abs(self.theta))
        c = self.theta
        for _ in range(8):
            t, _ = _golden_min(lambda t: F(t).lower, c - w, c + w, self.res)
            if abs(t - c) < 0.9 * w:
                break
            c = t
        br = F(t)
        self.theta = t
        return BowenResult(max(0.0, br.lower - 0.5 * S.lipschitz * self.res), br.upper, t, n)


@dataclass(frozen=True)
class BallProfile:
    """Boundary radii of the Bowen ball in the disk of a leaf view, along n directions.

    ``inner`` radii lie inside the ball (upper brackets below eps), ``outer``
    radii bound it from outside along each ray (lower brackets reach eps).
    """

    R: float
    eps: float
    phi: np.ndarray
    inner: np.ndarray
    outer: np.ndarray


def bowen_ball_profile(S: CircleSampler, eps, n_dir=12, cfg: BowenConfig = None, rtol=1e-3):
    """Radial boundary of {a : d_R(V(0), V(a)) < eps} for the leaf view V of the sampler.

    The ball is taken star-shaped about 0 in the disk coordinate a; the leaf
    point V(a) is uniformized by V o tau_a, so the distance is the inf over
    theta of sup_{D_R} d(V(xi), V(tau_a(e^{i theta} xi))).
    """
    cfg = cfg or BowenConfig(S.R, eps)
    phi = 2.0 * math.pi * np.arange(n_dir) / n_dir
    speed = max(float(np.max(S.speed)), 1e-300)
    inner = np.zeros(n_dir)
    outer = np.zeros(n_dir)
    s_max = 1.0 - 1e-9
    for k, p in enumerate(phi):
        u = complex(math.cos(p), math.sin(p))
        tracker = _ThetaTracker(S, cfg)
        cache = {}

        def D(s, u=u, cache=cache, tracker=tracker):
            if s not in cache:
                cache[s] = tracker(s * u)
            return cache[s]

        lo, hi = _first_crossing(lambda s: D(s).lower, 0.5 * eps / speed, eps, s_max)
        outer[k] = _root(lambda s: D(s).lower, eps, lo, hi, rtol)
        top = outer[k] if outer[k] > 0 else s_max
        lo_in = 0.8 * top
        while lo_in > 1e-3 * top and D(lo_in).upper >= eps:
            lo_in *= 0.8
        inner[k] = _root(lambda s: D(s).upper, eps, lo_in, top, rtol) if lo_in > 1e-3 * top else 0.0
    return BallProfile(S.R, eps, phi, inner, outer)


def _radial_weight_integral(radii, phi, zeta1, r_max, n_gauss):
    """sum over directions of (2 pi / n) int_0^rho log+(r_max / |tau_zeta1(s e^{i phi})|) 4 s / (1 - s^2)^2 ds."""
    x, w = np.polynomial.legendre.leggauss(n_gauss)
    g = DiskAutomorphism(complex(zeta1), 0.0)
    vals = np.zeros(len(phi))
    for k, (rho, p) in enumerate(zip(radii, phi)):
        if rho <= 0:
            continue
        s = 0.5 * rho * (x + 1.0)
        z = np.abs(g.apply(s * np.exp(1j * p)))
        with np.errstate(divide="ignore"):
            f = np.maximum(np.log(r_max / z), 0.0) * 4.0 * s / (1.0 - s * s) ** 2
        vals[k] = 0.5 * rho * float(np.dot(w, f))
    return vals * (2.0 * math.pi / len(phi))


@dataclass(frozen=True)
class BallMass:
    """m_{x,R_max}(B_R(y, eps)) bracketed by the inner/outer profiles and an angular-quadrature error."""

    R: float
    eps: float
    inner: float
    outer: float
    angular_error: float
    n_nodes: int
    profile: BallProfile = field(repr=False, default=None)

    @property
    def lower(self):
        return max(0.0, self.inner - self.angular_error)

    @property
    def upper(self):
        return self.outer + self.angular_error


def ball_mass(leaf: LeafUniformization, zeta1, R, eps, R_max, n_dir=12, n_gauss=16, cfg: BowenConfig = None,
              sampler: CircleSampler = None):
    """Mass of the Bowen ball B_R(phi_x(zeta1), eps) under m_{x,R_max}, by plaque quadrature.

    The ball is assumed to meet the leaf only in the sheet through the center
    (the disk coordinate is injective on D_{R_max}); its mass is the weighted
    Poincare area of the star-shaped region found by ``bowen_ball_profile``.
    The angular error is the difference between the n_dir rule and its every
    other direction sub-rule.
    """
    view = leaf.recentred(complex(zeta1))
    S = sampler or CircleSampler(view, R)
    prof = bowen_ball_profile(S, eps, n_dir, cfg)
    r_max = HypRadius.from_R(R_max).r
    M = log_kernel_mass(R_max)
    vin = _radial_weight_integral(prof.inner, prof.phi, zeta1, r_max, n_gauss) / M
    vout = _radial_weight_integral(prof.outer, prof.phi, zeta1, r_max, n_gauss) / M
    half_in = 2.0 * float(np.sum(vin[::2]))
    half_out = 2.0 * float(np.sum(vout[::2]))
    ang = max(abs(half_in - np.sum(vin)), abs(half_out - np.sum(vout)))
    return BallMass(float(R), float(eps), float(np.sum(vin)), float(np.sum(vout)), float(ang), n_dir * n_gauss,
                    prof)


def ball_mass_by_count(leaf: LeafUniformization, mu: WeightedPointMeasure, zeta1, R, eps, cascade=(0.5, 1.0),
                       min_atoms=100, theta_grid_count=64):
    """Bracket of mu(B_R(phi_x(zeta1), eps)) by deciding membership atom by atom.

    Atoms must carry their disk coordinates (mu.zeta).  Candidates are first
    pruned by the ambient distance at the center, then by a cascade of Bowen
    distances at smaller times (d_R is nondecreasing in R).  Returns a
    BallMass whose angular_error holds the binomial standard error of the
    upper count.
    """
    if mu.zeta is None:
        raise EntropyError("atom counting needs the disk coordinates of the atoms")
    chart = leaf.chart
    view = leaf.recentred(complex(zeta1))
    x = view.center
    d0 = _nan_to_inf(chart.distance(mu.points, x[None, :]))
    cand = np.flatnonzero(d0 < eps)
    inv = DiskAutomorphism(complex(zeta1), 0.0).inverse()
    a_all = inv.apply(mu.zeta[cand])
    levels = [t for t in cascade if t < R] + [R]
    samplers = {t: CircleSampler(view, t) for t in levels}
    alive = np.ones(cand.size, dtype=bool)
    sure = np.zeros(cand.size, dtype=bool)
    for t in levels:
        cfg = BowenConfig(t, eps, theta_grid_count)
        for i in np.flatnonzero(alive):
            res = inf_over_theta(samplers[t], samplers[t], cfg, pre=DiskAutomorphism(complex(a_all[i]), 0.0))
            if res.lower >= eps:
                alive[i] = False
            elif t == R and res.upper < eps:
                sure[i] = True
    w = mu.weights[cand]
    lo = math.fsum(w[sure])
    hi = math.fsum(w[alive])
    n_in = int(np.sum(alive))
    if n_in < min_atoms:
        warnings.warn(f"only {n_in} atoms in the Bowen ball at R={R}", MassStarvation)
    se = math.sqrt(max(hi * (1.0 - hi), 0.0) / len(mu.weights))
    return BallMass(float(R), float(eps), lo, hi, se, n_in)


# ---- local and transversal entropies ----------------------------------------------


@dataclass(frozen=True)
class EntropyEstimate:
    """Decay-rate brackets of a family of masses m(R).

    ``windows`` holds (R_a, R_b, lower, upper): the slopes of -log m between
    R_a and R_b allowed by the mass brackets.  h_minus / h_plus take the
    min / max over windows (proxies for liminf / limsup).
    """

    R: np.ndarray
    lower_mass: np.ndarray
    upper_mass: np.ndarray
    windows: tuple
    h_minus: Bracket
    h_plus: Bracket
    fit: SlopeFit


def decay_rates(R, lower_mass, upper_mass, span=2.0):
    """Windowed slope brackets of -log m(R) from mass brackets [lower, upper]."""
    R = np.asarray(R, dtype=float)
    lo = np.asarray(lower_mass, dtype=float)
    hi = np.asarray(upper_mass, dtype=float)
    if R.size < 2:
        raise EntropyError("need at least two radii")
    if np.any(lo <= 0) or np.any(hi < lo):
        raise EntropyError("mass brackets must be positive and ordered")
    wins = []
    for i in range(R.size):
        js = [j for j in range(i + 1, R.size) if R[j] - R[i] >= span - 1e-12]
        if not js:
            continue
        j = js[0]
        dR = R[j] - R[i]
        s_lo = (math.log(lo[i]) - math.log(hi[j])) / dR
        s_hi = (math.log(hi[i]) - math.log(lo[j])) / dR
        wins.append((float(R[i]), float(R[j]), max(s_lo, 0.0) if s_lo > -1e-12 else s_lo, s_hi))
    if not wins:
        raise EntropyError(f"no pair of radii spans {span}")
    a = np.array([w[2] for w in wins])
    b = np.array([w[3] for w in wins])
    geo = np.sqrt(lo * hi)
    fit = fit_slope(R, -np.log(geo)) if R.size >= 2 else None
    return EntropyEstimate(R, lo, hi, tuple(wins), Bracket(float(a.min()), float(b.min())),
                           Bracket(float(a.max()), float(b.max())), fit)


def local_entropy(leaf: LeafUniformization, zeta1, eps, R_list, R_max=None, n_dir=12, min_nodes=100, span=2.0):
    """h-(mu, y) and h+(mu, y) for mu = m_{x,R_max} and y = phi_x(zeta1).

    Ball masses come from plaque quadrature (``ball_mass``); radii whose
    quadrature would use fewer than ``min_nodes`` nodes, or that exceed the
    feasible radius of the recentred view, are dropped with a MassStarvation
    warning.
    """
    R_max = float(max(R_list)) if R_max is None else float(R_max)
    view = leaf.recentred(complex(zeta1))
    masses = []
    for R in sorted(R_list):
        if R > view.max_feasible_R:
            warnings.warn(f"R={R} beyond the feasible radius {view.max_feasible_R:.3g}; truncated", MassStarvation)
            break
        bm = ball_mass(leaf, zeta1, R, eps, R_max, n_dir)
        if bm.n_nodes < min_nodes or bm.lower <= 0:
            warnings.warn(f"ball mass at R={R} unresolved; truncated", MassStarvation)
            break
        masses.append(bm)
    est = decay_rates([m.R for m in masses], [m.lower for m in masses], [m.upper for m in masses], span)
    return est, masses


@dataclass(frozen=True)
class TransversalMass:
    R: float
    lower: float
    upper: float
    bins: tuple
    undecided: int


def transversal_mass(dis, view: LeafUniformization, profile: BallProfile, mu: WeightedPointMeasure, eps,
                     others=None):
    """nu(pi_T(B_R(y, eps))) bracketed, for the flow box of ``dis`` centred at y = view(0).

    The plaques met by the leaf part of the ball are found from its profile
    (center, and boundary points at the inner radii); atoms of other plaques
    within eps of y are ``others``: a dict atom index -> bool|None (inside,
    outside, undecided) supplied by the caller's distance cascade.
    """
    fb = dis.flow_box
    pts = [np.zeros(1)]
    for frac in (0.5, 1.0):
        pts.append(frac * profile.inner * np.exp(1j * profile.phi))
    q = view.points(np.concatenate(pts))
    _, s, conv = fb.coordinates(q)
    bins = set(int(b) for b in fb.transversal_index(s[conv]))
    lo_bins = set(bins)
    hi_bins = set(bins)
    undecided = 0
    if others:
        _, s_o, conv_o = fb.coordinates(mu.points[list(others)])
        idx_o = fb.transversal_index(s_o)
        for (k, state), b, ok in zip(others.items(), idx_o, conv_o):
            if not ok:
                continue
            if state is True:
                lo_bins.add(int(b))
            if state is not False:
                hi_bins.add(int(b))
                undecided += state is None
    lo = math.fsum(dis.nu[sorted(lo_bins)])
    hi = math.fsum(dis.nu[sorted(hi_bins)])
    return TransversalMass(profile.R, lo, hi, tuple(sorted(hi_bins)), undecided)


def other_sheet_atoms(leaf: LeafUniformization, mu: WeightedPointMeasure, dis, zeta1, eps, y_bin):
    """Atoms of the flow box lying on plaques other than y's that are within eps of y."""
    fb = dis.flow_box
    y = leaf.recentred(complex(zeta1)).center
    d0 = _nan_to_inf(leaf.chart.distance(mu.points, y[None, :]))
    cand = np.flatnonzero(d0 < eps)
    if cand.size == 0:
        return []
    _, s, conv = fb.coordinates(mu.points[cand])
    b = fb.transversal_index(s)
    return [int(k) for k, bk, ok in zip(cand, b, conv) if ok and bk != y_bin]


def transversal_entropy(leaf: LeafUniformization, mu: WeightedPointMeasure, zeta1, eps, profiles, fb=None,
                        span=2.0, min_atoms=20):
    """h~-(mu, y), h~+(mu, y) from nu(pi_T(B_R(y, eps))) over the radii of ``profiles``.

    Other-plaque atoms are decided by a cascade of Bowen distances: once the
    lower bracket at some R reaches eps the atom is out for all larger R.
    """
    view = leaf.recentred(complex(zeta1))
    y = view.center
    fb = fb or build_flow_box(leaf.chart, y)
    dis = disintegrate(mu, fb, min_atoms=min_atoms)
    _, s_y, _ = fb.coordinates(y[None, :])
    y_bin = int(fb.transversal_index(s_y)[0])
    cand = other_sheet_atoms(leaf, mu, dis, zeta1, eps, y_bin)
    state = {k: None for k in cand}
    inv = DiskAutomorphism(complex(zeta1), 0.0).inverse()
    out = []
    for prof in sorted(profiles, key=lambda p: p.R):
        if state:
            S = CircleSampler(view, prof.R)
            cfg = BowenConfig(prof.R, eps, 64)
            for k in [k for k, v in state.items() if v is not False]:
                if mu.zeta is None:
                    continue
                other = leaf.recentred(complex(mu.zeta[k]))
                res = bowen_distance(S, CircleSampler(other, prof.R), cfg)
                state[k] = False if res.lower >= eps else (True if res.upper < eps else None)
        out.append(transversal_mass(dis, view, prof, mu, eps, dict(state)))
    R = [t.R for t in out]
    est = decay_rates(R, [t.lower for t in out], [t.upper for t in out], span)
    return est, out, dis


@dataclass(frozen=True)
class GapReport:
    """h+- minus h~+- as brackets, with the estimates they came from."""

    preset: str
    eps: float
    local: EntropyEstimate
    transversal: EntropyEstimate
    gap_minus: Bracket
    gap_plus: Bracket
    delta: float = math.nan

    def rows(self):
        out = []
        for name, br in (("h_minus", self.local.h_minus), ("h_plus", self.local.h_plus),
                         ("ht_minus", self.transversal.h_minus), ("ht_plus", self.transversal.h_plus),
                         ("gap_minus", self.gap_minus), ("gap_plus", self.gap_plus)):
            out.append((name, br.lower, br.upper))
        return out


def gap_bracket(h: Bracket, ht: Bracket):
    return Bracket(h.lower - ht.upper, h.upper - ht.lower)


def entropy_gap(leaf: LeafUniformization, zeta1, eps, R_list, n_samples=20000, seed=0, n_dir=12, preset=""):
    """The h+- = h~+- + 2 experiment for mu = m_{x,R_max} at y = phi_x(zeta1)."""
    R_max = float(max(R_list))
    local, masses = local_entropy(leaf, zeta1, eps, R_list, R_max, n_dir)
    mu = sample_m_xR(leaf, R_max, n_samples, seed)
    trans, _, _ = transversal_entropy(leaf, mu, zeta1, eps, [m.profile for m in masses])
    return GapReport(preset, float(eps), local, trans, gap_bracket(local.h_minus, trans.h_minus),
                     gap_bracket(local.h_plus, trans.h_plus))


# ---- singular-interval schedules ------------------------------------------------

SEPARATION = 4.0
ANGULAR_THRESHOLD = 1.0 / 6.0


@dataclass(frozen=True)
class IntervalSchedule:
    """Radius intervals (R_i2, R_i1), i = 0..N, the last ending at +inf.

    The first N intervals are singular windows; the last starts at R_N2 <= R.
    ``delta`` is the singular-time fraction used in the bounds.
    """

    R: float
    intervals: tuple
    delta: float
    rho: tuple = ()

    @property
    def N(self):
        return len(self.intervals) - 1

    @property
    def total_length(self):
        """sum_{i<N} (R_i1 - R_i2) + (R - R_N2)."""
        body = math.fsum(r1 - r2 for r2, r1 in self.intervals[:-1])
        return body + (self.R - self.intervals[-1][0])

    def invariants(self):
        iv = self.intervals
        out = {
            "first_above_4": iv[0][0] > SEPARATION or (self.N == 0 and iv[0][0] == self.R and self.R > SEPARATION),
            "last_infinite": math.isinf(iv[-1][1]),
            "last_start_le_R": iv[-1][0] <= self.R + 1e-12,
            "lengths_ge_4": all(r1 - r2 >= SEPARATION - 1e-12 for r2, r1 in iv[:-1]),
            "gaps_ge_4": all(iv[i + 1][0] - iv[i][1] >= SEPARATION - 1e-12 for i in range(len(iv) - 1)),
            "sum_le_12_delta_R": self.total_length <= 12.0 * self.delta * self.R + 1e-12,
            "N_le_3_delta_R": self.N <= 3.0 * self.delta * self.R + 1e-12,
        }
        return out

    @property
    def ok(self):
        return all(self.invariants().values())

    def step_schedule(self, eps, c, variant="rotation"):
        return schedule_from_radii(self.intervals, eps, c, variant)

    def to_dict(self):
        return {
            "R": self.R,
            "intervals": [[a, None if math.isinf(b) else b] for a, b in self.intervals],
            "delta": self.delta,
            "rho": list(self.rho),
        }


def _runs(mask):
    """(start, stop) index pairs of the True runs of a boolean array (stop exclusive)."""
    m = np.concatenate([[False], np.asarray(mask, bool), [False]])
    d = np.diff(m.astype(int))
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def schedule_from_profile(radii, fractions, R, delta, rho=(), check=True):
    """Interval schedule from the angular fractions of the circles spent in U_1, U_2, U_3.

    ``fractions`` has shape (3, len(radii)); I_j holds the radii whose fraction
    exceeds 1/6 (angular measure above pi/3).  For each run of I_3 that meets
    I_1 the window is the hull of the I_2 radii of that run, widened to the
    midpoints with the neighbouring grid radii.  The tail interval is (R, inf)
    unless the last window ends within 4 of R, in which case that window is
    extended to +inf.
    """
    Rs = np.asarray(radii, dtype=float)
    F = np.asarray(fractions, dtype=float)
    if F.shape != (3, Rs.size):
        raise ValueError("fractions must have shape (3, len(radii))")
    if np.any(np.diff(Rs) <= 0):
        raise ValueError("radii must increase")
    I = F > ANGULAR_THRESHOLD
    half = np.diff(Rs) / 2.0
    left = np.concatenate([[Rs[0]], Rs[1:] - half])
    right = np.concatenate([Rs[:-1] + half, [Rs[-1]]])
    windows = []
    for a, b in _runs(I[2]):
        if not np.any(I[0, a:b]):
            continue
        two = np.flatnonzero(I[1, a:b]) + a
        lo, hi = (two[0], two[-1]) if two.size else (a, b - 1)
        windows.append((float(max(left[lo], 0.0)), float(min(right[hi], R))))
    if windows and R - windows[-1][1] < SEPARATION:
        last = windows.pop()
        intervals = tuple(windows) + ((last[0], math.inf),)
    else:
        intervals = tuple(windows) + ((float(R), math.inf),)
    sched = IntervalSchedule(float(R), intervals, float(delta), tuple(rho))
    if check:
        inv = sched.invariants()
        geometric = ("first_above_4", "lengths_ge_4", "gaps_ge_4")
        bad = [k for k in geometric if not inv[k]]
        if bad:
            raise SeparationError(
                f"schedule violates {', '.join(bad)}: separation (i) fails for rho={tuple(rho)}; "
                "choose smaller rho1/rho2"
            )
    return sched


def circle_profile(leaf: LeafUniformization, R, rho, step=0.05, n_angles=1024):
    """Fractions of the circles of radius R' in (0, R] whose image lies within rho_j of the singular set."""
    leaf.check_R(R)
    Rs = np.arange(step, R + 0.5 * step, step)
    Rs = Rs[Rs <= R + 1e-12]
    ang = np.exp(2j * np.pi * (np.arange(n_angles) + 0.5) / n_angles)
    F = np.zeros((len(rho), Rs.size))
    for k, Rp in enumerate(Rs):
        pts = leaf.points(HypRadius.from_R(Rp).r * ang)
        d = leaf.chart.distance_to_singular(pts)
        d = np.where(np.isnan(d), np.inf, d)
        for j, r in enumerate(rho):
            F[j, k] = float(np.mean(d <= r))
    return Rs, F


def singular_interval_schedule(leaf: LeafUniformization, R, rho1, rho2, rho3, n_samples=20000, seed=0, step=0.05,
                               n_angles=1024, delta=None):
    """Schedule of singular windows for the leaf of x = leaf.center up to radius R.

    delta defaults to m_{x,R}(U_3) measured on ``n_samples`` exact samples.
    """
    if not (0 < rho1 < rho2 < rho3):
        raise ValueError("need 0 < rho1 < rho2 < rho3")
    if leaf.chart.distance_to_singular(leaf.center[None, :])[0] <= rho3:
        raise SeparationError("the base point lies in U_3; choose a smaller rho3")
    if delta is None:
        delta = mass_near_singular(sample_m_xR(leaf, R, n_samples, seed), leaf.chart, rho3)
    Rs, F = circle_profile(leaf, R, (rho1, rho2, rho3), step, n_angles)
    return schedule_from_profile(Rs, F, R, delta, (rho1, rho2, rho3))


# ---- separation of the singular neighbourhoods --------------------------------


@dataclass(frozen=True)
class SeparationSample:
    """Points of a traced time domain with their distances to the singular set and to the boundary.

    ``boundary`` is the distance to the box-exit edges of the polygon; cap and
    guard edges are artificial truncations and are not counted as boundary.
    """

    t: np.ndarray
    dist_singular: np.ndarray
    boundary: np.ndarray


def _segment_distance(p, a, b):
    ab = b - a
    L2 = np.abs(ab) ** 2
    u = np.clip(((p[:, None] - a[None, :]) * np.conj(ab[None, :])).real / np.where(L2 > 0, L2, 1.0), 0, 1)
    return np.min(np.abs(p[:, None] - (a[None, :] + u * ab[None, :])), axis=1)


def separation_sample(chart: FoliatedChart, omega: TimeDomain, n_log=48, n_grid=48):
    """Samples along every ray on a log grid plus a uniform grid of the domain."""
    v = omega.vertices
    pts = [np.zeros(1, dtype=complex)]
    frac = np.geomspace(1e-3, 1.0 - 1e-9, n_log)
    for rad, a in zip(omega.radii, omega.angles):
        pts.append(frac * rad * np.exp(1j * a))
    ext = max(float(np.max(np.abs(v))), 1e-12)
    g = np.linspace(-ext, ext, n_grid)
    grid = (g[:, None] + 1j * g[None, :]).ravel()
    pts.append(grid[omega.contains(grid)])
    t = np.concatenate(pts)
    z = chart.flow_to(np.repeat(omega.base[None, :], t.size, axis=0), t)
    d = chart.distance_to_singular(z)
    ok = np.isfinite(d)
    t, d = t[ok], d[ok]
    ex = omega.status == STATUS_EXIT
    nxt = np.roll(np.arange(v.size), -1)
    edges = ex & ex[nxt]
    if np.any(edges):
        bd = _segment_distance(t, v[edges], v[nxt][edges])
    else:
        bd = np.full(t.size, np.inf)
    return SeparationSample(t, d, bd)


def separation_lower_bound(samples, rho_in, rho_out, chunk=2048):
    """Lower bound of the leafwise Poincare distance between {d(E,.) <= rho_in} and {d(E,.) >= rho_out}.

    Uses the quasi-hyperbolic comparison for simply connected domains,
    d_P >= (1/2) max(|log(b1/b2)|, log(1 + |t1 - t2| / min(b1, b2))), with b the
    distance to the boundary.  Returns +inf when no sampled point is that close
    to the singular set.
    """
    best = math.inf
    for s in samples:
        A = s.dist_singular <= rho_in
        B = s.dist_singular >= rho_out
        if not np.any(A) or not np.any(B):
            continue
        ta, ba = s.t[A], s.boundary[A]
        tb, bb = s.t[B], s.boundary[B]
        for i in range(0, ta.size, chunk):
            t1, b1 = ta[i:i + chunk, None], ba[i:i + chunk, None]
            with np.errstate(divide="ignore", invalid="ignore"):
                m = np.minimum(b1, bb[None, :])
                k1 = np.abs(np.log(b1 / bb[None, :]))
                k2 = np.log1p(np.abs(t1 - tb[None, :]) / m)
                k = 0.5 * np.fmax(np.nan_to_num(k1, nan=0.0, posinf=np.inf), np.nan_to_num(k2, nan=0.0))
            best = min(best, float(np.min(k)))
    return best


def probe_samples(chart: FoliatedChart, n_probes=16, seed=0, **kw):
    """Separation samples on leaves through random non-guard points of the box."""
    rng = np.random.default_rng(seed)
    pts = chart.box.sample(4 * n_probes, rng, margin=0.02 * chart.box.size)
    pts = pts[chart.distance_to_singular(pts) > 10 * chart.guard_radius][:n_probes]
    out = []
    for p in pts:
        try:
            out.append(separation_sample(chart, trace_time_domain(chart, p), **kw))
        except (UniformizationError, FoliationError):
            continue
    return out


def _largest_separated(samples, rho_out, lo, iters=40):
    """Largest rho in [lo, rho_out) with separation bound >= 4 to {d >= rho_out} (log bisection)."""
    if separation_lower_bound(samples, lo, rho_out) < SEPARATION:
        raise SeparationError(f"no rho above {lo:.3g} is separated from rho={rho_out:.3g}")
    a, b = math.log(lo), math.log(rho_out)
    for _ in range(iters):
        m = 0.5 * (a + b)
        if separation_lower_bound(samples, math.exp(m), rho_out) >= SEPARATION:
            a = m
        else:
            b = m
    return math.exp(a)


def default_rhos(chart: FoliatedChart, samples=None, rho3=None, n_probes=16, seed=0):
    """rho3 = 20 guard radii; rho2 then rho1 the largest radii passing separation on the probes."""
    samples = probe_samples(chart, n_probes, seed) if samples is None else samples
    rho3 = 20.0 * chart.guard_radius if rho3 is None else rho3
    floor = 1e-3 * chart.guard_radius
    rho2 = _largest_separated(samples, rho3, floor)
    rho1 = _largest_separated(samples, rho2, floor * 1e-3)
    return rho1, rho2, rho3


def check_separation(samples, rho1, rho2, rho3):
    """Raise SeparationError unless both separation bounds reach 4."""
    b12 = separation_lower_bound(samples, rho1, rho2)
    b23 = separation_lower_bound(samples, rho2, rho3)
    if b12 < SEPARATION or b23 < SEPARATION:
        raise SeparationError(
            f"separation bounds {b12:.3g} (rho1 -> rho2) and {b23:.3g} (rho2 -> rho3) are below 4; "
            "choose smaller rho1/rho2"
        )
    return b12, b23


# ---- comparability of leafwise and ambient distances ---------------------------


@dataclass(frozen=True)
class Comparability:
    c: float
    eps0: float
    eta_min: float
    eta_max: float
    n_points: int


def leaf_eta(leaf: LeafUniformization, zeta):
    """eta at phi(zeta): the metric norm of (phi o tau_zeta)'(0) = phi'(zeta) (1 - |zeta|^2)."""
    zeta = np.atleast_1d(np.asarray(zeta, dtype=complex))
    jx, jy = leaf.coord_jets(zeta, 1)
    w = np.stack([jx.c[0], jy.c[0]], axis=-1)
    dw = np.stack([jx.c[1], jy.c[1]], axis=-1) * (1.0 - np.abs(zeta) ** 2)[:, None]
    return np.asarray(leaf.chart.coord_tangent_norm(w, dw), dtype=float)


def comparability_sample(chart: FoliatedChart, n_leaves=4, per_leaf=64, R_sample=3.0, seed=0):
    """(leaf, zeta, eta, distance to E) samples on leaves through random box points."""
    rng = np.random.default_rng(seed)
    pts = chart.box.sample(4 * n_leaves, rng, margin=0.05 * chart.box.size)
    pts = pts[chart.distance_to_singular(pts) > 10 * chart.guard_radius][:n_leaves]
    out = []
    for p in pts:
        try:
            leaf = LeafUniformization.build(chart, p)
        except (UniformizationError, FoliationError):
            continue
        Rs = min(R_sample, 0.9 * leaf.max_feasible_R)
        zeta = np.tanh(0.5 * Rs * np.sqrt(rng.uniform(size=per_leaf))) * np.exp(2j * np.pi * rng.uniform(size=per_leaf))
        eta = leaf_eta(leaf, zeta)
        d = chart.distance_to_singular(leaf.points(zeta))
        good = np.isfinite(eta) & (eta > 0)
        out.append((leaf, zeta[good], eta[good], d[good]))
    if not out:
        raise EntropyError("eta sampling failed on every probe leaf")
    return out


def comparability_constant(chart: FoliatedChart, rho1, samples=None, margin=0.1, seed=0):
    """c with c^-1 d_P <= d_M <= c d_P for leafwise pairs outside (1/2) U_1, and eps0.

    Ambient speed is eta/2 per unit of Poincare length, so
    c = max(sup eta / 2, 2 / inf eta) (1 + margin) over sampled points with
    d(E, .) > rho1 / 2.  eps0 is the smallest ambient inradius of flow boxes at
    a few sampled points, divided by c.
    """
    samples = comparability_sample(chart, seed=seed) if samples is None else samples
    etas = np.concatenate([e[d > 0.5 * rho1] for _, _, e, d in samples])
    if etas.size == 0:
        raise EntropyError("no eta sample outside (1/2) U_1")
    c = max(float(etas.max()) / 2.0, 2.0 / float(etas.min())) * (1.0 + margin)
    inr = []
    for leaf, zeta, _, d in samples[:3]:
        y = leaf.center
        try:
            fb = build_flow_box(chart, y)
        except FoliationError:
            continue
        ring = fb.point(np.exp(2j * np.pi * np.arange(16) / 16), np.zeros(16))
        trans = y[None, :] + fb.transversal_radius * np.exp(2j * np.pi * np.arange(8) / 8)[:, None] * fb.normal[None, :]
        dd = chart.distance(np.concatenate([ring, trans]), y[None, :])
        inr.append(float(np.nanmin(dd)))
    if not inr:
        raise EntropyError("no flow box could be built at the sampled points")
    return Comparability(c, min(inr) / c, float(etas.min()), float(etas.max()), int(etas.size))


@dataclass(frozen=True)
class ComparabilityCheck:
    n_pairs: int
    n_pass: int
    worst_upper: float
    worst_lower: float


def verify_comparability(comp: Comparability, samples, rho1, n_pairs=1000, seed=0):
    """Test c^-1 d_P <= d_M <= c d_P on random leafwise pairs with d_P <= eps0 outside (1/2) U_1."""
    rng = np.random.default_rng(seed)
    per = int(math.ceil(n_pairs / len(samples)))
    n_pass = 0
    total = 0
    hi = 0.0
    lo = math.inf
    for leaf, zeta, _, d in samples:
        z = zeta[d > 0.5 * rho1]
        if z.size == 0:
            continue
        a = z[rng.integers(0, z.size, per)]
        dist = comp.eps0 * np.sqrt(rng.uniform(size=per))
        u = np.tanh(dist / 2.0) * np.exp(2j * np.pi * rng.uniform(size=per))
        b = (u + a) / (1.0 + np.conj(a) * u)
        dP = _disk_dist(a, b)
        dM = leaf.chart.distance(leaf.points(a), leaf.points(b))
        ok = np.isfinite(dM) & (dM <= comp.c * dP * (1 + 1e-9)) & (dM * comp.c >= dP * (1 - 1e-9))
        n_pass += int(np.sum(ok))
        total += per
        with np.errstate(divide="ignore", invalid="ignore"):
            r = dM / dP
        hi = max(hi, float(np.nanmax(r)))
        lo = min(lo, float(np.nanmin(r)))
    return ComparabilityCheck(total, n_pass, hi, lo)


# ---- prescribed steps of the admissible sets ---------------------------------


@dataclass(frozen=True)
class BridgeReport:
    variant: str
    eps: float
    n_samples: int
    n_pairs: int
    n_fail: int
    offending: tuple
    bands: tuple

    @property
    def passed(self):
        return self.n_fail == 0


def step_violations(points, sched: StepSchedule, metric="euclidean", limit=20):
    """All pairs whose distance fits no band, with their distances."""
    from scipy.spatial.distance import pdist, squareform

    P = np.atleast_2d(np.asarray(points, dtype=float))
    if P.shape[0] < 2:
        return 0, 0, ()
    D = squareform(pdist(P, metric=metric))
    ok = np.zeros_like(D, dtype=bool)
    for e1, e2 in sched.bands:
        ok |= (D >= e1) & (D <= e2)
    iu = np.triu_indices(P.shape[0], 1)
    bad = ~ok[iu]
    n_pairs = int(bad.size)
    idx = np.flatnonzero(bad)[:limit]
    off = tuple((int(iu[0][k]), int(iu[1][k]), float(D[iu][k])) for k in idx)
    return n_pairs, int(np.sum(bad)), off


def prescribed_steps_bridge(schedule: IntervalSchedule, measure: AdmissibleMeasure, eps, c, variant="rotation",
                            n_samples=200, seed=0, directions=None, rho_inner=None):
    """Sample the inner admissible set and check every pair's gap against the schedule's bands.

    For rotations the inner set is the interval [-inner_minus, inner_plus]
    (here taken symmetric with half-width inner / 2).  For automorphisms,
    points are drawn in the ball of radius min(rho_inner) in (Re zeta, Im zeta,
    theta), and gaps use the sup norm.
    """
    rng = np.random.default_rng(seed)
    sched = schedule.step_schedule(eps, c, variant)
    if variant == "rotation":
        pts = rng.uniform(-0.5 * measure.inner, 0.5 * measure.inner, size=(n_samples, 1))
        metric = "euclidean"
    else:
        if rho_inner is None:
            raise ValueError("automorphism bridge needs the inner radii of the admissible set")
        rad = float(np.min(rho_inner))
        v = rng.normal(size=(n_samples, 3))
        v *= (rad * rng.uniform(size=(n_samples, 1)) ** (1.0 / 3.0)) / np.linalg.norm(v, axis=1, keepdims=True)
        pts = v
        metric = "chebyshev"
    n_pairs, n_fail, off = step_violations(pts, sched, metric)
    return BridgeReport(variant, float(eps), n_samples, n_pairs, n_fail, off, sched.bands)
