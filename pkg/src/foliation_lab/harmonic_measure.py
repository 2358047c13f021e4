"""The averaged measures m_{x,R}, their mass near the singular set, and flow-box disintegration.

m_{x,R} is the push-forward by phi_x of log+(r/|zeta|) times the Poincare area
on D_r (r the Euclidean radius of hyperbolic radius R), normalized by M_R.
Samples are drawn exactly: the radial law has a closed-form CDF and the angle
is uniform.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .disk_geometry import HypRadius, annulus_log_integral_radial_cdf
from .foliation_core import FlowBox, FoliatedChart

TEST_DICTIONARY_VERSION = "poly2-bump-v1"


class MeasureError(RuntimeError):
    pass


@dataclass(frozen=True)
class WeightedPointMeasure:
    points: np.ndarray
    weights: np.ndarray
    provenance: dict = field(default_factory=dict)
    zeta: np.ndarray = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0):
            raise MeasureError("negative weight")
        total = math.fsum(w)
        if total <= 0:
            raise MeasureError("measure has no mass")
        object.__setattr__(self, "weights", w / total)
        object.__setattr__(self, "points", np.asarray(self.points, dtype=complex))

    @property
    def total_weight(self):
        return math.fsum(self.weights)

    @property
    def effective_size(self):
        return float(1.0 / np.sum(self.weights ** 2))

    def integrate(self, f):
        return float(np.dot(self.weights, f(self.points)))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("# " + json.dumps(self.provenance, sort_keys=True) + "\n")
            w = csv.writer(fh)
            w.writerow(["x_re", "x_im", "y_re", "y_im", "weight"])
            for p, wt in zip(self.points, self.weights):
                w.writerow([f"{p[0].real:.17g}", f"{p[0].imag:.17g}", f"{p[1].real:.17g}", f"{p[1].imag:.17g}",
                            f"{wt:.17g}"])

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            header = json.loads(fh.readline()[2:])
            rows = list(csv.reader(fh))[1:]
        a = np.array(rows, dtype=float)
        pts = np.stack([a[:, 0] + 1j * a[:, 1], a[:, 2] + 1j * a[:, 3]], axis=-1)
        return cls(pts, a[:, 4], header)


def sample_radii(R, n, rng, iters=64):
    """Euclidean radii distributed with density proportional to log(r/rho) 4 rho/(1-rho^2)^2 on [0, r]."""
    u = rng.uniform(size=n)
    hr = HypRadius.from_R(R)
    lo = np.zeros(n)
    hi = np.full(n, float(R))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = annulus_log_integral_radial_cdf(np.tanh(mid / 2.0), hr) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return np.tanh(0.25 * (lo + hi))


def sample_zeta(R, n, seed):
    rng = np.random.default_rng(seed)
    rho = sample_radii(R, n, rng)
    ang = rng.uniform(0.0, 2 * np.pi, size=n)
    return rho * np.exp(1j * ang)


def sample_m_xR(leaf, R, n_samples, seed=0):
    """Exact samples of m_{x,R} pushed forward by the leaf map; equal weights."""
    leaf.check_R(R)
    zeta = sample_zeta(R, n_samples, seed)
    pts = leaf.points(zeta)
    prov = {
        "kind": "m_xR",
        "x": [[c.real, c.imag] for c in leaf.center],
        "R": float(R),
        "n": int(n_samples),
        "seed": int(seed),
    }
    return WeightedPointMeasure(pts, np.full(n_samples, 1.0 / n_samples), prov, zeta)


def mass_near_singular(m: WeightedPointMeasure, chart: FoliatedChart, rho):
    """Weight of atoms within rho of the singular set."""
    d = chart.distance_to_singular(m.points)
    return float(math.fsum(m.weights[d <= rho]))


def _bump(chart, pts):
    lo = np.array(chart.box.lo)
    hi = np.array(chart.box.hi)
    r = chart.box._real(pts)
    u = (2 * r - (lo + hi)) / (hi - lo)
    inside = np.all(np.abs(u) < 1, axis=-1)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        val = np.exp(np.sum(1.0 - 1.0 / (1.0 - u ** 2), axis=-1))
    return np.where(inside, val, 0.0), u


def test_function_values(chart, pts):
    """Dictionary: real monomials of degree <= 2 in the normalized coordinates, times a bump."""
    b, u = _bump(chart, pts)
    cols = [np.ones(len(pts))]
    for i in range(4):
        cols.append(u[:, i])
    for i in range(4):
        for j in range(i, 4):
            cols.append(u[:, i] * u[:, j])
    U = np.stack(cols, axis=-1)
    return np.nan_to_num(U) * b[:, None]


def weak_gap(m1: WeightedPointMeasure, m2: WeightedPointMeasure, chart: FoliatedChart):
    """max_f |int f dm1 - int f dm2| over the fixed test-function dictionary."""
    a = m1.weights @ test_function_values(chart, m1.points)
    b = m2.weights @ test_function_values(chart, m2.points)
    return float(np.max(np.abs(a - b)))


@dataclass(frozen=True)
class Disintegration:
    flow_box: FlowBox = field(repr=False)
    nu: np.ndarray
    zeta: list
    weights: list
    bandwidth: float
    n_in_box: int
    n_ignored: int

    def density(self, index, zeta_eval):
        """Kernel density of plaque ``index`` normalized to 1 at the plaque center."""
        z = self.zeta[index]
        w = self.weights[index]
        if z.size == 0:
            return np.full(np.shape(zeta_eval), np.nan)
        h = self.bandwidth

        def kde(q):
            q = np.atleast_1d(q)
            d2 = np.abs(q[:, None] - z[None, :]) ** 2
            return np.exp(-0.5 * d2 / h ** 2) @ w

        return kde(zeta_eval) / kde(np.zeros(1))[0]

    def harnack_ratio(self, index, radius=0.5, n=64):
        g = np.linspace(-radius, radius, 15)
        q = (g[:, None] + 1j * g[None, :]).ravel()
        q = q[np.abs(q) <= radius]
        f = self.density(index, q)
        return float(np.max(f) / np.min(f))

    def reassembly_error(self, index, radius=0.5, n_grid=81):
        """|direct mass of |zeta|<radius| - nu * (int f over the disk of radius)/(int f over D)|."""
        z = self.zeta[index]
        w = self.weights[index]
        direct = float(np.sum(w[np.abs(z) < radius]))
        g = np.linspace(-1, 1, n_grid)
        q = (g[:, None] + 1j * g[None, :]).ravel()
        q = q[np.abs(q) < 1]
        f = self.density(index, q)
        frac = float(np.sum(f[np.abs(q) < radius]) / np.sum(f))
        return abs(direct - self.nu[index] * frac)


def harnack_constant(radius):
    """sup/inf bound for a positive harmonic function on D over |zeta| <= radius."""
    return ((1 + radius) / (1 - radius)) ** 2


def disintegrate(m: WeightedPointMeasure, fb: FlowBox, min_atoms=20, bandwidth=0.1):
    """Bin atoms by plaque of the flow box; nu is the weight per transversal sample."""
    X0 = fb.chart.field(fb.center)
    reach = 2.0 * fb.r0 * np.linalg.norm(X0) + 2.0 * fb.transversal_radius
    near = np.linalg.norm(m.points - fb.center, axis=1) < reach
    idx = np.flatnonzero(near)
    zeta, s, conv = fb.coordinates(m.points[idx]) if idx.size else (np.zeros(0), np.zeros(0), np.zeros(0, bool))
    cell = 0.5 * fb.transversal_radius * (math.sqrt(2) / max(1, int(math.sqrt(fb.transversal.size)) - 1))
    ti = fb.transversal_index(s) if idx.size else np.zeros(0, int)
    inside = conv & (np.abs(zeta) < 1) & (np.abs(s - fb.transversal[ti]) <= cell * math.sqrt(2) + 1e-15)
    if np.sum(inside) < min_atoms:
        raise MeasureError(f"only {int(np.sum(inside))} atoms in the flow box (need {min_atoms})")
    w_all = m.weights[idx][inside]
    z_all = zeta[inside]
    t_all = ti[inside]
    nu = np.zeros(fb.transversal.size)
    zs, ws = [], []
    for k in range(fb.transversal.size):
        sel = t_all == k
        nu[k] = math.fsum(w_all[sel])
        zs.append(z_all[sel])
        ws.append(w_all[sel])
    return Disintegration(fb, nu, zs, ws, bandwidth, int(np.sum(inside)), int(len(m.weights) - np.sum(inside)))
