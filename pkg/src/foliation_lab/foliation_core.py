"""Polynomial vector fields on C^2, their singular points, leaf tracing and flow boxes.

A leaf of the foliation generated by X is traced in complex time: for a
polyline t_0 = 0, t_1, ..., the point flow(x, t) solves dz/dt = X(z).  Each
segment is integrated as a real ODE in s in [0, 1] with dz/ds = (t_{k+1}-t_k) X(z).

The domain of interest is an axis-aligned box in C^2 = R^4.  Two ambient
metrics are available on it: the Euclidean one and the product Kobayashi
metric of the box (max of the Poincare distances of the two coordinate
rectangles).  Trajectories stop at the box boundary or when they come within
the guard radius of a singular point.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .conformal import ZipperMap, resample_polygon, start_on_longest_edge
from .jets import Jet, is_jet

log = logging.getLogger(__name__)

STATUS_OK = 0
STATUS_SINGULAR = 1
STATUS_EXIT = 2


class FoliationError(RuntimeError):
    pass


class SingularApproach(FoliationError):
    def __init__(self, message, location=None, time=None):
        super().__init__(message)
        self.location = location
        self.time = time


class DomainExit(FoliationError):
    def __init__(self, message, location=None, time=None):
        super().__init__(message)
        self.location = location
        self.time = time


def monomial_exponents(degree):
    """Graded-lex exponents (a, b) of x^a y^b: degree 0, then x, y, then x^2, xy, y^2, ..."""
    return [(k - j, j) for k in range(degree + 1) for j in range(k + 1)]


def _power(z, n):
    if is_jet(z):
        return z ** n
    return z ** n if n else np.ones_like(z)


@dataclass(frozen=True)
class PolynomialVectorField:
    degree: int
    coeffs_x: np.ndarray
    coeffs_y: np.ndarray

    def __post_init__(self):
        m = len(monomial_exponents(self.degree))
        cx = np.zeros(m, dtype=complex)
        cy = np.zeros(m, dtype=complex)
        ax = np.asarray(self.coeffs_x, dtype=complex).ravel()
        ay = np.asarray(self.coeffs_y, dtype=complex).ravel()
        if ax.size > m or ay.size > m:
            raise ValueError(f"too many coefficients for degree {self.degree}")
        cx[: ax.size] = ax
        cy[: ay.size] = ay
        if not (np.any(cx != 0) or np.any(cy != 0)):
            raise ValueError("vector field is identically zero")
        object.__setattr__(self, "coeffs_x", cx)
        object.__setattr__(self, "coeffs_y", cy)

    @classmethod
    def from_terms(cls, degree, terms_x, terms_y):
        """Build from dicts {(a, b): coefficient}."""
        exps = monomial_exponents(degree)
        cx = np.array([terms_x.get(e, 0) for e in exps], dtype=complex)
        cy = np.array([terms_y.get(e, 0) for e in exps], dtype=complex)
        return cls(degree, cx, cy)

    @property
    def exponents(self):
        return monomial_exponents(self.degree)

    def components(self, x, y):
        """(X_1, X_2) at (x, y); works on arrays or jets."""
        px = [_power(x, a) for a in range(self.degree + 1)]
        py = [_power(y, b) for b in range(self.degree + 1)]
        fx = 0
        fy = 0
        for (a, b), cx, cy in zip(self.exponents, self.coeffs_x, self.coeffs_y):
            if cx == 0 and cy == 0:
                continue
            mono = px[a] * py[b] if (a and b) else (px[a] if a else py[b])
            if cx != 0:
                fx = fx + mono * cx
            if cy != 0:
                fy = fy + mono * cy
        if not is_jet(fx) and np.isscalar(fx) and fx == 0:
            fx = 0 * x
        if not is_jet(fy) and np.isscalar(fy) and fy == 0:
            fy = 0 * y
        return fx, fy

    def __call__(self, z):
        z = np.asarray(z, dtype=complex)
        fx, fy = self.components(z[..., 0], z[..., 1])
        return np.stack(np.broadcast_arrays(fx, fy), axis=-1)

    def jacobian(self, z):
        """Complex Jacobian matrix (..., 2, 2) of the holomorphic map X."""
        z = np.asarray(z, dtype=complex)
        x = Jet.variable(z[..., 0], 1)
        y = Jet.variable(z[..., 1], 1)
        fx1, fy1 = self.components(x, z[..., 1] + 0 * x)
        fx2, fy2 = self.components(z[..., 0] + 0 * y, y)
        J = np.empty(z.shape[:-1] + (2, 2), dtype=complex)
        J[..., 0, 0] = fx1.c[1]
        J[..., 1, 0] = fy1.c[1]
        J[..., 0, 1] = fx2.c[1]
        J[..., 1, 1] = fy2.c[1]
        return J

    def scaled(self, c):
        return PolynomialVectorField(self.degree, self.coeffs_x * c, self.coeffs_y * c)

    def decoupled_affine(self):
        """(a1, b1, a2, b2) when X = (a1 + b1 x, a2 + b2 y), else None."""
        exps = self.exponents
        allowed_x = {(0, 0), (1, 0)}
        allowed_y = {(0, 0), (0, 1)}
        for e, cx, cy in zip(exps, self.coeffs_x, self.coeffs_y):
            if cx != 0 and e not in allowed_x:
                return None
            if cy != 0 and e not in allowed_y:
                return None
        get = dict(zip(exps, zip(self.coeffs_x, self.coeffs_y)))
        a1 = get[(0, 0)][0]
        a2 = get[(0, 0)][1]
        b1 = get.get((1, 0), (0, 0))[0]
        b2 = get.get((0, 1), (0, 0))[1]
        return complex(a1), complex(b1), complex(a2), complex(b2)

    def to_json(self):
        return json.dumps(
            {
                "degree": self.degree,
                "coeffs_x": [[c.real, c.imag] for c in self.coeffs_x],
                "coeffs_y": [[c.real, c.imag] for c in self.coeffs_y],
            }
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text) if isinstance(text, str) else text
        cx = [complex(a, b) for a, b in d["coeffs_x"]]
        cy = [complex(a, b) for a, b in d["coeffs_y"]]
        return cls(int(d["degree"]), np.array(cx), np.array(cy))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in R^4 given by bounds on (Re x, Im x, Re y, Im y)."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != 4 or len(hi) != 4 or any(a >= b for a, b in zip(lo, hi)):
            raise ValueError("box needs four increasing intervals")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, half_width=1.0, center=(0j, 0j)):
        cx, cy = complex(center[0]), complex(center[1])
        h = float(half_width)
        return cls(
            (cx.real - h, cx.imag - h, cy.real - h, cy.imag - h),
            (cx.real + h, cx.imag + h, cy.real + h, cy.imag + h),
        )

    @property
    def center(self):
        m = [(a + b) / 2 for a, b in zip(self.lo, self.hi)]
        return np.array([complex(m[0], m[1]), complex(m[2], m[3])])

    @property
    def size(self):
        """Longest side."""
        return float(np.max(np.subtract(self.hi, self.lo)))

    @property
    def diameter(self):
        return float(np.linalg.norm(np.subtract(self.hi, self.lo)))

    def _real(self, z):
        z = np.asarray(z, dtype=complex)
        return np.stack([z[..., 0].real, z[..., 0].imag, z[..., 1].real, z[..., 1].imag], axis=-1)

    def margin(self, z):
        """Signed distance to the boundary in the sup sense: positive inside."""
        r = self._real(z)
        return np.min(np.minimum(r - np.array(self.lo), np.array(self.hi) - r), axis=-1)

    def contains(self, z):
        return self.margin(z) >= 0

    def section(self, j):
        """Counterclockwise rectangle vertices of coordinate j."""
        a, b = self.lo[2 * j], self.hi[2 * j]
        c, d = self.lo[2 * j + 1], self.hi[2 * j + 1]
        return np.array([complex(a, c), complex(b, c), complex(b, d), complex(a, d)])

    def sample(self, n, rng, margin=0.0):
        lo = np.array(self.lo) + margin
        hi = np.array(self.hi) - margin
        r = rng.uniform(lo, hi, size=(n, 4))
        return np.stack([r[:, 0] + 1j * r[:, 1], r[:, 2] + 1j * r[:, 3]], axis=-1)


@dataclass(frozen=True)
class SingularPoint:
    point: np.ndarray
    kind: str
    eigenvalues: tuple

    def to_dict(self):
        return {
            "point": [[c.real, c.imag] for c in self.point],
            "kind": self.kind,
            "eigenvalues": [[c.real, c.imag] for c in self.eigenvalues],
        }


def classify_singularity(field: PolynomialVectorField, p, tol=1e-8):
    J = field.jacobian(np.asarray(p, dtype=complex))
    ev = np.linalg.eigvals(J)
    scale = max(1.0, float(np.max(np.abs(J))))
    small = np.abs(ev) < tol * scale
    if not np.any(small):
        kind = "non-degenerate"
    elif np.sum(small) == 1:
        kind = "saddle-node"
    else:
        kind = "degenerate"
    return kind, tuple(complex(e) for e in ev)


def find_singularities(field: PolynomialVectorField, box: Box, seeds_per_axis=5, merge_tol=None, max_iter=200):
    """Newton-refined common zeros of X inside the box, seeded from a grid."""
    merge_tol = 1e-6 * box.size if merge_tol is None else merge_tol
    axes = [np.linspace(a, b, seeds_per_axis) for a, b in zip(box.lo, box.hi)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 4)
    z = np.stack([g[:, 0] + 1j * g[:, 1], g[:, 2] + 1j * g[:, 3]], axis=-1)
    converged = np.zeros(len(z), dtype=bool)
    active = np.ones(len(z), dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        F = field(z[idx])
        J = field.jacobian(z[idx])
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        ok = np.abs(det) > 1e-300
        step = np.zeros_like(F)
        step[ok, 0] = (J[ok, 1, 1] * F[ok, 0] - J[ok, 0, 1] * F[ok, 1]) / det[ok]
        step[ok, 1] = (-J[ok, 1, 0] * F[ok, 0] + J[ok, 0, 0] * F[ok, 1]) / det[ok]
        z[idx] = z[idx] - step
        small_step = np.linalg.norm(step, axis=1) < 1e-15 * (1 + np.linalg.norm(z[idx], axis=1))
        at_zero = np.linalg.norm(field(z[idx]), axis=1) == 0
        finished = (small_step & ok) | at_zero
        bad = ~ok & ~at_zero | ~np.all(np.isfinite(z[idx]), axis=1) | (np.abs(z[idx]).max(axis=1) > 1e6)
        converged[idx[finished]] = True
        active[idx[finished | bad]] = False
    converged |= active & (np.linalg.norm(field(np.nan_to_num(z)), axis=1) < 1e-10)
    found = []
    skipped = 0
    for p, ok in zip(z, converged):
        if not ok or not np.all(np.isfinite(p)):
            skipped += 1
            continue
        if np.linalg.norm(field(p)) >= 1e-10 or not box.contains(p):
            skipped += 1
            continue
        if any(np.linalg.norm(p - q) < merge_tol for q in found):
            continue
        found.append(p)
    if skipped:
        log.debug("find_singularities: %d seeds skipped (no convergence or outside box)", skipped)
    out = []
    for p in found:
        kind, ev = classify_singularity(field, p)
        out.append(SingularPoint(np.asarray(p, dtype=complex), kind, ev))
    return out


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_BS = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_DP_E = _DP_B - _DP_BS


@dataclass(frozen=True)
class FlowBatch:
    end: np.ndarray
    fraction: np.ndarray
    status: np.ndarray

    @property
    def ok(self):
        return self.status == STATUS_OK


@dataclass(frozen=True)
class FlowResult:
    point: np.ndarray
    trace: np.ndarray


@dataclass(frozen=True)
class FoliatedChart:
    """A vector field on a box, with its singular set, guard radius and ambient metric."""

    field: PolynomialVectorField
    box: Box
    singular_points: tuple = None
    guard_radius: float = None
    metric: str = "euclidean"
    isolation_radius: float = None
    rtol: float = 1e-11
    atol: float = 1e-13
    name: str = "custom"
    zipper_spacing: float = 0.02
    trace_inset: float = 0.0

    def __post_init__(self):
        if self.metric not in ("euclidean", "kobayashi"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.guard_radius is None:
            object.__setattr__(self, "guard_radius", 1e-4 * self.box.size)
        if self.isolation_radius is None:
            object.__setattr__(self, "isolation_radius", 10.0 * self.guard_radius)
        if self.singular_points is None:
            object.__setattr__(self, "singular_points", tuple(find_singularities(self.field, self.box)))
        else:
            object.__setattr__(self, "singular_points", tuple(self.singular_points))
        pts = self.singular_array
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                if np.linalg.norm(pts[i] - pts[j]) <= self.isolation_radius:
                    raise FoliationError("singular points are not isolated at the configured radius")

    def with_metric(self, metric):
        return replace(self, metric=metric)

    def with_field(self, fld):
        return replace(self, field=fld)

    @property
    def singular_array(self):
        if not self.singular_points:
            return np.zeros((0, 2), dtype=complex)
        return np.array([s.point for s in self.singular_points])

    # ---- distances -------------------------------------------------------

    def distance_to_singular(self, z):
        """Euclidean distance to the nearest singular point (inf if there is none)."""
        z = np.asarray(z, dtype=complex)
        E = self.singular_array
        if E.shape[0] == 0:
            return np.full(z.shape[:-1], np.inf)
        d = np.linalg.norm(z[..., None, :] - E, axis=-1)
        return d.min(axis=-1)

    def violation(self, z):
        """STATUS code per point: exit wins over singular approach.

        Points closer than ``trace_inset`` to the box boundary count as exits, so
        traced leaf patches keep a safety layer inside the box.
        """
        z = np.asarray(z, dtype=complex)
        out = np.full(z.shape[:-1], STATUS_OK)
        out[self.distance_to_singular(z) < self.guard_radius] = STATUS_SINGULAR
        out[self.box.margin(z) < self.trace_inset] = STATUS_EXIT
        out[~np.all(np.isfinite(z), axis=-1)] = STATUS_EXIT
        return out

    @cached_property
    def _sections(self):
        maps = []
        for j in range(2):
            rect = self.box.section(j)
            side = min(abs(rect[1] - rect[0]), abs(rect[2] - rect[1]))
            pts = resample_polygon(start_on_longest_edge(rect), self.zipper_spacing * side)
            maps.append(ZipperMap(pts, interior=rect.mean()))
        return tuple(maps)

    def metric_coords(self, z):
        """Coordinates in which the ambient distance is computed.

        Euclidean: the chart itself.  Kobayashi: each coordinate sent to the unit
        disk by the conformal map of its box section.  Accepts (..., 2) arrays or a
        pair of jets.
        """
        if isinstance(z, tuple):
            if self.metric == "euclidean":
                return z
            return self._sections[0].to_disk(z[0]), self._sections[1].to_disk(z[1])
        z = np.asarray(z, dtype=complex)
        if self.metric == "euclidean":
            return z
        inside = self.box.contains(z)
        w = np.full(z.shape, np.nan + 0j)
        if np.any(inside):
            zi = z[inside]
            w[inside, 0] = self._sections[0].to_disk(zi[:, 0])
            w[inside, 1] = self._sections[1].to_disk(zi[:, 1])
        return w

    def coord_distance(self, u, v):
        """Ambient distance between points already in metric coordinates."""
        u = np.asarray(u, dtype=complex)
        v = np.asarray(v, dtype=complex)
        if self.metric == "euclidean":
            return np.sqrt(np.sum(np.abs(u - v) ** 2, axis=-1))
        return np.max(disk_distance(u, v), axis=-1)

    def distance(self, p, q):
        return self.coord_distance(self.metric_coords(p), self.metric_coords(q))

    def coord_tangent_norm(self, w, dw):
        """Norm of the tangent vector with metric-coordinate components dw at metric coordinates w."""
        w = np.asarray(w, dtype=complex)
        dw = np.asarray(dw, dtype=complex)
        if self.metric == "euclidean":
            return np.sqrt(np.sum(np.abs(dw) ** 2, axis=-1))
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.max(2.0 * np.abs(dw) / (1.0 - np.abs(w) ** 2), axis=-1)

    def tangent_norm(self, z, v):
        """Norm of the tangent vector v at z in the ambient metric."""
        z = np.asarray(z, dtype=complex)
        v = np.asarray(v, dtype=complex)
        if self.metric == "euclidean":
            return np.sqrt(np.sum(np.abs(v) ** 2, axis=-1))
        out = np.zeros(z.shape[:-1])
        for j in range(2):
            jet = self._sections[j].to_disk(Jet.variable(z[..., j], 1))
            w, dw = jet.c[0], jet.c[1]
            out = np.maximum(out, 2.0 * np.abs(dw * v[..., j]) / (1.0 - np.abs(w) ** 2))
        return out

    # ---- flows -----------------------------------------------------------

    @cached_property
    def _affine(self):
        return self.field.decoupled_affine()

    def closed_form(self, z, t):
        """Exact flow for decoupled affine fields, or None."""
        coef = self._affine
        if coef is None:
            return None
        a1, b1, a2, b2 = coef
        z = np.asarray(z, dtype=complex)
        t = np.asarray(t, dtype=complex)

        def one(u, a, b):
            if b == 0:
                return u + a * t
            return u * np.exp(b * t) + a * _expm1_over(b, t)

        return np.stack(np.broadcast_arrays(one(z[..., 0], a1, b1), one(z[..., 1], a2, b2)), axis=-1)

    def closed_form_jet(self, z, tjet):
        """Closed-form flow with a jet in the time variable."""
        a1, b1, a2, b2 = self._affine
        z = np.asarray(z, dtype=complex)

        def one(u, a, b):
            if b == 0:
                return tjet * a + u
            e = (tjet * b).exp()
            return e * (u + a / b) - a / b

        return one(z[..., 0], a1, b1), one(z[..., 1], a2, b2)

    def taylor_in_time(self, z, order):
        """Taylor coefficients in t of the trajectory through z (Picard recursion on jets)."""
        z = np.asarray(z, dtype=complex)
        x = Jet([z[..., 0]] + [np.zeros_like(z[..., 0])] * order)
        y = Jet([z[..., 1]] + [np.zeros_like(z[..., 1])] * order)
        for k in range(order):
            fx, fy = self.field.components(x, y)
            x.c[k + 1] = fx.c[k] / (k + 1)
            y.c[k + 1] = fy.c[k] / (k + 1)
        return x, y

    def flow_segment(self, starts, delta, check=True, stop_precision=1e-10):
        """Flow each start along the straight segment [0, delta] (delta per start).

        Trajectories that leave the box or enter the guard stop at the last safe
        point; ``fraction`` is the part of the segment travelled.
        """
        z = np.array(np.atleast_2d(np.asarray(starts, dtype=complex)))
        delta = np.broadcast_to(np.asarray(delta, dtype=complex), z.shape[:1]).copy()
        if self._affine is not None:
            return self._closed_segment(z, delta, check, stop_precision)
        return self._dp_segment(z, delta, check, stop_precision)

    def _closed_segment(self, z, delta, check, stop_precision, n_probe=256):
        n = z.shape[0]
        if not check:
            end = self.closed_form(z, delta)
            return FlowBatch(end, np.ones(n), np.full(n, STATUS_OK))
        s = np.linspace(0.0, 1.0, n_probe + 1)
        pts = self.closed_form(z[:, None, :], delta[:, None] * s[None, :])
        v = self.violation(pts)
        v[:, 0] = STATUS_OK
        bad = v != STATUS_OK
        first = np.where(bad.any(axis=1), bad.argmax(axis=1), -1)
        lo = np.where(first > 0, s[np.maximum(first - 1, 0)], 1.0)
        hi = np.where(first > 0, s[np.maximum(first, 0)], 1.0)
        code = np.where(first > 0, v[np.arange(n), np.maximum(first, 0)], STATUS_OK)
        self._find_grazes(z, delta, s, pts, first, lo, hi, code, stop_precision)
        frac = np.ones(n)
        status = np.full(n, STATUS_OK)
        idx = np.flatnonzero(code != STATUS_OK)
        if idx.size:
            lo, hi, code = lo[idx], hi[idx], code[idx]
            steps = int(math.ceil(math.log2(max(np.max(np.abs(delta[idx])), 1e-300) / (n_probe * stop_precision)))) + 1
            for _ in range(max(steps, 1)):
                mid = 0.5 * (lo + hi)
                vm = self.violation(self.closed_form(z[idx], delta[idx] * mid))
                good = vm == STATUS_OK
                lo = np.where(good, mid, lo)
                hi = np.where(good, hi, mid)
                code = np.where(good, code, vm)
            frac[idx] = lo
            status[idx] = code
        end = self.closed_form(z, delta * frac)
        return FlowBatch(end, frac, status)

    def _clearance(self, pts):
        """Euclidean room before a violation: min of box margin beyond the inset and distance beyond the guard."""
        c = self.box.margin(pts) - self.trace_inset
        if self.singular_points:
            c = np.minimum(c, self.distance_to_singular(pts) - self.guard_radius)
        return np.where(np.all(np.isfinite(pts), axis=-1), c, -np.inf)

    def _find_grazes(self, z, delta, s, pts, first, lo, hi, code, stop_precision, n_sub=8):
        """Catch excursions that slip between admissible probes (updates lo, hi, code in place).

        The clearance is 1-Lipschitz and for an affine field the path speed grows
        by at most exp(J |delta| h) over a parameter step h, so a probe segment
        whose endpoints leave enough clearance for that speed is certified; the
        others are subdivided until certified or a violation is found.
        """
        a1, b1, a2, b2 = self._affine
        J = max(abs(b1), abs(b2))
        last = np.where(first > 0, first - 1, s.size - 1)
        absd = np.abs(delta)
        c = self._clearance(pts)
        speed = np.linalg.norm(self.field(pts), axis=-1) * absd[:, None]
        h = s[1] - s[0]
        rows, cols = np.nonzero(np.arange(s.size - 1)[None, :] < last[:, None])
        growth = np.exp(J * absd[rows] * h)
        vmax = np.maximum(speed[rows, cols], speed[rows, cols + 1]) * growth
        bound = 0.5 * (c[rows, cols] + c[rows, cols + 1] - vmax * h)
        sus = bound <= 0
        seg_traj, seg_start = rows[sus], s[cols[sus]]
        t = np.linspace(0.0, 1.0, n_sub + 1)
        while seg_traj.size and h > stop_precision:
            sub = seg_start[:, None] + h * t[None, :]
            # segments beyond an already found violation are irrelevant
            keep = seg_start < lo[seg_traj]
            seg_traj, sub = seg_traj[keep], sub[keep]
            if seg_traj.size == 0:
                break
            p = self.closed_form(z[seg_traj][:, None, :], delta[seg_traj][:, None] * sub)
            vv = self.violation(p)
            badp = vv != STATUS_OK
            for k in np.flatnonzero(badp.any(axis=1)):
                j = int(badp[k].argmax())
                i = seg_traj[k]
                if sub[k, j] < hi[i]:
                    lo[i], hi[i], code[i] = sub[k, j - 1], sub[k, j], vv[k, j]
            h = h / n_sub
            cc = self._clearance(p)
            sp = np.linalg.norm(self.field(p), axis=-1) * absd[seg_traj][:, None]
            g = np.exp(J * absd[seg_traj] * h)[:, None]
            vm = np.maximum(sp[:, :-1], sp[:, 1:]) * g
            bd = 0.5 * (cc[:, :-1] + cc[:, 1:] - vm * h)
            r, q = np.nonzero((bd <= 0) & ~badp[:, :-1] & ~badp[:, 1:])
            seg_traj, seg_start = seg_traj[r], sub[r, q]

    def _dp_segment(self, z, delta, check, stop_precision, max_steps=200000):
        n = z.shape[0]
        s = np.zeros(n)
        absd = np.maximum(np.abs(delta), 1e-300)
        h = np.minimum(1.0, 0.05 / absd)
        hmin = stop_precision / absd
        status = np.full(n, STATUS_OK)
        active = absd > 1e-300
        rtol, atol = self.rtol, self.atol
        for _ in range(max_steps):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            zi, di, hi = z[idx], delta[idx], h[idx]
            hd = (hi * di)[:, None]
            k = []
            for stage in range(7):
                acc = zi.copy()
                for j, a in enumerate(_DP_A[stage]):
                    if a:
                        acc = acc + hd * (a * k[j])
                k.append(self.field(acc))
            znew = zi + hd * sum(b * kk for b, kk in zip(_DP_B, k) if b)
            err = hd * sum(e * kk for e, kk in zip(_DP_E, k) if e)
            scale = atol + rtol * np.maximum(np.abs(zi), np.abs(znew))
            en = np.max(np.abs(err) / scale, axis=1)
            en = np.where(np.isfinite(en), en, np.inf)
            accept = en <= 1.0
            if check:
                code = self.violation(znew)
                crossing = accept & (code != STATUS_OK)
            else:
                code = np.zeros(idx.size, dtype=int)
                crossing = np.zeros(idx.size, dtype=bool)
            # a step that crosses the boundary is retried with half the step until tiny
            tiny = crossing & (hi <= hmin[idx])
            retry = crossing & ~tiny
            good = accept & ~crossing
            z[idx[good]] = znew[good]
            s[idx[good]] += hi[good]
            fac = np.where(en > 0, 0.9 * en ** -0.2, 5.0)
            newh = np.where(good, hi * np.clip(fac, 0.2, 5.0), hi * np.clip(fac, 0.1, 0.9))
            newh = np.where(retry, 0.5 * hi, newh)
            remaining = 1.0 - s[idx]
            finished = good & (remaining <= 1e-14)
            newh = np.minimum(newh, np.maximum(remaining, 1e-300))
            h[idx] = newh
            status[idx[tiny]] = code[tiny]
            stop = finished | tiny
            active[idx[stop]] = False
        else:
            raise FoliationError("integration did not finish within the step budget")
        s = np.minimum(s, 1.0)
        return FlowBatch(z, s, status)

    def flow(self, start, path, record=True):
        """Flow a single point along a complex-time polyline starting at 0.

        ``path`` lists the vertices after 0.  Raises SingularApproach or DomainExit.
        """
        z = np.asarray(start, dtype=complex).reshape(1, 2)
        if self.violation(z)[0] == STATUS_SINGULAR:
            raise SingularApproach("start point is inside the guard radius", z[0], 0j)
        verts = np.concatenate([[0j], np.atleast_1d(np.asarray(path, dtype=complex))])
        trace = [z[0].copy()]
        for a, b in zip(verts[:-1], verts[1:]):
            if b == a:
                continue
            res = self.flow_segment(z, b - a)
            z = res.end
            if record:
                trace.append(z[0].copy())
            if res.status[0] != STATUS_OK:
                t = a + (b - a) * res.fraction[0]
                if res.status[0] == STATUS_SINGULAR:
                    raise SingularApproach(f"trajectory reached the guard radius at t={t:.6g}", z[0], t)
                raise DomainExit(f"trajectory left the box at t={t:.6g}", z[0], t)
        return FlowResult(z[0], np.array(trace))

    def flow_to(self, starts, times):
        """Endpoints of straight-segment flows from each start to time t (no stopping)."""
        res = self.flow_segment(starts, times, check=False)
        return res.end


def _expm1_over(b, t):
    """(e^{bt} - 1)/b, accurate for small bt."""
    return np.expm1(b * t) / b


def disk_distance(u, v):
    """Poincare distance on the unit disk; inf outside."""
    u = np.asarray(u, dtype=complex)
    v = np.asarray(v, dtype=complex)
    with np.errstate(invalid="ignore", divide="ignore"):
        den = (1.0 - np.abs(u) ** 2) * (1.0 - np.abs(v) ** 2)
        d = 2.0 * np.arcsinh(np.abs(u - v) / np.sqrt(den))
    return np.where((den > 0) & np.isfinite(d), d, np.inf)


# ---- flow boxes ---------------------------------------------------------


@dataclass(frozen=True)
class FlowBox:
    """Chart (zeta, s) -> flow(center + s n, r0 zeta) with zeta in the unit disk."""

    chart: FoliatedChart = field(repr=False)
    center: np.ndarray
    normal: np.ndarray
    r0: float
    transversal: np.ndarray
    transversal_radius: float

    def point(self, zeta, s):
        zeta = np.asarray(zeta, dtype=complex)
        s = np.asarray(s, dtype=complex)
        zeta, s = np.broadcast_arrays(zeta, s)
        base = self.center + s.ravel()[:, None] * self.normal
        out = self.chart.flow_to(base, self.r0 * zeta.ravel())
        return out.reshape(zeta.shape + (2,))

    def plaque_points(self, index, zeta):
        return self.point(zeta, np.full(np.shape(zeta), self.transversal[index]))

    def coordinates(self, y, iters=30, tol=1e-12):
        """Invert the chart by Newton's method: returns (zeta, s, converged)."""
        y = np.atleast_2d(np.asarray(y, dtype=complex))
        X0 = self.chart.field(self.center)
        nx = np.linalg.norm(X0)
        tau = (y - self.center) @ np.conj(X0) / nx ** 2
        s = (y - self.center) @ np.conj(self.normal)
        zeta = tau / self.r0
        conv = np.zeros(len(y), dtype=bool)
        h = 1e-7
        with np.errstate(all="ignore"):
            return self._newton(y, zeta, s, conv, h, iters, tol)

    def _newton(self, y, zeta, s, conv, h, iters, tol):
        for _ in range(iters):
            p = self.point(zeta, s)
            F = p - y
            dz = (self.point(zeta + h, s) - p) / h
            ds = (self.point(zeta, s + h) - p) / h
            det = dz[:, 0] * ds[:, 1] - dz[:, 1] * ds[:, 0]
            with np.errstate(divide="ignore", invalid="ignore"):
                stz = (ds[:, 1] * F[:, 0] - ds[:, 0] * F[:, 1]) / det
                sts = (-dz[:, 1] * F[:, 0] + dz[:, 0] * F[:, 1]) / det
            zeta = zeta - np.nan_to_num(stz)
            s = s - np.nan_to_num(sts)
            conv = np.linalg.norm(F, axis=1) < tol * (1 + np.linalg.norm(y, axis=1))
            if np.all(conv):
                break
        return zeta, s, conv

    def transversal_index(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=complex))
        return np.argmin(np.abs(s[:, None] - self.transversal[None, :]), axis=1)


def transversal_normal(field: PolynomialVectorField, x):
    X = field(np.asarray(x, dtype=complex))
    nrm = np.linalg.norm(X)
    if nrm == 0:
        raise FoliationError("vector field vanishes at the flow box center")
    return np.array([-np.conj(X[1]), np.conj(X[0])]) / nrm


def _flow_box_ok(chart, x, n, r0, tau, rho1, n_plaque=6, n_trans=5):
    g = np.linspace(-1, 1, n_trans)
    s = (g[:, None] + 1j * g[None, :]).ravel() * tau / math.sqrt(2)
    rad = np.linspace(0, 1, n_plaque + 1)[1:]
    ang = np.exp(2j * np.pi * np.arange(12) / 12)
    zeta = np.concatenate([[0j], (rad[:, None] * ang[None, :]).ravel()])
    base = x + s[:, None] * n
    starts = np.repeat(base, zeta.size, axis=0)
    times = np.tile(r0 * zeta, s.size)
    res = chart.flow_segment(starts, times)
    if not np.all(res.ok):
        return False
    pts = res.end.reshape(s.size, zeta.size, 2)
    if np.any(chart.distance_to_singular(pts) <= 0.5 * rho1):
        return False
    # distinct plaques stay apart: Gronwall lower bound with the field's Lipschitz constant
    L = float(np.max(np.abs(chart.field.jacobian(pts.reshape(-1, 2)))) * 2.0)
    spacing = float(np.min(np.abs(s[:, None] - s[None, :])[~np.eye(s.size, dtype=bool)]))
    floor = 0.25 * spacing * math.exp(-L * r0)
    flat = pts.reshape(-1, 2)
    lab = np.repeat(np.arange(s.size), zeta.size)
    D = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=-1)
    cross = lab[:, None] != lab[None, :]
    return bool(D[cross].min() > floor)


def build_flow_box(chart: FoliatedChart, x, rho1=None, r0_max=None, n_transversal=9, max_bisections=30):
    """Largest plaque radius (by halving) whose sampled chart is injective and stays in the box."""
    x = np.asarray(x, dtype=complex)
    rho1 = 10.0 * chart.guard_radius if rho1 is None else rho1
    d = float(chart.distance_to_singular(x))
    if d <= rho1:
        raise FoliationError(f"point at distance {d:.3g} from the singular set (need > {rho1:.3g})")
    if chart.box.margin(x) <= 0:
        raise FoliationError("flow box center is outside the box")
    n = transversal_normal(chart.field, x)
    speed = float(np.linalg.norm(chart.field(x)))
    room = min(float(chart.box.margin(x)), d - rho1)
    tau = 0.25 * room
    r0 = (room / speed) if r0_max is None else r0_max
    for _ in range(max_bisections):
        if _flow_box_ok(chart, x, n, r0, tau, rho1):
            break
        r0 *= 0.5
    else:
        raise FoliationError("no injective flow box found")
    g = np.linspace(-1, 1, int(math.sqrt(n_transversal)) if n_transversal > 1 else 1)
    s = (g[:, None] + 1j * g[None, :]).ravel() * tau / math.sqrt(2) if g.size > 1 else np.zeros(1, dtype=complex)
    return FlowBox(chart, x, n, float(r0), s, float(tau))


# ---- presets ------------------------------------------------------------

LINEAR_LAMBDA = (1.0 + 0j, 1j * math.sqrt(2.0))


def product_field():
    return PolynomialVectorField.from_terms(1, {(0, 0): 1.0}, {})


def linear_field(l1=LINEAR_LAMBDA[0], l2=LINEAR_LAMBDA[1]):
    return PolynomialVectorField.from_terms(1, {(1, 0): l1}, {(0, 1): l2})


def saddle_node_field():
    return PolynomialVectorField.from_terms(2, {(2, 0): 1.0}, {(0, 1): 1.0})


def random_quadratic_field(seed=0, scale=0.05):
    """Degree-2 field (x^2 - 1/4, y^2 - x/4) with Gaussian perturbations of every coefficient.

    The unperturbed field has four simple zeros inside the unit cube; small
    perturbations keep them simple and inside.
    """
    rng = np.random.default_rng(seed)
    base = PolynomialVectorField.from_terms(2, {(0, 0): -0.25, (2, 0): 1.0}, {(1, 0): -0.25, (0, 2): 1.0})
    m = len(monomial_exponents(2))
    cx = base.coeffs_x + scale * (rng.normal(size=m) + 1j * rng.normal(size=m))
    cy = base.coeffs_y + scale * (rng.normal(size=m) + 1j * rng.normal(size=m))
    return PolynomialVectorField(2, cx, cy)


def make_chart(preset="linear", metric="euclidean", half_width=1.0, guard_radius=None, field_json=None, seed=0,
               trace_inset=None):
    """Chart for a named preset.

    With the Kobayashi metric traced patches keep a layer of 1e-3 box sizes from
    the box sides, so discretization errors cannot push leaf points outside the
    box, where the metric coordinates are undefined.
    """
    box = Box.cube(half_width)
    if trace_inset is None:
        trace_inset = 1e-3 * box.size if metric == "kobayashi" else 0.0
    kw = dict(name=preset, trace_inset=trace_inset)
    if preset == "product":
        return FoliatedChart(product_field(), box, (), guard_radius, metric, **kw)
    if preset == "linear":
        return FoliatedChart(linear_field(), box, None, guard_radius, metric, **kw)
    if preset == "saddle-node":
        return FoliatedChart(saddle_node_field(), box, None, guard_radius, metric, **kw)
    if preset == "custom":
        fld = PolynomialVectorField.from_json(field_json) if field_json is not None else random_quadratic_field(seed)
        return FoliatedChart(fld, box, None, guard_radius, metric, **kw)
    raise ValueError(f"unknown preset {preset!r}")
