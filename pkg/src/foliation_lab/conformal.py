"""Conformal maps between the unit disk and polygonal Jordan domains.

The map is built with the geodesic zipper: each boundary point is unzipped by
an elementary slit map, so the composite is an explicit chain of Möbius maps
and square roots.  Both directions accept :class:`~foliation_lab.jets.Jet`
inputs, which yields exact derivatives of the composite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .jets import Jet, sqrt_principal, sqrt_upper, value_of


class ConformalMapError(RuntimeError):
    pass


def signed_area(poly):
    z = np.asarray(poly, dtype=complex)
    zn = np.roll(z, -1)
    return 0.5 * float(np.sum(z.real * zn.imag - zn.real * z.imag))


def start_on_longest_edge(vertices):
    """Reorder the vertices so the boundary starts at the midpoint of the longest edge.

    The zipper's first slit is the segment between the first two points; starting
    it on a corner lets the image of the interior drift toward the real axis and
    the final Mobius step then loses all its digits.
    """
    v = np.asarray(vertices, dtype=complex)
    k = int(np.argmax(np.abs(np.roll(v, -1) - v)))
    v = np.roll(v, -k)
    return np.concatenate([[0.5 * (v[0] + v[1])], v[1:], v[:1]])


def resample_polygon(vertices, spacing):
    """Insert points along each edge so consecutive points are at most ``spacing`` apart."""
    v = np.asarray(vertices, dtype=complex)
    out = []
    for a, b in zip(v, np.roll(v, -1)):
        k = max(1, int(math.ceil(abs(b - a) / spacing)))
        out.append(a + (b - a) * np.arange(k) / k)
    return np.concatenate(out)


def resample_polygon_graded(vertices, h0, center=0j, scale=1.0):
    """Resample with local spacing h0 * max(1, |p - center| / scale).

    Points far from ``center`` carry little harmonic measure seen from it, so they
    are spaced proportionally to their distance.
    """
    v = np.asarray(vertices, dtype=complex)
    out = []
    for a, b in zip(v, np.roll(v, -1)):
        L = abs(b - a)
        if L == 0:
            continue
        s = 0.0
        params = []
        while s < L:
            params.append(s)
            s += h0 * max(1.0, abs(a + (b - a) * (s / L) - center) / scale)
        if len(params) > 1 and L - params[-1] < 0.3 * (params[-1] - params[-2]):
            params.pop()
        out.extend(a + (b - a) * (np.array(params) / L))
    return np.array(out)


def distance_to_polygon(poly, points):
    """Euclidean distance from each point to the closed polygonal curve."""
    a = np.asarray(poly, dtype=complex)
    b = np.roll(a, -1)
    p = np.atleast_1d(np.asarray(points, dtype=complex))
    out = np.full(p.shape, np.inf)
    d = b - a
    dd = np.maximum(np.abs(d) ** 2, 1e-300)
    for start in range(0, p.size, 2048):
        q = p[start:start + 2048, None]
        s = np.clip(((q - a) * np.conj(d)).real / dd, 0.0, 1.0)
        out[start:start + 2048] = np.min(np.abs(q - (a + s * d)), axis=1)
    return out


def polygon_contains(poly, points):
    """Even-odd point-in-polygon test, vectorized over points."""
    a = np.asarray(poly, dtype=complex)
    b = np.roll(a, -1)
    p = np.atleast_1d(np.asarray(points, dtype=complex))
    inside = np.zeros(p.shape, dtype=bool)
    for start in range(0, p.size, 2048):
        q = p[start:start + 2048, None]
        cond = (a.imag > q.imag) != (b.imag > q.imag)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = a.real + (q.imag - a.imag) * (b.real - a.real) / (b.imag - a.imag)
        inside[start:start + 2048] = np.sum(cond & (q.real < xcross), axis=1) % 2 == 1
    return inside


def is_simple_polygon(poly):
    """True when no two non-adjacent edges intersect."""
    a = np.asarray(poly, dtype=complex)
    b = np.roll(a, -1)
    n = a.size

    def cross(u, v):
        return u.real * v.imag - u.imag * v.real

    for i in range(n):
        p, r = a[i], b[i] - a[i]
        q = a[i + 2:]
        s = b[i + 2:] - q
        if i == 0:
            q, s = q[:-1], s[:-1]
        if q.size == 0:
            continue
        denom = cross(r, s)
        ok = np.abs(denom) > 1e-300
        with np.errstate(divide="ignore", invalid="ignore"):
            t = cross(q - p, s) / denom
            u = cross(q - p, r) / denom
        hit = ok & (t > 0) & (t < 1) & (u > 0) & (u < 1)
        if np.any(hit):
            return False
    return True


def _affine_or_identity(w, b):
    return w if math.isinf(b) else w / (1.0 - w / b)


@dataclass(frozen=True)
class _ZipperParams:
    z0: complex
    z1: complex
    slits: tuple
    zlast: float
    sign: float
    a: complex
    rot: complex
    shift: complex = 0j


class ZipperMap:
    """Conformal map of a polygonal domain onto the unit disk.

    ``to_disk`` sends the domain to the disk with ``interior`` going to 0 and a
    positive derivative there; ``from_disk`` is its inverse ``psi``.
    """

    def __init__(self, boundary, interior=0j):
        z = np.asarray(boundary, dtype=complex)
        if z.size < 4:
            raise ConformalMapError("need at least four boundary points")
        if signed_area(z) < 0:
            z = z[::-1]
        self.boundary = z
        self.interior = complex(interior)
        z0, z1 = z[0], z[1]
        w = np.concatenate([z[2:], [self.interior]])
        w = 1j * np.sqrt((w - z1) / (w - z0))
        zinf = math.inf
        slits = []
        m = w.size - 2
        for k in range(m):
            a = w[k]
            if a.imag <= 0:
                a = complex(a.real, max(a.imag, 1e-300))
            b = abs(a) ** 2 / a.real if a.real != 0 else math.inf
            c = abs(a) ** 2 / a.imag
            slits.append((b, c))
            if math.isinf(zinf):
                zinf = math.copysign(math.hypot(b, c), -b) if not math.isinf(b) else math.inf
            else:
                uu = _affine_or_identity(zinf, b)
                zinf = math.copysign(math.hypot(uu, c), uu)
            rest = w[k + 1:]
            u = _affine_or_identity(rest, b)
            v = np.sqrt(u * u + c * c + 0j)
            v = np.where(v.imag < 0, -v, v)
            real_axis = np.abs(v.imag) < 1e-300
            v = np.where(real_axis & (u.real < 0), -np.abs(v.real) + 0j, v)
            w = np.concatenate([w[:k + 1], v])
        if math.isinf(zinf):
            raise ConformalMapError("degenerate boundary: image of the base point is at infinity")
        rest = w[m:]
        u = rest / (1.0 - rest / zinf)
        u = -(u * u)
        sign = -1.0
        if u[-1].imag < 0:
            sign = 1.0
            u = -u
        self._p = _ZipperParams(z0, z1, tuple(slits), float(zinf), sign, complex(u[-1]), 1.0 + 0j)
        d = self.to_disk(Jet.variable(np.array([self.interior]), 1)).c[1][0]
        if not np.isfinite(d) or d == 0:
            raise ConformalMapError("conformal map has a degenerate derivative at the base point")
        self._p = _ZipperParams(z0, z1, tuple(slits), float(zinf), sign, complex(u[-1]), abs(d) / d)
        # absorb the round-off in psi(0) so the base point is reproduced exactly
        shift = self.interior - complex(self.from_disk(np.zeros(1))[0])
        self._p = _ZipperParams(z0, z1, tuple(slits), float(zinf), sign, complex(u[-1]), abs(d) / d, shift)

    @property
    def n_maps(self):
        return len(self._p.slits)

    def to_disk(self, z):
        """Forward map Omega -> D; accepts arrays or jets."""
        p = self._p
        z = z - p.shift
        w = 1j * sqrt_principal((z - p.z1) / (z - p.z0))
        for b, c in p.slits:
            u = _affine_or_identity(w, b)
            w = sqrt_upper(u * u + c * c)
        u = w / (1.0 - w / p.zlast)
        u = (u * u) * p.sign
        return ((u - p.a) / (u - np.conj(p.a))) * p.rot

    def from_disk(self, xi):
        """Inverse map D -> Omega (the uniformization psi); accepts arrays or jets."""
        p = self._p
        xi = xi * (1.0 / p.rot)
        u = (xi * np.conj(p.a) - p.a) / (xi - 1.0)
        w = sqrt_upper(u * p.sign)
        w = w / (1.0 + w / p.zlast)
        for b, c in reversed(p.slits):
            v = sqrt_upper(w * w - c * c)
            w = v if math.isinf(b) else v / (1.0 + v / b)
        s = -(w * w)
        return (p.z1 - s * p.z0) / (1.0 - s) + p.shift

    def derivative_at_center(self):
        """psi'(0), real and positive by construction."""
        jet = self.from_disk(Jet.variable(np.zeros(1), 1))
        return float(value_of(jet.c[1])[0].real)

    def jets(self, xi, order):
        """Taylor jets of psi at the given disk points."""
        return self.from_disk(Jet.variable(np.asarray(xi, dtype=complex), order))

    def boundary_residual(self, n=4096, radius=1.0 - 1e-9):
        """Max distance from psi(circle near 1) to the boundary polygon."""
        xi = radius * np.exp(2j * np.pi * np.arange(n) / n)
        img = self.from_disk(xi)
        return float(np.max(distance_to_polygon(self.boundary, img)))


def disk_to_square_derivative(half_side=1.0):
    """psi'(0) for the conformal map of D onto the square of half-side ``half_side``.

    From the Schwarz-Christoffel integral psi(xi) = C int_0^xi (1 + s^4)^(-1/2) ds,
    evaluated along the diagonal xi = e^{i pi/4} t the corner is reached at t = 1:
    h (1 + i) = C K e^{i pi/4} with K = int_0^1 (1 - t^4)^(-1/2) dt = Gamma(1/4)^2 / (4 sqrt(2 pi)),
    so C = h sqrt2 / K.
    """
    k = math.gamma(0.25) ** 2 / (4.0 * math.sqrt(2.0 * math.pi))
    return half_side * math.sqrt(2.0) / k
