"""Poincaré disk geometry: distances, automorphism normal forms and displacements.

Points of the disk are plain Python or numpy complex numbers.  Distances use
the curvature -1 normalization ``d(0, r) = ln((1+r)/(1-r))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .jets import is_jet

TWO_PI = 2.0 * math.pi

# Constants of the automorphism displacement band (see ``aut_band_point``).
AUT_BAND_C1 = 8.0 * math.pi / math.sqrt(2.0)
AUT_BAND_C2 = 24.0

DEFAULT_GAP_THRESHOLD = 0.05
ATANH_CLAMP = 1.0 - 1e-15


class DiskDomainError(ValueError):
    """A point or argument lies outside the validity range of the disk model."""


def _check_in_disk(z, name="point"):
    m = np.abs(np.asarray(z, dtype=complex))
    if np.any(~np.isfinite(m)) or np.any(m >= 1.0):
        raise DiskDomainError(f"{name} must lie in the open unit disk (max modulus {float(np.max(m)):.17g})")


def wrap_angle(theta):
    """Reduce angles to (-pi, pi]."""
    t = np.asarray(theta, dtype=float)
    w = np.mod(t + math.pi, TWO_PI) - math.pi
    w = np.where(w == -math.pi, math.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def stable_atanh(x):
    """atanh with the clamp policy: values up to 1 - 1e-15 are clamped, larger ones rejected."""
    x = np.asarray(x, dtype=float)
    if np.any(x > ATANH_CLAMP + 1e-15) or np.any(x < 0):
        raise DiskDomainError("atanh argument outside [0, 1)")
    x = np.minimum(x, ATANH_CLAMP)
    out = 0.5 * (np.log1p(x) - np.log1p(-x))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class HypRadius:
    """A radius in the disk stored both hyperbolically (R) and Euclidean (r).

    ``one_minus_r`` keeps the complement 1 - r at full relative precision, which
    matters once R exceeds about 20.
    """

    R: float
    r: float
    one_minus_r: float

    @classmethod
    def from_R(cls, R):
        R = float(R)
        if not R >= 0:
            raise DiskDomainError("hyperbolic radius must be non-negative")
        comp = 2.0 / (math.exp(R) + 1.0) if R < 700 else 2.0 * math.exp(-R)
        return cls(R, math.tanh(R / 2.0), comp)

    @classmethod
    def from_r(cls, r, one_minus_r=None):
        r = float(r)
        if not 0 <= r < 1:
            raise DiskDomainError("Euclidean radius must lie in [0, 1)")
        comp = 1.0 - r if one_minus_r is None else float(one_minus_r)
        R = math.log(2.0 - comp) - math.log(comp)
        return cls(R, r, comp)

    @property
    def one_minus_r2(self):
        return self.one_minus_r * (1.0 + self.r)


def euclidean_radius(R):
    return np.tanh(np.asarray(R, dtype=float) / 2.0)


def hyperbolic_radius(r):
    r = np.asarray(r, dtype=float)
    return np.log1p(r) - np.log1p(-r)


def poincare_distance(a, b):
    """Poincaré distance between points of the open unit disk (vectorized)."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    _check_in_disk(a, "first point")
    _check_in_disk(b, "second point")
    den = np.sqrt((1.0 - np.abs(a) ** 2) * (1.0 - np.abs(b) ** 2))
    out = 2.0 * np.arcsinh(np.abs(a - b) / den)
    return float(out) if out.ndim == 0 else out


def pseudo_hyperbolic(a, b):
    """|a - b| / |1 - conj(b) a|, the Möbius-invariant chordal quantity."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    return np.abs(a - b) / np.abs(1.0 - np.conj(b) * a)


@dataclass(frozen=True)
class DiskAutomorphism:
    """The automorphism xi -> tau_zeta(e^{i theta} xi), tau_zeta(w) = (w + zeta)/(1 + conj(zeta) w)."""

    zeta: complex = 0j
    theta: float = 0.0

    def __post_init__(self):
        z = complex(self.zeta)
        if not abs(z) < 1:
            raise DiskDomainError("zeta must lie in the open unit disk")
        object.__setattr__(self, "zeta", z)
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def identity(cls):
        return cls(0j, 0.0)

    def apply(self, xi):
        """Image of disk points; also accepts a Jet."""
        rot = complex(np.exp(1j * self.theta))
        w = xi * rot if is_jet(xi) else rot * np.asarray(xi, dtype=complex)
        return (w + self.zeta) / (w * complex(np.conj(self.zeta)) + 1.0)

    __call__ = apply

    def inverse(self):
        return DiskAutomorphism(-np.exp(-1j * self.theta) * self.zeta, -self.theta)

    def norm_inf(self):
        return max(abs(self.zeta), abs(self.theta))


def compose(a1: DiskAutomorphism, a2: DiskAutomorphism) -> DiskAutomorphism:
    """Normal form of a1 o a2.

    Uses r_t o tau_z = tau_{e^{it} z} o r_t and
    tau_a o tau_b = tau_{(a+b)/(1+conj(a) b)} o r_phi with e^{i phi} = (1 + a conj(b))/(1 + conj(a) b).
    """
    a = a1.zeta
    b = np.exp(1j * a1.theta) * a2.zeta
    den = 1.0 + np.conj(a) * b
    zeta = (a + b) / den
    phi = np.angle((1.0 + a * np.conj(b)) / den)
    return DiskAutomorphism(complex(zeta), a1.theta + a2.theta + float(phi))


def normal_form_gap(a1: DiskAutomorphism, a2: DiskAutomorphism, threshold=DEFAULT_GAP_THRESHOLD):
    """(zeta, theta) with (tau_{z1} r_{t1})^{-1} o (tau_{z2} r_{t2}) = tau_zeta o r_theta.

    The two-sided bound 1/2 |delta| <= |(zeta, theta)| <= 3 |delta| only holds for
    small inputs, so larger ones are refused.
    """
    for name, a in (("first", a1), ("second", a2)):
        if abs(a.zeta) > threshold or abs(a.theta) > threshold:
            raise DiskDomainError(
                f"{name} automorphism (|zeta|={abs(a.zeta):.3g}, |theta|={abs(a.theta):.3g}) exceeds the "
                f"smallness threshold {threshold}; the sandwich bound is not guaranteed there"
            )
    g = compose(a1.inverse(), a2)
    return g.zeta, g.theta


def band_function(x):
    """f(x) = 2 atanh(1/sqrt(1+x^2)) = 2 asinh(1/x), strictly decreasing on (0, inf)."""
    x = np.asarray(x, dtype=float)
    out = 2.0 * np.arcsinh(1.0 / x)
    return float(out) if out.ndim == 0 else out


def band_function_inverse(y):
    """f^{-1}(y) = sqrt(1/tanh(y/2)^2 - 1) = 1/sinh(y/2)."""
    y = np.asarray(y, dtype=float)
    out = 1.0 / np.sinh(y / 2.0)
    return float(out) if out.ndim == 0 else out


def rotation_displacement(xi, theta):
    """d(xi, e^{i theta} xi) in closed form; zero at xi = 0 or theta = 0."""
    xi = np.asarray(xi, dtype=complex)
    _check_in_disk(xi)
    m = np.abs(xi)
    s = np.abs(np.sin(np.asarray(theta, dtype=float) / 2.0))
    out = 2.0 * np.arcsinh(2.0 * m * s / ((1.0 - m) * (1.0 + m)))
    return float(out) if out.ndim == 0 else out


def aut_displacement_ratio(xi, a: DiskAutomorphism):
    """Pseudo-hyperbolic displacement |N/D| of xi under a, written in half-angle form."""
    xi = np.asarray(xi, dtype=complex)
    _check_in_disk(xi)
    z, t = a.zeta, a.theta
    s = math.sin(t / 2.0)
    eh = np.exp(0.5j * t)
    num = 2j * xi * s + z / eh - np.conj(z) * eh * xi ** 2
    den = 2j * (s + np.imag(z * np.conj(xi) / eh)) - eh * (1.0 - np.abs(xi) ** 2)
    return np.abs(num / den)


def aut_displacement(xi, a: DiskAutomorphism):
    """d(xi, a(xi)) from the half-angle displacement formula."""
    x = aut_displacement_ratio(xi, a)
    if np.any(x >= 1.0):
        raise DiskDomainError("displacement ratio reached 1: image point not resolved inside the disk")
    return stable_atanh(x) * 2.0


def aut_band_point(a: DiskAutomorphism, rho, lam):
    """The point xi = sigma i (zeta/|zeta|) e^{-i theta/2} rho e^{i lam} of the displacement band.

    For |lam| <= pi/4, rho >= 1/4 and
    C2/eps2 * |(zeta,theta)| <= 1 - rho^2 <= |(zeta,theta)| / (C1 eps1)
    the displacement of xi lies in [eps1, eps2] whenever eps2 <= 4 and
    eps1 <= eps2 / (C1 C2), with C1 = 8 pi / sqrt 2 and C2 = 24.
    """
    z, t = a.zeta, a.theta
    unit = z / abs(z) if abs(z) > 0 else 1.0 + 0j
    s = math.sin(t / 2.0)
    sigma = -1.0 if s > 0 else 1.0
    return sigma * 1j * unit * np.exp(-0.5j * t) * np.asarray(rho) * np.exp(1j * np.asarray(lam))


def log_kernel_mass(R):
    """M_R = int_D log+(r/|zeta|) g_P = -2 pi log(1 - r^2), evaluated as 4 pi log cosh(R/2)."""
    R = R.R if isinstance(R, HypRadius) else float(R)
    if R <= 0:
        raise DiskDomainError("R must be positive")
    # log cosh(R/2) = R/2 - ln 2 + log1p(e^{-R})
    return 4.0 * math.pi * (R / 2.0 - math.log(2.0) + math.log1p(math.exp(-R)))


def _log_tanh_half(R):
    e = math.exp(-R)
    return math.log1p(-e) - math.log1p(e)


def _radius(x):
    return x if isinstance(x, HypRadius) else HypRadius.from_r(x)


def annulus_log_integral(r2, r1, r):
    """int_{r2}^{r1} log(r/rho) 4 rho/(1-rho^2)^2 drho via its closed antiderivative.

    Arguments may be Euclidean radii or :class:`HypRadius` values; the latter keep
    full precision at large hyperbolic radii.
    """
    h2, h1, h = _radius(r2), _radius(r1), _radius(r)
    if not (0 < h2.r <= h1.r <= h.r < 1):
        raise DiskDomainError("need 0 < r2 <= r1 <= r < 1")
    lt = _log_tanh_half(h.R)

    def antiderivative(x: HypRadius):
        sh2 = math.sinh(x.R / 2.0) ** 2  # rho^2 / (1 - rho^2)
        log_ratio = lt - _log_tanh_half(x.R)  # log(r / rho)
        log_cosh = x.R / 2.0 - math.log(2.0) + math.log1p(math.exp(-x.R))  # -log(1-rho^2)/2
        return 2.0 * sh2 * log_ratio + 2.0 * log_cosh

    return antiderivative(h1) - antiderivative(h2)


def annulus_log_integral_radial_cdf(rho, r):
    """Normalized radial CDF of the log-kernel density on D_r, from its closed form."""
    rho = np.asarray(rho, dtype=float)
    hr = HypRadius.from_r(r) if not isinstance(r, HypRadius) else r
    Rr = hr.R
    Rho = hyperbolic_radius(rho)
    sh2 = np.sinh(Rho / 2.0) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = (math.log1p(-math.exp(-Rr)) - math.log1p(math.exp(-Rr))) - (
            np.log1p(-np.exp(-Rho)) - np.log1p(np.exp(-Rho))
        )
        log_cosh = Rho / 2.0 - math.log(2.0) + np.log1p(np.exp(-Rho))
        val = 2.0 * sh2 * np.where(rho > 0, log_ratio, 0.0) + 2.0 * log_cosh
    total = log_kernel_mass(hr) / TWO_PI
    return np.clip(val / total, 0.0, 1.0)
