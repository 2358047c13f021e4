"""Truncated Taylor series arithmetic for holomorphic maps.

A :class:`Jet` stores the normalized Taylor coefficients ``c[k] = f^(k)(p)/k!``
of a holomorphic function at a batch of base points.  Composition of
elementary maps on jets propagates derivatives exactly (up to rounding), which
is how the conformal maps and leaf maps get their derivatives without finite
differences.
"""

from __future__ import annotations

import numpy as np


class Jet:
    """Truncated power series ``sum_k c[k] h^k`` with array-valued coefficients."""

    __slots__ = ("c",)
    __array_ufunc__ = None

    def __init__(self, coeffs):
        self.c = [np.asarray(ck, dtype=complex) for ck in coeffs]

    @classmethod
    def variable(cls, base, order):
        """Identity map ``p + h`` at the base points ``p``."""
        base = np.asarray(base, dtype=complex)
        coeffs = [base]
        if order >= 1:
            coeffs.append(np.ones_like(base))
        coeffs.extend(np.zeros_like(base) for _ in range(order - 1))
        return cls(coeffs)

    @property
    def order(self):
        return len(self.c) - 1

    @property
    def value(self):
        return self.c[0]

    def derivative(self, k=1):
        """k-th derivative at the base points."""
        return self.c[k] * float(np.prod(np.arange(1, k + 1)))

    def _lift(self, other):
        if isinstance(other, Jet):
            return other
        other = np.asarray(other, dtype=complex)
        return Jet([other + 0 * self.c[0]] + [np.zeros_like(self.c[0])] * self.order)

    def __add__(self, other):
        if isinstance(other, Jet):
            return Jet([a + b for a, b in zip(self.c, other.c)])
        return Jet([self.c[0] + other] + self.c[1:])

    __radd__ = __add__

    def __neg__(self):
        return Jet([-a for a in self.c])

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Jet):
            return Jet([a * other for a in self.c])
        n = self.order
        out = []
        for k in range(n + 1):
            acc = self.c[0] * other.c[k]
            for j in range(1, k + 1):
                acc = acc + self.c[j] * other.c[k - j]
            out.append(acc)
        return Jet(out)

    __rmul__ = __mul__

    def reciprocal(self):
        b = self.c
        inv0 = 1.0 / b[0]
        q = [inv0]
        for k in range(1, self.order + 1):
            acc = b[k] * q[0]
            for j in range(1, k):
                acc = acc + b[k - j] * q[j]
            q.append(-acc * inv0)
        return Jet(q)

    def __truediv__(self, other):
        if not isinstance(other, Jet):
            return Jet([a / other for a in self.c])
        a, b = self.c, other.c
        inv0 = 1.0 / b[0]
        q = []
        for k in range(self.order + 1):
            acc = a[k]
            for j in range(k):
                acc = acc - q[j] * b[k - j]
            q.append(acc * inv0)
        return Jet(q)

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, n):
        if n != int(n) or n < 0:
            raise ValueError("only non-negative integer powers are supported")
        out = self._lift(1.0)
        base = self
        n = int(n)
        while n:
            if n & 1:
                out = out * base
            base = base * base
            n >>= 1
        return out

    def sqrt_with(self, s0):
        """Square root whose constant term is the given branch value ``s0``."""
        s = [np.asarray(s0, dtype=complex)]
        two_s0 = 2.0 * s[0]
        for k in range(1, self.order + 1):
            acc = self.c[k]
            for j in range(1, k):
                acc = acc - s[j] * s[k - j]
            s.append(acc / two_s0)
        return Jet(s)

    def exp(self):
        e = [np.exp(self.c[0])]
        for k in range(1, self.order + 1):
            acc = 0
            for j in range(1, k + 1):
                acc = acc + j * self.c[j] * e[k - j]
            e.append(acc / k)
        return Jet(e)

    def log(self):
        a = self.c
        out = [np.log(a[0])]
        inv0 = 1.0 / a[0]
        for k in range(1, self.order + 1):
            acc = k * a[k]
            for j in range(1, k):
                acc = acc - j * out[j] * a[k - j]
            out.append(acc * inv0 / k)
        return Jet(out)

    def shifted(self):
        """The series with its constant term removed, ready for composition."""
        return Jet([np.zeros_like(self.c[0])] + self.c[1:])

    def evaluate(self, h):
        """Evaluate the truncated series at offsets ``h`` by Horner's rule."""
        h = np.asarray(h, dtype=complex)
        acc = self.c[-1] * np.ones_like(h)
        for ck in reversed(self.c[:-1]):
            acc = acc * h + ck
        return acc

    def compose_after(self, inner):
        """Series of ``self(p + (inner - inner(p)))`` in the variable of ``inner``.

        ``self`` holds the coefficients of an outer function at ``inner.value``.
        """
        h = inner.shifted()
        acc = self._lift(self.c[-1])
        for ck in reversed(self.c[:-1]):
            acc = acc * h + ck
        return acc


def is_jet(x):
    return isinstance(x, Jet)


def value_of(x):
    return x.c[0] if isinstance(x, Jet) else x


def sqrt_upper(z):
    """Square root on the closed upper half plane branch (``Im >= 0``)."""
    if isinstance(z, Jet):
        s0 = sqrt_upper(z.c[0])
        return z.sqrt_with(s0)
    s = np.sqrt(np.asarray(z, dtype=complex))
    return np.where(s.imag < 0, -s, s)


def sqrt_principal(z):
    if isinstance(z, Jet):
        return z.sqrt_with(np.sqrt(z.c[0]))
    return np.sqrt(np.asarray(z, dtype=complex))


def jexp(z):
    return z.exp() if isinstance(z, Jet) else np.exp(z)
