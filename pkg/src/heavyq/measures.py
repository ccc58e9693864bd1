"""Finite signed measures on [0, inf) built from terms c * t**m * exp(-a*t).

This family is closed under convolution and contains every law with a
rational transform whose poles lie in the open left half-plane, plus an
optional atom at zero.  Rates and coefficients may be complex (conjugate
pairs combine to damped cosines); survival evaluation, Laplace transforms,
and the exponentially-tilted tail integrals used by the correction term all
have closed forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .polyalg import RationalFn, RootSet, partial_fractions, poly_roots

RATE_MERGE_TOL = 1e-9


class MeasureError(ValueError):
    """Invalid measure construction or operation."""


@dataclass(frozen=True)
class ExpPolyMeasure:
    """Atom at zero plus density terms (rate, power, coef): coef * t**power * e**(-rate t)."""

    atom: complex = 0.0
    terms: tuple = field(default_factory=tuple)

    @staticmethod
    def point_mass(w: complex = 1.0) -> "ExpPolyMeasure":
        return ExpPolyMeasure(atom=w, terms=())

    @staticmethod
    def from_rational(f: RationalFn, den_roots: RootSet | None = None,
                      cluster_tol: float = 1e-7) -> "ExpPolyMeasure":
        """Invert a proper rational transform with left-half-plane poles.

        A constant part of the transform becomes the atom at zero.  Raises
        when a pole has nonnegative real part.
        """
        if den_roots is None:
            den_roots = poly_roots(f.den, cluster_tol)
        for rho, _ in den_roots:
            if rho.real >= 0:
                raise MeasureError(f"pole {rho} not in the open left half-plane")
        pf = partial_fractions(f, den_roots)
        atom = pf.pop(None, 0j)
        terms = []
        for (rho, power), coef in pf.items():
            if coef == 0:
                continue
            # coef/(s-rho)^power  <->  coef * t^(power-1) e^(rho t) / (power-1)!
            terms.append((-rho, power - 1, coef / math.factorial(power - 1)))
        return ExpPolyMeasure(atom=atom, terms=_merge(terms))

    @staticmethod
    def erlang(rate: complex, shape: int) -> "ExpPolyMeasure":
        """Erlang(shape, rate) law; complex rate is the analytic continuation."""
        if shape < 1:
            raise MeasureError("Erlang shape must be >= 1")
        c = rate ** shape / math.factorial(shape - 1)
        return ExpPolyMeasure(atom=0.0, terms=((rate, shape - 1, c),))

    # -- bookkeeping ----------------------------------------------------
    def total_mass(self) -> complex:
        return self.atom + sum(c * math.factorial(m) / a ** (m + 1) for a, m, c in self.terms)

    def mean(self) -> complex:
        return sum(c * math.factorial(m + 1) / a ** (m + 2) for a, m, c in self.terms)

    def is_real(self, tol: float = 1e-9) -> bool:
        vals = self.survival(np.linspace(0.0, 5.0, 7))
        return bool(np.max(np.abs(vals.imag)) <= tol)

    def scaled(self, c: complex) -> "ExpPolyMeasure":
        return ExpPolyMeasure(self.atom * c, tuple((a, m, k * c) for a, m, k in self.terms))

    def __add__(self, other: "ExpPolyMeasure") -> "ExpPolyMeasure":
        return ExpPolyMeasure(self.atom + other.atom, _merge(list(self.terms) + list(other.terms)))

    # -- evaluation -------------------------------------------------------
    def density(self, t):
        """Density of the absolutely continuous part (atom excluded)."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=complex)
        for a, m, c in self.terms:
            out += c * t ** m * np.exp(-a * t)
        return out

    def survival(self, t):
        """Mass of (t, inf); the atom at zero never counts for t >= 0."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=complex)
        for a, m, c in self.terms:
            # integral_t^inf x^m e^(-a x) dx = m!/a^(m+1) e^(-a t) sum (a t)^i/i!
            acc = np.zeros(t.shape, dtype=complex)
            at = a * t
            pw = np.ones(t.shape, dtype=complex)
            for i in range(m + 1):
                acc += pw / math.factorial(i)
                pw = pw * at
            out += c * math.factorial(m) / a ** (m + 1) * np.exp(-at) * acc
        return out

    def laplace(self, s):
        out = self.atom * np.ones_like(np.asarray(s, dtype=complex))
        for a, m, c in self.terms:
            out = out + c * math.factorial(m) / (np.asarray(s, dtype=complex) + a) ** (m + 1)
        return out

    def survival_terms(self) -> "ExpPolyMeasure":
        """Survival function itself as exp-poly terms (no atom)."""
        terms = []
        for a, m, c in self.terms:
            for i in range(m + 1):
                terms.append((a, i, c * math.factorial(m) / a ** (m + 1) * a ** i / math.factorial(i)))
        return ExpPolyMeasure(0.0, _merge(terms))

    def expo_tail_transform(self, rho: complex, t):
        """integral_0^inf e^(-rho y) P(X > t + y) dy, elementwise in t."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=complex)
        for a, m, c in self.survival_terms().terms:
            # integral_0^inf e^(-rho y) (t+y)^m e^(-a(t+y)) dy
            acc = np.zeros(t.shape, dtype=complex)
            for k in range(m + 1):
                acc += math.comb(m, k) * t ** (m - k) * math.factorial(k) / (a + rho) ** (k + 1)
            out += c * np.exp(-a * t) * acc
        return out

    def between_exp(self, rho: complex, t):
        """P(t < X < t + Y) for Y ~ Exp(rho) independent; analytic in rho."""
        return self.survival(t) - rho * self.expo_tail_transform(rho, t)

    def tilted_tail(self, rho: complex, t):
        """integral_t^inf f_X(x) e^(-rho (x - t)) dx for the density part."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=complex)
        for a, m, c in self.terms:
            acc = np.zeros(t.shape, dtype=complex)
            for k in range(m + 1):
                acc += math.comb(m, k) * t ** (m - k) * math.factorial(k) / (a + rho) ** (k + 1)
            out += c * np.exp(-a * t) * acc
        return out

    # -- convolution ------------------------------------------------------
    def convolve(self, other: "ExpPolyMeasure") -> "ExpPolyMeasure":
        atom = self.atom * other.atom
        terms = []
        for a, m, c in self.terms:
            if other.atom != 0:
                terms.append((a, m, c * other.atom))
        for a, m, c in other.terms:
            if self.atom != 0:
                terms.append((a, m, c * self.atom))
        for a1, m1, c1 in self.terms:
            for a2, m2, c2 in other.terms:
                terms.extend(_convolve_pair(a1, m1, c1, a2, m2, c2))
        return ExpPolyMeasure(atom, _merge(terms))


def _convolve_pair(a1, m1, c1, a2, m2, c2):
    """Convolution of c1 t^m1 e^(-a1 t) with c2 t^m2 e^(-a2 t)."""
    if abs(a1 - a2) <= RATE_MERGE_TOL * max(1.0, abs(a1)):
        a = (a1 + a2) / 2
        c = c1 * c2 * math.factorial(m1) * math.factorial(m2) / math.factorial(m1 + m2 + 1)
        return [(a, m1 + m2 + 1, c)]
    # transform product: c1 c2 m1! m2! / ((s+a1)^(m1+1) (s+a2)^(m2+1))
    p, q = m1 + 1, m2 + 1
    front = c1 * c2 * math.factorial(m1) * math.factorial(m2)
    out = []
    for n in range(p):  # poles at -a1
        coef = front * (-1) ** n * math.comb(q - 1 + n, n) / (a2 - a1) ** (q + n)
        power = p - n
        out.append((a1, power - 1, coef / math.factorial(power - 1)))
    for n in range(q):  # poles at -a2
        coef = front * (-1) ** n * math.comb(p - 1 + n, n) / (a1 - a2) ** (p + n)
        power = q - n
        out.append((a2, power - 1, coef / math.factorial(power - 1)))
    return out


def _merge(terms):
    """Combine terms sharing (rate, power); drop exact zeros; sort for determinism."""
    bucket: dict = {}
    keys: list = []
    for a, m, c in terms:
        placed = False
        for key in keys:
            ka, km = key
            if km == m and abs(ka - a) <= RATE_MERGE_TOL * max(1.0, abs(ka)):
                bucket[key] += c
                placed = True
                break
        if not placed:
            key = (a, m)
            keys.append(key)
            bucket[key] = c
    out = [(a, m, c) for (a, m), c in bucket.items() if c != 0]
    out.sort(key=lambda x: (round(x[0].real if isinstance(x[0], complex) else x[0], 12),
                            round(x[0].imag if isinstance(x[0], complex) else 0.0, 12), x[1]))
    return tuple(out)
