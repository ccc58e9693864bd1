"""Polynomial and rational-function arithmetic over complex coefficients.

Polynomials are stored as ascending coefficient arrays.  Root finding goes
through the companion matrix with Newton polishing, followed by deterministic
multiplicity clustering; partial fractions are computed by local Taylor
(series) expansion at each pole, which solves the derivative-matching
conditions for repeated poles in triangular form.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

_EPS = np.finfo(float).eps

# HEAVYQ_PRECISION=extended switches evaluation/refinement to 80-bit floats;
# companion eigenvalues stay in double (LAPACK has no long-double path).
def _extended() -> bool:
    return os.environ.get("HEAVYQ_PRECISION", "") == "extended"


class PolyalgError(ValueError):
    """Invalid input to a polynomial routine."""


class SingularMatrixError(PolyalgError):
    """Pivot collapsed during elimination; upstream model is degenerate."""


def _trim(c: np.ndarray) -> np.ndarray:
    """Drop trailing (near-)zero coefficients; empty array is the zero poly."""
    c = np.asarray(c, dtype=complex)
    if c.ndim != 1:
        raise PolyalgError("coefficients must be one-dimensional")
    nz = np.nonzero(c)[0]
    if nz.size == 0:
        return np.zeros(0, dtype=complex)
    return c[: nz[-1] + 1].copy()


@dataclass(frozen=True)
class Poly:
    """Dense polynomial, coefficients ascending; the zero poly is empty."""

    coeffs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coeffs", _trim(self.coeffs))
        self.coeffs.setflags(write=False)

    # -- constructors -------------------------------------------------
    @staticmethod
    def zero() -> "Poly":
        return Poly(np.zeros(0))

    @staticmethod
    def one() -> "Poly":
        return Poly(np.ones(1))

    @staticmethod
    def monomial(k: int, c: complex = 1.0) -> "Poly":
        a = np.zeros(k + 1, dtype=complex)
        a[k] = c
        return Poly(a)

    @staticmethod
    def from_roots(roots) -> "Poly":
        """Monic polynomial with the given roots (with repetition)."""
        c = np.ones(1, dtype=complex)
        for r in roots:
            c = np.polynomial.polynomial.polymul(c, np.array([-r, 1.0]))
        return Poly(c)

    # -- queries -------------------------------------------------------
    @property
    def is_zero(self) -> bool:
        return self.coeffs.size == 0

    @property
    def degree(self) -> int:
        """Degree; -1 for the zero polynomial."""
        return self.coeffs.size - 1

    @property
    def lead(self) -> complex:
        if self.is_zero:
            return 0.0 + 0.0j
        return complex(self.coeffs[-1])

    def __call__(self, s):
        if self.is_zero:
            return np.zeros_like(np.asarray(s, dtype=complex)) if np.ndim(s) else 0j
        c = self.coeffs
        if _extended():
            c = c.astype(np.clongdouble)
            s = np.asarray(s, dtype=np.clongdouble)
            out = np.polynomial.polynomial.polyval(s, c)
            return out.astype(complex) if np.ndim(out) else complex(out)
        return np.polynomial.polynomial.polyval(np.asarray(s, dtype=complex), c)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other: "Poly") -> "Poly":
        if self.is_zero:
            return other
        if other.is_zero:
            return self
        return Poly(np.polynomial.polynomial.polyadd(self.coeffs, other.coeffs))

    def __sub__(self, other: "Poly") -> "Poly":
        if other.is_zero:
            return self
        if self.is_zero:
            return other.scale(-1.0)
        return Poly(np.polynomial.polynomial.polysub(self.coeffs, other.coeffs))

    def __mul__(self, other: "Poly") -> "Poly":
        if self.is_zero or other.is_zero:
            return Poly.zero()
        return Poly(np.polynomial.polynomial.polymul(self.coeffs, other.coeffs))

    def scale(self, c: complex) -> "Poly":
        if self.is_zero or c == 0:
            return Poly.zero()
        return Poly(self.coeffs * c)

    def deriv(self, order: int = 1) -> "Poly":
        if self.is_zero or self.degree < order:
            return Poly.zero()
        return Poly(np.polynomial.polynomial.polyder(self.coeffs, order))

    def pow(self, k: int) -> "Poly":
        out = Poly.one()
        for _ in range(k):
            out = out * self
        return out

    def shifted(self, c: complex) -> np.ndarray:
        """Taylor coefficients of p(c + h) in h, by repeated synthetic division."""
        if self.is_zero:
            return np.zeros(0, dtype=complex)
        b = self.coeffs[::-1].astype(complex).copy()  # descending
        n = b.size
        out = np.zeros(n, dtype=complex)
        for k in range(n):
            for i in range(1, n - k):
                b[i] += c * b[i - 1]
            out[k] = b[n - 1 - k]
        return out


@dataclass(frozen=True)
class RationalFn:
    """Ratio of two polynomials; the denominator must be nonzero."""

    num: Poly
    den: Poly

    def __post_init__(self):
        if self.den.is_zero:
            raise PolyalgError("zero denominator")

    def __call__(self, s):
        return self.num(s) / self.den(s)

    def deriv_at(self, s: complex) -> complex:
        n, d = self.num(s), self.den(s)
        return (self.num.deriv()(s) * d - n * self.den.deriv()(s)) / (d * d)


@dataclass(frozen=True)
class RootSet:
    """Clustered roots with multiplicities; summed multiplicity is the degree."""

    roots: tuple
    multiplicities: tuple

    def __post_init__(self):
        if len(self.roots) != len(self.multiplicities):
            raise PolyalgError("roots/multiplicities length mismatch")

    def __iter__(self):
        return iter(zip(self.roots, self.multiplicities))

    def __len__(self):
        return len(self.roots)

    @property
    def total(self) -> int:
        return int(sum(self.multiplicities))

    def expanded(self) -> list:
        out = []
        for r, m in self:
            out.extend([r] * m)
        return out


def _newton_polish(coeffs: np.ndarray, x: complex, mult: int = 1, iters: int = 30) -> complex:
    """Modified Newton x -> x - mult*f/f' with step damping and a cap."""
    dtype = np.clongdouble if _extended() else complex
    c = coeffs.astype(dtype)
    dc = np.polynomial.polynomial.polyder(c)
    x = dtype(x)
    scale = max(1.0, float(abs(x)))
    for _ in range(iters):
        f = np.polynomial.polynomial.polyval(x, c)
        df = np.polynomial.polynomial.polyval(x, dc)
        if df == 0:
            break
        step = mult * f / df
        if abs(step) > 0.5 * scale:
            step = step / abs(step) * 0.5 * scale
        x = x - step
        if abs(step) <= 4 * _EPS * max(1.0, abs(x)):
            break
    return complex(x)


def _coefficient_bounds(coeffs: np.ndarray, c: complex) -> np.ndarray:
    """Backward-error scale of the Taylor coefficients of p at c.

    bound[k] is how much |p^{(k)}(c)/k!| can move under relative coefficient
    perturbations of size one; used to decide whether a cluster of roots is
    numerically a single multiple root.
    """
    n = coeffs.size
    mags = np.abs(coeffs)
    ac = abs(c)
    bounds = np.zeros(n)
    for k in range(n):
        total = 0.0
        for i in range(k, n):
            total += mags[i] * math.comb(i, k) * ac ** (i - k)
        bounds[k] = total
    return bounds


def _multiple_root_consistent(coeffs: np.ndarray, c: complex, m: int) -> bool:
    """Backward-error test: is c consistent with an exact m-fold root?

    Accepts when every Taylor coefficient below order m at c is explained by
    working-precision coefficient noise plus the slack from moving the centre
    within the radius an m-fold root is determined to.
    """
    taylor = Poly(coeffs).shifted(c)
    if taylor.size <= m:
        return False
    bounds = _coefficient_bounds(coeffs, c)
    tm = max(abs(taylor[m]), 1e-300)
    r_expect = (1e3 * _EPS * max(bounds[0], 1.0) / tm) ** (1.0 / m)
    for k in range(m):
        allowance = 1e3 * (_EPS * max(bounds[k], 1.0) + tm * math.comb(m, k) * r_expect ** (m - k))
        if abs(taylor[k]) > allowance:
            return False
    return True


def poly_roots(p: Poly, cluster_tol: float = 1e-7) -> RootSet:
    """All roots of p, clustered into (root, multiplicity) entries.

    Companion-matrix eigenvalues are clustered at cluster_tol (relative to
    the root magnitude); wider groups collapse into one multiple root only
    when the shifted Taylor coefficients pass a backward-error consistency
    test, since an exact m-fold root scatters its eigenvalues like
    eps**(1/m), far beyond any reasonable user tolerance.  Simple roots are
    Newton-polished; multiple roots keep the cluster mean, which inherits
    trace accuracy from the companion matrix.  Conjugate symmetry is
    enforced exactly for real-coefficient input.
    """
    if cluster_tol <= 0:
        raise PolyalgError("cluster_tol must be positive")
    if p.degree < 1:
        raise PolyalgError("root finding needs degree >= 1")
    coeffs = p.coeffs / p.lead
    raw = list(np.polynomial.polynomial.polyroots(coeffs))
    raw.sort(key=lambda z: (round(z.real, 12), round(z.imag, 12)))

    clusters: list[list[complex]] = []
    for r in raw:
        for cl in clusters:
            ctr = sum(cl) / len(cl)
            if abs(r - ctr) <= cluster_tol * max(1.0, abs(ctr)):
                cl.append(r)
                break
        else:
            clusters.append([r])

    merged = True
    while merged and len(clusters) > 1:
        merged = False
        clusters.sort(key=lambda cl: ((sum(cl) / len(cl)).real, (sum(cl) / len(cl)).imag))
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                ca = sum(clusters[a]) / len(clusters[a])
                cb = sum(clusters[b]) / len(clusters[b])
                m = len(clusters[a]) + len(clusters[b])
                radius = (1e4 * _EPS) ** (1.0 / (m + 1)) * max(1.0, abs(ca))
                if abs(ca - cb) > radius:
                    continue
                cand = (ca * len(clusters[a]) + cb * len(clusters[b])) / m
                if _multiple_root_consistent(coeffs, cand, m):
                    clusters[a].extend(clusters[b])
                    del clusters[b]
                    merged = True
                    break
            if merged:
                break

    roots = []
    mults = []
    for cl in clusters:
        m = len(cl)
        ctr = sum(cl) / m
        roots.append(_newton_polish(coeffs, ctr) if m == 1 else ctr)
        mults.append(m)

    is_real = bool(np.all(np.abs(p.coeffs.imag) <= 1e-14 * np.max(np.abs(p.coeffs))))
    if is_real:
        roots = _pair_conjugates(roots, mults, cluster_tol)

    order = np.lexsort((np.imag(roots), np.real(roots)))
    roots = [roots[i] for i in order]
    mults = [mults[i] for i in order]
    rs = RootSet(tuple(roots), tuple(mults))
    if rs.total != p.degree:
        raise PolyalgError("multiplicities do not sum to the degree")
    return rs


def _pair_conjugates(roots, mults, tol):
    """Force exact conjugate pairing (and exact realness) for real input."""
    out = list(roots)
    used = [False] * len(out)
    for i, r in enumerate(out):
        if used[i]:
            continue
        scale = max(1.0, abs(r))
        if abs(r.imag) <= tol * scale:
            out[i] = complex(r.real, 0.0)
            used[i] = True
            continue
        best, bestd = -1, np.inf
        for j in range(len(out)):
            if j == i or used[j] or mults[j] != mults[i]:
                continue
            d = abs(out[j] - r.conjugate())
            if d < bestd:
                best, bestd = j, d
        if best >= 0 and bestd <= 1e4 * tol * scale:
            avg = (r + out[best].conjugate()) / 2
            out[i] = avg
            out[best] = avg.conjugate()
            used[i] = used[best] = True
        else:
            used[i] = True
    return out


def partial_fractions(f: RationalFn, den_roots: RootSet) -> dict:
    """Decompose f into c0 + sum of c[(root, power)] / (s - root)**power.

    den_roots must describe the roots of f.den (with multiplicities).  The
    constant c0 is nonzero only when numerator and denominator degrees are
    equal; for repeated poles the coefficients realise the derivative-matching
    conditions through a local series expansion.  Returned map uses the key
    None for c0.
    """
    num, den = f.num, f.den
    if num.degree > den.degree:
        raise PolyalgError("improper rational function (deg num > deg den)")
    if den_roots.total != den.degree:
        raise PolyalgError("root set does not match the denominator degree")

    out: dict = {}
    c0 = 0j
    if num.degree == den.degree and not num.is_zero:
        c0 = num.lead / den.lead
        num = num - den.scale(c0)
    out[None] = c0

    lead = den.lead
    for idx, (rho, m) in enumerate(den_roots):
        # local expansion: f(rho+h) = T(h) / (lead * h**m * prod (d_k + h)**m_k)
        # with d_k = rho - r_k; the co-factor series comes straight from the
        # root distances, never from expanded coefficients.
        t = Poly(num.coeffs).shifted(rho)[: m] if not num.is_zero else np.zeros(m, dtype=complex)
        if t.size < m:
            t = np.pad(t, (0, m - t.size))
        inv = np.zeros(m, dtype=complex)
        inv[0] = 1.0
        for jdx, (r2, m2) in enumerate(den_roots):
            if jdx == idx:
                continue
            d = rho - r2
            if d == 0:
                raise PolyalgError("inconsistent root set (repeated root split across entries)")
            # series of (d + h)**(-m2) up to m terms
            fac = np.array(
                [(-1) ** i * math.comb(m2 - 1 + i, i) / d ** (m2 + i) for i in range(m)],
                dtype=complex,
            )
            inv = np.convolve(inv, fac)[:m]
        for k in range(m):
            acc = 0j
            for j in range(k + 1):
                acc += t[j] * inv[k - j]
            # f ~ sum_k series[k] h^(k-m): coefficient of 1/(s-rho)^(m-k)
            out[(rho, m - k)] = acc / lead
    return out


def linsolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b by Gaussian elimination with partial pivoting.

    Raises SingularMatrixError when the best available pivot falls below
    1e-13 of its row scale, which signals a degenerate model upstream.
    """
    a = np.array(a, dtype=complex)
    b = np.array(b, dtype=complex)
    n = a.shape[0]
    if a.shape != (n, n) or b.shape != (n,):
        raise PolyalgError("dimension mismatch in linear solve")
    scale = np.max(np.abs(a), axis=1)
    scale[scale == 0] = 1.0
    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col]) / scale[col:]))
        if abs(a[piv, col]) <= 1e-13 * scale[piv]:
            raise SingularMatrixError(f"pivot {abs(a[piv, col]):.3e} below threshold in column {col}")
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            b[[col, piv]] = b[[piv, col]]
            scale[[col, piv]] = scale[[piv, col]]
        inv = 1.0 / a[col, col]
        for row in range(col + 1, n):
            factor = a[row, col] * inv
            if factor != 0:
                a[row, col:] -= factor * a[col, col:]
                b[row] -= factor * b[col]
    x = np.zeros(n, dtype=complex)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1:] @ x[row + 1:]) / a[row, row]
    return x
