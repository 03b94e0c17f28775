"""Closed-form fields of an infinitely long round conductor carrying a given current.

The eddy-current solution is the classical skin-effect profile built on
complex Bessel functions of the first kind; the static one is uniform current
with the linear/hyperbolic field of Ampere's law.  Phasors follow the
convention ``x(t) = Re(X exp(i w t))``.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .mesh import MU0

BESSEL_MAX_ARG = 30.0
BESSEL_MAX_TERMS = 120


class DomainError(ValueError):
    pass


def _bessel_series(z, order: int):
    z = np.asarray(z, dtype=complex)
    if np.any(np.abs(z) > BESSEL_MAX_ARG):
        raise DomainError(f"|z| > {BESSEL_MAX_ARG}: series accuracy is not guaranteed")
    # terms grow to ~1e5 for |z| = 15 while the sum can be O(1e-2); the
    # extended-precision carrier keeps the cancellation below 1e-12
    half = z.astype(np.clongdouble) / 2
    term = half**order / factorial(order)
    total = term.copy()
    q = -(half * half)
    # stop once every entry's next term is negligible next to its running sum
    for m in range(1, BESSEL_MAX_TERMS):
        term = term * q / (m * (m + order))
        total = total + term
        if np.all(np.abs(term) <= 1e-16 * np.abs(total)):
            break
    total = total.astype(complex)
    return total if total.ndim else complex(total)


def bessel_j0(z):
    """J0 of a complex argument by its power series, |z| <= 30."""
    return _bessel_series(z, 0)


def bessel_j1(z):
    """J1 of a complex argument by its power series, |z| <= 30."""
    return _bessel_series(z, 1)


def skin_depth(mu: float, sigma: float, omega: float) -> float:
    if mu <= 0 or sigma <= 0 or omega <= 0:
        raise ValueError("skin depth needs positive mu, sigma and omega")
    return float(np.sqrt(2.0 / (mu * sigma * omega)))


def time_sample(phasor, omega: float, t):
    return np.real(np.asarray(phasor) * np.exp(1j * omega * np.asarray(t)))


@dataclass(frozen=True)
class EddyCylinderSolution:
    radius: float
    mu: float
    sigma: float
    omega: float
    current: complex
    mu_out: float = MU0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        j1 = bessel_j1(self.k * self.radius)
        if abs(j1) < 1e-300:
            raise DomainError("J1(kR) vanishes; the profile is undefined")

    @property
    def delta(self) -> float:
        return skin_depth(self.mu, self.sigma, self.omega)

    @property
    def k(self) -> complex:
        return (1 - 1j) / self.delta

    def fields(self, r):
        """Axial current density and azimuthal flux density phasors at radius r."""
        r = np.asarray(r, dtype=float)
        if np.any(r < 0):
            raise ValueError("radius must be non-negative")
        R, k, I = self.radius, self.k, self.current
        inside = r <= R
        ri = np.where(inside, r, 0.0)
        ro = np.where(inside, R, r)
        j1R = bessel_j1(k * R)
        j = np.where(inside, k * I / (2 * np.pi * R) * bessel_j0(k * ri) / j1R, 0.0)
        b_in = I * self.mu / (2 * np.pi * R) * bessel_j1(k * ri) / j1R
        b_out = I * self.mu_out / (2 * np.pi * ro)
        b = np.where(inside, b_in, b_out)
        if r.ndim == 0:
            return complex(j), complex(b)
        return j, b


@dataclass(frozen=True)
class StaticCylinderSolution:
    radius: float
    mu_in: float
    current: float
    mu_out: float = MU0

    def fields(self, r):
        r = np.asarray(r, dtype=float)
        R, I = self.radius, self.current
        inside = r <= R
        j = np.where(inside, I / (np.pi * R**2), 0.0)
        ro = np.where(inside, R, r)
        b = np.where(inside, self.mu_in * I * r / (2 * np.pi * R**2), self.mu_out * I / (2 * np.pi * ro))
        if r.ndim == 0:
            return float(j), float(b)
        return j, b


def eddy_fields(sol: EddyCylinderSolution, r):
    return sol.fields(r)


def static_fields(sol: StaticCylinderSolution, r):
    return sol.fields(r)


def radial_profile(sol: EddyCylinderSolution, r_max: float, n: int = 201) -> np.ndarray:
    """Columns r, Re j, Im j, |j|, Re B, Im B, |B| on a uniform radial grid."""
    r = np.linspace(0.0, r_max, n)
    j, b = sol.fields(r)
    return np.column_stack([r, j.real, j.imag, np.abs(j), b.real, b.imag, np.abs(b)])
