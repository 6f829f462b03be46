"""Helmholtz and biharmonic free-space kernels with complex wavenumbers.

The zeroth-order Hankel function is continued analytically to
``S = C \\ (-inf, 0]*i``: the logarithm and square root inside it carry
arguments in ``(-pi/2, 3pi/2)``. This is the continuation along which the
imaginary-axis evaluations ``lambda = i k`` used by the conjugate far field
are well defined (``H0(-x) = -conj(H0(x))`` for ``x > 0``).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

from .exceptions import BranchViolation, DomainError, QuadratureFailure

SERIES_RADIUS = 12.0
_EULER_GAMMA = 0.57721566490153286061
_N_SERIES = 64
_N_ASYMP = 48


@dataclass(frozen=True)
class WavenumberPoint:
    """Complex wavenumber with its position relative to the cut."""

    lam: complex

    def __post_init__(self):
        object.__setattr__(self, "lam", complex(self.lam))
        if self.lam == 0:
            raise DomainError("wavenumber must be nonzero")

    @property
    def in_S(self) -> bool:
        return not (self.lam.real == 0 and self.lam.imag < 0)

    @property
    def in_upper(self) -> bool:
        return self.lam.imag > 0


def _as_lambda(lam) -> complex:
    return lam.lam if isinstance(lam, WavenumberPoint) else complex(lam)


def branch_arg(z):
    """Argument of ``z`` in ``(-pi/2, 3pi/2]``."""
    a = np.angle(z)
    return np.where(a <= -np.pi / 2, a + 2 * np.pi, a)


def branch_log(z):
    z = np.asarray(z, dtype=np.complex128)
    return np.log(np.abs(z)) + 1j * branch_arg(z)


def _check_S(z: np.ndarray):
    if np.any(z == 0):
        raise DomainError("H0 is singular at z = 0")
    on_cut = (z.real == 0) & (z.imag < 0)
    if np.any(on_cut):
        raise BranchViolation("argument on the cut (-inf, 0]*i")


def _h0_series(z: np.ndarray) -> np.ndarray:
    q = -0.25 * z * z
    term = np.ones_like(z)
    j0 = np.ones_like(z)
    tail = np.zeros_like(z)
    harmonic = 0.0
    for k in range(1, _N_SERIES):
        term = term * q / (k * k)
        harmonic += 1.0 / k
        j0 = j0 + term
        tail = tail - harmonic * term
    # tail = sum_{k>=1} (-1)^{k+1} H_k (z^2/4)^k / (k!)^2
    y0 = (2.0 / np.pi) * ((branch_log(z) - np.log(2.0) + _EULER_GAMMA) * j0 + tail)
    return j0 + 1j * y0


def _h0_asymptotic(z: np.ndarray) -> np.ndarray:
    inv = 1.0 / z
    total = np.ones_like(z)
    term = np.ones_like(z)
    prev = np.full(z.shape, np.inf)
    active = np.ones(z.shape, dtype=bool)
    for k in range(1, _N_ASYMP):
        term = term * (1j * inv) * (-(2 * k - 1) ** 2 / (8.0 * k))
        mag = np.abs(term)
        # optimal truncation: stop once terms start to grow
        active &= mag < prev
        total = total + np.where(active, term, 0.0)
        prev = np.where(active, mag, prev)
    half_log = 0.5 * branch_log(z)
    pref = np.sqrt(2.0 / np.pi) * np.exp(-half_log + 1j * (z - np.pi / 4))
    return pref * total


def hankel_h0(z):
    """H0^(1)(z) for ``z`` in ``S``; ascending series for ``|z| <= 12``,
    Hankel asymptotic expansion beyond."""
    scalar = np.ndim(z) == 0
    z = np.atleast_1d(np.asarray(z, dtype=np.complex128))
    _check_S(z)
    out = np.empty_like(z)
    small = np.abs(z) <= SERIES_RADIUS
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        if small.any():
            out[small] = _h0_series(z[small])
        if (~small).any():
            out[~small] = _h0_asymptotic(z[~small])
    return complex(out[0]) if scalar else out


def _integral_unscaled(z: complex, tol: float) -> complex:
    # s = u^2 removes the s^(-1/2) endpoint singularity
    def f(u):
        return 2.0 * np.exp(-u * u) / np.sqrt(0.5 * u * u - 1j * z)

    knot = min(np.sqrt(2 * abs(z)), 6.0)
    parts = [(0.0, knot), (knot, np.inf)]
    val, err = 0j, 0.0
    for a, b in parts:
        for unit, g in ((1.0, lambda u: f(u).real), (1j, lambda u: f(u).imag)):
            v, e = integrate.quad(g, a, b, epsabs=0, epsrel=tol, limit=400)
            val += unit * v
            err += e
    if err > 100 * tol * abs(val):
        raise QuadratureFailure(f"integral oracle did not converge at z={z}")
    return np.exp(1j * z) * val


@lru_cache(maxsize=1)
def integral_constant() -> complex:
    """The representation's prefactor, calibrated once at ``z = 1``."""
    return hankel_h0(1.0) / _integral_unscaled(1.0, 1e-13)


def hankel_h0_integral_oracle(z, tol: float = 1e-13) -> complex:
    """H0^(1)(z) from ``C e^{iz} int_0^inf e^{-s} s^{-1/2} (s/2 - iz)^{-1/2} ds``.

    Independent of :func:`hankel_h0` except for the single calibration of C.
    """
    z = complex(z)
    _check_S(np.array([z]))
    return integral_constant() * _integral_unscaled(z, tol)


def helmholtz_kernel(lam, r, d: int):
    """Outgoing Helmholtz kernel Phi_lambda at separation ``r > 0``."""
    lam = _as_lambda(lam)
    scalar = np.ndim(r) == 0
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(r <= 0):
        raise DomainError("separation must be positive")
    if d == 2:
        out = 0.25j * hankel_h0(lam * r)
    elif d == 3:
        with np.errstate(over="ignore", under="ignore"):
            out = np.exp(1j * lam * r) / (4 * np.pi * r)
    else:
        raise ValueError("d must be 2 or 3")
    return complex(out[0]) if scalar else out


def biharmonic_limit(lam, d: int) -> complex:
    """G_lambda at ``r = 0``."""
    lam = _as_lambda(lam)
    if d == 3:
        return (1 + 1j) / (8 * np.pi * lam)
    log_gap = complex(branch_log(lam) - branch_log(1j * lam))
    return -log_gap / (4 * np.pi * lam * lam)


def biharmonic_kernel(lam, r, d: int):
    """G_lambda = (Phi_lambda - Phi_{i lambda}) / (2 lambda^2); finite at r = 0."""
    lam = _as_lambda(lam)
    scalar = np.ndim(r) == 0
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(r < 0):
        raise DomainError("separation must be nonnegative")
    out = np.empty(r.shape, dtype=np.complex128)
    pos = r > 0
    rp = r[pos]
    if d == 3:
        with np.errstate(over="ignore", under="ignore"):
            num = np.expm1(1j * lam * rp) - np.expm1(-lam * rp)
        out[pos] = num / (8 * np.pi * lam * lam * rp)
    elif d == 2:
        z1 = lam * rp
        out[pos] = 0.25j * (hankel_h0(z1) - hankel_h0(1j * z1)) / (2 * lam * lam)
    else:
        raise ValueError("d must be 2 or 3")
    out[~pos] = biharmonic_limit(lam, d)
    return complex(out[0]) if scalar else out


def alpha(lam) -> float:
    lam = _as_lambda(lam)
    if lam == 0:
        raise DomainError("alpha is undefined at 0")
    return abs(lam.real) if lam.imag <= 0 else abs(lam)
