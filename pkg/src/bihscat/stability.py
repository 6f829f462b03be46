"""Analytic-continuation lower bound and increasing-stability exponents."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import DomainError, InvalidRange


@dataclass(frozen=True)
class SlabSpec:
    """Slab ``(K0, inf) x (-h0, h0)`` with data known on ``(K0, K]``."""

    K0: float
    K: float
    h0: float

    def __post_init__(self):
        if not 0 < self.K0 < self.K:
            raise InvalidRange("need 0 < K0 < K")
        if not self.h0 > 0:
            raise InvalidRange("slab half-height must be positive")

    @property
    def a(self) -> float:
        return self.K - self.K0


def mu_coefficient(a: float, h0: float) -> float:
    return 64.0 * a * h0 / (3.0 * np.pi ** 2 * (a * a + 4.0 * h0 * h0))


def mu_lower_bound(z, slab: SlabSpec, *, formal: bool = False):
    """``64 a h / (3 pi^2 (a^2 + 4h^2)) exp((pi/2h)(a/2 - z))``.

    Defined for ``z > K``; ``formal=True`` skips the domain check (closed form
    at any real ``z``).
    """
    z_arr = np.asarray(z, dtype=float)
    if not formal and np.any(z_arr <= slab.K):
        raise DomainError(f"continuation bound needs z > K = {slab.K}")
    a, h = slab.a, slab.h0
    out = mu_coefficient(a, h) * np.exp(np.pi / (2 * h) * (a / 2 - z_arr))
    return float(out) if out.ndim == 0 else out


def delta2(m: float) -> float:
    if 7 <= m < 9:
        return 9.0 - m
    if 2 < m < 7:
        return 7.0 - m
    raise InvalidRange("delta_2 is defined for 2 < m < 9")


def default_delta(m: float, d: int, mode: str = "point") -> float:
    """0.9 times the strict upper limit of delta_1 (point) or delta~_2 (band)."""
    if mode == "point":
        return 0.9 * min(1.0, (d + 3 - m) / 2.0)
    if mode == "band_averaged":
        return 0.9 * min(1.0, delta2(m))
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class StabilityParams:
    m: float
    d: int
    s: float
    t: float
    delta: Optional[float] = None
    mode: str = "point"

    def __post_init__(self):
        if self.delta is None:
            object.__setattr__(self, "delta", default_delta(self.m, self.d, self.mode))
        if not self.delta > 0:
            raise InvalidRange("delta must be positive")
        if self.mode == "point" and not self.d - 1 < self.m < self.d + 3:
            raise InvalidRange("point mode needs d-1 < m < d+3")
        if not self.s > 0:
            raise InvalidRange("smoothness s must be positive")
        if not 0 < self.t < self.delta / self.d:
            raise InvalidRange(f"need 0 < t < delta/d = {self.delta / self.d:.4g}")

    @property
    def beta0(self) -> float:
        return self.d * self.t + 2 * self.m

    @property
    def beta(self) -> float:
        return min(self.delta / 2 - self.d * self.t / 2, self.s * self.t)


def stability_exponents(params: StabilityParams):
    """``(beta0, beta) = (d t + 2m, min(delta/2 - d t/2, s t))``."""
    return params.beta0, params.beta


def stability_rhs(K, eps, beta0: float, beta: float):
    """``K^beta0 eps^2 + 1 / (K^beta (ln|ln eps|)^beta)``."""
    K = np.asarray(K, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if np.any(eps <= 0) or np.any(eps >= np.exp(-1.0)):
        raise DomainError("need 0 < eps < 1/e")
    if np.any(K <= 1):
        raise DomainError("need K > 1")
    out = K ** beta0 * eps ** 2 + 1.0 / (K ** beta * np.log(np.abs(np.log(eps))) ** beta)
    return float(out) if out.ndim == 0 else out


@dataclass
class ContinuationReport:
    eps: float
    M: float
    z: np.ndarray
    mu: np.ndarray
    values: np.ndarray
    bounds: np.ndarray
    margins: np.ndarray = dc_field(init=False)
    holds: bool = dc_field(init=False)
    mu_at_most_one: bool = dc_field(init=False)

    def __post_init__(self):
        self.margins = self.bounds - self.values
        self.holds = bool(np.all(self.margins >= 0))
        self.mu_at_most_one = bool(np.all(self.mu <= 1.0))


def continuation_bound_check(p: Callable, M: float, z_query: Sequence[float], slab: SlabSpec,
                             samples: Optional[Sequence[float]] = None,
                             n_samples: int = 64) -> ContinuationReport:
    """Compare ``|p(z)|`` with ``M eps^mu(z)`` where ``eps = max |p|`` on ``(K0, K]``."""
    if samples is None:
        samples = np.linspace(slab.K0, slab.K, n_samples + 1)[1:]
    eps = float(np.max(np.abs([p(x) for x in samples])))
    z = np.asarray(z_query, dtype=float)
    mu = mu_lower_bound(z, slab) * np.ones_like(z)
    vals = np.abs(np.array([p(x) for x in z], dtype=complex))
    with np.errstate(divide="ignore"):
        bounds = M * eps ** mu if eps > 0 else np.zeros_like(z)
    return ContinuationReport(eps, float(M), z, mu, vals, bounds)


def write_stability_csv(path, K, eps, rhs, measured_error) -> Path:
    path = Path(path)
    rows = zip(*(np.broadcast_to(np.asarray(c, dtype=float), np.shape(K))
                 for c in (K, eps, rhs, measured_error)))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["K", "eps", "rhs", "measured_error"])
        for r in rows:
            w.writerow([repr(float(x)) for x in r])
    return path


def fit_bound_constant(errors, rhs) -> float:
    """Smallest ``C`` with ``errors <= C * rhs`` on the supplied points."""
    return float(np.max(np.asarray(errors, dtype=float) / np.asarray(rhs, dtype=float)))
