"""Correlation-based recovery of the strength ``h`` from far-field ensembles.

For ``V = 0`` the zeroth-order identity reads

    E[u(x, k+tau) conj u(x, k)] ~ |C_d|^2 h^(tau x) / (4 k^a (k+tau)^a s^m),

with ``a = (7-d)/2`` and ``s`` the symbol evaluation point: ``s = k`` in the
leading-order statement, ``s = k + tau/2`` (default for reconstruction) which
removes the first-order bias when ``tau`` is a sizeable fraction of ``k``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import (BandViolation, DimensionError, EmptyEnsemble, EmptyGrid, GridMismatch,
                         HermitianViolation, SeedMismatch)
from .forward import farfield_constant
from .gmig import mean_and_stderr
from .grid import Field, GridSpec, _check_same_grid, read_field, write_field

ETA_GRID = tuple(round(0.1 * i, 10) for i in range(1, 10))
SYMBOL_POINTS = ("lower", "midpoint")


def _a(d: int) -> float:
    return (7 - d) / 2.0


def _symbol_arg(k, tau, symbol_point: str):
    if symbol_point == "lower":
        return np.asarray(k, dtype=float)
    if symbol_point == "midpoint":
        return np.asarray(k, dtype=float) + 0.5 * np.asarray(tau, dtype=float)
    raise ValueError(f"symbol_point must be one of {SYMBOL_POINTS}")


# ---------------------------------------------------------------------------
# Correlations


@dataclass
class CorrelationDataset:
    """Flat table of correlation estimates.

    ``mode='point'``: ``estimate`` is E[u(k+tau) conj u(k)].
    ``mode='band_averaged'``: ``estimate`` is the band statistic (real).
    """

    k: np.ndarray
    tau: np.ndarray
    direction_index: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    directions: np.ndarray
    N: int
    mode: str = "point"

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=float).reshape(-1)
        self.tau = np.asarray(self.tau, dtype=float).reshape(-1)
        self.direction_index = np.asarray(self.direction_index, dtype=np.int64).reshape(-1)
        self.estimate = np.asarray(self.estimate, dtype=np.complex128).reshape(-1)
        self.stderr = np.asarray(self.stderr, dtype=float).reshape(-1)
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=float))
        n = self.k.size
        if not all(a.size == n for a in (self.tau, self.direction_index, self.estimate,
                                         self.stderr)):
            raise ValueError("correlation table columns must have equal length")
        if np.any(self.tau <= 0):
            raise ValueError("tau must be positive")
        if np.any(self.stderr < 0):
            raise ValueError("standard errors must be nonnegative")
        if self.mode not in ("point", "band_averaged"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def __len__(self):
        return self.k.size

    @property
    def eta(self) -> np.ndarray:
        return self.tau / self.k

    def to_csv(self, path):
        rows = np.column_stack([self.k, self.eta, self.direction_index, self.estimate.real,
                                self.estimate.imag, self.stderr])
        np.savetxt(path, rows, delimiter=",", header="k,eta,direction_index,re,im,stderr",
                   comments="", fmt=["%.17g", "%.17g", "%d", "%.17g", "%.17g", "%.17g"])
        return Path(path)

    def save(self, path) -> list:
        path = Path(path)
        meta = {"N": self.N, "mode": self.mode, "directions": self.directions.tolist(),
                "rows": len(self), "columns": ["k", "tau", "direction_index", "re", "im",
                                               "stderr"]}
        arr = np.column_stack([self.k, self.tau, self.direction_index, self.estimate.real,
                               self.estimate.imag, self.stderr]).astype("<f8")
        js, bn = path.with_suffix(".json"), path.with_suffix(".bin")
        js.write_text(json.dumps(meta, indent=1))
        arr.tofile(bn)
        return [js, bn]

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        arr = np.fromfile(path.with_suffix(".bin"), dtype="<f8").reshape(meta["rows"], 6)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2].astype(np.int64), arr[:, 3] + 1j * arr[:, 4],
                   arr[:, 5], np.asarray(meta["directions"]), meta["N"], meta["mode"])


def correlation_estimate(ff_k, ff_k_tau, directions=None, *, seeds_k=None, seeds_k_tau=None):
    """Mean and standard error of ``u(x, k+tau) conj u(x, k)`` over realizations.

    Both inputs are ``(N, P)`` far fields of the same realizations.
    """
    a = np.asarray(ff_k, dtype=np.complex128)
    b = np.asarray(ff_k_tau, dtype=np.complex128)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if seeds_k is not None or seeds_k_tau is not None:
        if seeds_k is None or seeds_k_tau is None or list(seeds_k) != list(seeds_k_tau):
            raise SeedMismatch("far fields at the two frequencies come from different sources")
    if a.shape != b.shape:
        raise SeedMismatch(f"realization counts differ: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        raise EmptyEnsemble("no realizations")
    if directions is not None and np.atleast_2d(directions).shape[0] != a.shape[1]:
        raise ValueError("one column per direction expected")
    mean, se = mean_and_stderr(b * np.conj(a))
    return mean, se


def zeroth_order_prefactor(k, tau, m: float, d: int, symbol_point: str = "lower"):
    """``4 k^a (k+tau)^a s^m / |C_d|^2``."""
    k = np.asarray(k, dtype=float)
    tau = np.asarray(tau, dtype=float)
    s = _symbol_arg(k, tau, symbol_point)
    return 4.0 * k ** _a(d) * (k + tau) ** _a(d) * s ** m / abs(farfield_constant(d)) ** 2


def recover_h_hat(corr, k, tau, m: float, d: int, *, K0: Optional[float] = None,
                  symbol_point: str = "lower"):
    """h^(tau x) from one correlation value via the zeroth-order identity."""
    if np.any(np.asarray(tau) <= 0):
        raise BandViolation("tau must be positive")
    if K0 is not None and np.any(np.asarray(k) < K0):
        raise BandViolation(f"k below the band start K0={K0}")
    out = zeroth_order_prefactor(k, tau, m, d, symbol_point) * np.asarray(corr)
    return complex(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Band-averaged statistic


def _check_band_dim(d: int, disjoint_supports: bool):
    if d != 3 and not (d == 2 and disjoint_supports):
        raise DimensionError("band-averaged statistic needs d=3 (or d=2 with disjoint "
                             "source/potential supports)")


def band_averaged_statistic(corr_t, t_grid, k: float, m: float, d: int = 3, *,
                            disjoint_supports: bool = False) -> float:
    """``(1/k) int_k^{2k} |t^{m+4} c(t)|^2 dt`` by the trapezoid rule on ``t_grid``.

    ``corr_t`` has ``t`` along its first axis; trailing axes (directions) are kept.
    """
    _check_band_dim(d, disjoint_supports)
    t = np.asarray(t_grid, dtype=float)
    if t.size < 8:
        raise ValueError("t-grid needs at least 8 nodes")
    if not 2 < m < 9:
        raise ValueError("band-averaged statistic needs 2 < m < 9")
    c = np.asarray(corr_t)
    tt = t.reshape((-1,) + (1,) * (c.ndim - 1))
    out = trapezoid(np.abs(tt ** (m + 4) * c) ** 2, t, axis=0) / k
    return float(out) if np.ndim(out) == 0 else out


def band_t_grid(k: float, nodes: int = 16) -> np.ndarray:
    return np.linspace(k, 2 * k, nodes)


def band_calibration_weight(t_grid, k: float, eta: float, m: float, d: int,
                            symbol_point: str = "midpoint") -> float:
    """Band statistic of the zeroth-order model with ``|h^| = 1``."""
    t = np.asarray(t_grid, dtype=float)
    tau = eta * k
    model = 1.0 / zeroth_order_prefactor(t, tau, m, d, symbol_point)
    return float(trapezoid(np.abs(t ** (m + 4) * model) ** 2, t) / k)


def band_statistic_from_farfields(ff_t, ff_t_shift, t_grid, k: float, m: float, d: int = 3,
                                  *, disjoint_supports: bool = False):
    """Band statistic per direction with a jackknife standard error.

    ``ff_t`` and ``ff_t_shift`` are ``(N, T, P)`` far fields at ``t`` and
    ``t + k eta``.
    """
    _check_band_dim(d, disjoint_supports)
    prod = np.asarray(ff_t_shift) * np.conj(np.asarray(ff_t))
    N = prod.shape[0]
    if N == 0:
        raise EmptyEnsemble("no realizations")
    total = prod.sum(axis=0)
    stat = band_averaged_statistic(total / N, t_grid, k, m, d,
                                   disjoint_supports=disjoint_supports)
    if N == 1:
        return np.atleast_1d(stat), np.zeros(np.atleast_1d(stat).shape)
    loo = np.stack([band_averaged_statistic((total - prod[i]) / (N - 1), t_grid, k, m, d,
                                            disjoint_supports=disjoint_supports)
                    for i in range(N)])
    se = np.sqrt((N - 1) / N * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))
    return np.atleast_1d(stat), np.atleast_1d(se)


# ---------------------------------------------------------------------------
# Polar samples and inversion


def antipodal_index(directions, tol: float = 1e-10) -> np.ndarray:
    """Index of ``-x`` for every direction ``x``; HermitianViolation if absent."""
    dirs = np.atleast_2d(np.asarray(directions, dtype=float))
    dist = np.linalg.norm(dirs[:, None, :] + dirs[None, :, :], axis=-1)
    idx = np.argmin(dist, axis=1)
    if np.any(dist[np.arange(len(dirs)), idx] > tol):
        raise HermitianViolation("direction set is not closed under x -> -x")
    return idx


@dataclass
class PolarSamples:
    radii: np.ndarray
    directions: np.ndarray
    values: np.ndarray
    direction_weights: Optional[np.ndarray] = None
    hermitian_completed: bool = False
    stderr: Optional[np.ndarray] = None

    def __post_init__(self):
        self.radii = np.asarray(self.radii, dtype=float).reshape(-1)
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=float))
        self.values = np.asarray(self.values, dtype=np.complex128).reshape(
            self.radii.size, self.directions.shape[0])
        if not np.all(np.isfinite(self.values)):
            raise ValueError("polar samples must be finite")
        if np.any(self.radii <= 0) or np.any(np.diff(self.radii) <= 0):
            raise ValueError("radii must be positive and increasing")
        if self.direction_weights is None:
            if self.directions.shape[1] != 2:
                raise ValueError("direction weights are required in 3D")
            ang = np.arctan2(self.directions[:, 1], self.directions[:, 0])
            gaps = np.diff(np.sort(ang))
            if not np.allclose(gaps, 2 * np.pi / len(ang), rtol=0, atol=1e-9):
                raise ValueError("2D directions must be equispaced when weights are omitted")
            self.direction_weights = np.full(len(ang), 2 * np.pi / len(ang))
        self.direction_weights = np.asarray(self.direction_weights, dtype=float)

    @property
    def d(self) -> int:
        return self.directions.shape[1]


def hermitian_complete(samples: PolarSamples) -> PolarSamples:
    """Average ``h^(xi)`` with ``conj h^(-xi)``; exact symmetry afterwards."""
    idx = antipodal_index(samples.directions)
    vals = 0.5 * (samples.values + np.conj(samples.values[:, idx]))
    se = None if samples.stderr is None else \
        0.5 * np.sqrt(samples.stderr ** 2 + samples.stderr[:, idx] ** 2)
    return PolarSamples(samples.radii, samples.directions, vals, samples.direction_weights,
                        True, se)


def radial_weights(radii: np.ndarray) -> np.ndarray:
    """Trapezoid weights on ``[0, r_max]`` with an implicit node at 0.

    The integrand carries the Jacobian ``r^{d-1}``, which vanishes at 0, so the
    origin needs no sample.
    """
    r = np.concatenate([[0.0], radii])
    w = np.zeros(r.size)
    w[:-1] += 0.5 * np.diff(r)
    w[1:] += 0.5 * np.diff(r)
    return w[1:]


def invert_polar_fourier(samples: PolarSamples, cutoff_radius: float, target_grid: GridSpec,
                         *, chunk: int = 64) -> Field:
    """``h(x) = (2 pi)^{-d} int_{|xi| <= cutoff} h^(xi) exp(i x.xi) dxi`` (polar trapezoid)."""
    if not samples.hermitian_completed:
        raise HermitianViolation("samples must be Hermitian-completed before inversion")
    d = target_grid.dim
    if samples.d != d:
        raise GridMismatch("sample dimension does not match the target grid")
    if cutoff_radius > samples.radii[-1] * (1 + 1e-12):
        raise ValueError("cutoff exceeds the largest sampled radius")
    keep = samples.radii <= cutoff_radius * (1 + 1e-12)
    out = np.zeros(target_grid.shape, dtype=np.complex128)
    if not np.any(keep) or cutoff_radius <= 0:
        return Field(target_grid, out.real)
    r = samples.radii[keep]
    w = radial_weights(r) * r ** (d - 1)
    coef = (w[:, None] * samples.direction_weights[None, :] * samples.values[keep]).reshape(-1)
    xis = (r[:, None, None] * samples.directions[None]).reshape(-1, d)
    nz = coef != 0
    coef, xis = coef[nz], xis[nz]
    coords = target_grid.coords()
    for p0 in range(0, coef.size, chunk):
        for c, xi in zip(coef[p0:p0 + chunk], xis[p0:p0 + chunk]):
            e = 1.0
            for a in range(d):
                e = e * np.exp(1j * xi[a] * coords[a])
            out += c * e
    out /= (2 * np.pi) ** d
    norm = np.linalg.norm(out)
    if norm > 0 and np.linalg.norm(out.imag) > 1e-10 * norm:
        raise HermitianViolation("inverse transform is not real; samples not symmetric")
    return Field(target_grid, out.real.copy())


def reconstruction_error(h_rec: Field, h_true: Field) -> float:
    _check_same_grid(h_rec.grid, h_true.grid)
    den = np.linalg.norm(h_true.values)
    if den == 0:
        raise ValueError("true strength is identically zero")
    return float(np.linalg.norm(h_rec.values - h_true.values) / den)


# ---------------------------------------------------------------------------
# Data discrepancy


def _nearest_eta(eta: np.ndarray, eta_grid, tol: float):
    grid = np.asarray(eta_grid, dtype=float)
    j = np.argmin(np.abs(eta[:, None] - grid[None, :]), axis=1)
    return np.abs(eta - grid[j]) <= tol


def data_discrepancy(correlations: CorrelationDataset, band, mode: str = "eps1", m: float = 3,
                     d: int = 2, *, eta_grid=ETA_GRID, eta_tol: float = 1e-9,
                     scaled: bool = False) -> float:
    """epsilon_1 or epsilon_2 (not squared) over the declared finite grid.

    ``eps1``: sup |k^{m+7-d} E[u((1+eta)k) conj u(k)]|; ``eps2``: sup of the
    square root of the band statistic. With ``scaled`` each point entry is
    first mapped through the zeroth-order prefactor, giving sup |h^|.
    """
    K0, K = band
    sel = (correlations.k > K0) & (correlations.k <= K)
    sel &= _nearest_eta(correlations.eta, eta_grid, eta_tol)
    if not np.any(sel):
        raise EmptyGrid("no correlation entries on the declared (k, eta) grid")
    k = correlations.k[sel]
    est = correlations.estimate[sel]
    if mode == "eps1":
        if correlations.mode != "point":
            raise ValueError("eps1 needs point-frequency correlations")
        if scaled:
            vals = np.abs(zeroth_order_prefactor(k, correlations.tau[sel], m, d) * est)
        else:
            vals = np.abs(k ** (m + 7 - d) * est)
    elif mode == "eps2":
        if correlations.mode != "band_averaged":
            raise ValueError("eps2 needs band-averaged statistics")
        vals = np.sqrt(np.abs(est.real))
    else:
        raise ValueError("mode must be 'eps1' or 'eps2'")
    return float(vals.max())


# ---------------------------------------------------------------------------
# Results


@dataclass
class ReconstructionResult:
    h_rec: Field
    cutoff_radius: float
    rel_L2_error: Optional[float] = None
    params: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if not self.h_rec.is_real:
            raise ValueError("reconstruction must be real")

    def save(self, path) -> list:
        path = Path(path)
        files = list(write_field(path.with_name(path.name + "_field"), self.h_rec))
        meta = {"cutoff_radius": self.cutoff_radius, "rel_L2_error": self.rel_L2_error,
                "params": self.params, "field": path.name + "_field"}
        js = path.with_suffix(".json")
        js.write_text(json.dumps(meta, indent=1, default=float))
        return [js] + files

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        h = read_field(path.with_name(meta["field"]))
        return cls(h, meta["cutoff_radius"], meta["rel_L2_error"], meta["params"])


@dataclass
class StabilityReport:
    eps: float
    K_values: list
    errors: list
    bound_rhs: list

    def __post_init__(self):
        if not len(self.K_values) == len(self.errors) == len(self.bound_rhs):
            raise ValueError("stability report columns must be aligned")


# ---------------------------------------------------------------------------
# Estimator


def uniform_step(ks) -> float:
    ks = np.asarray(ks, dtype=float)
    if ks.size < 2:
        raise ValueError("need at least two frequencies")
    steps = np.diff(ks)
    if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * ks.max():
        raise ValueError("frequencies must be increasing and uniformly spaced")
    return float(steps.mean())


class StrengthReconstructor(BaseEstimator):
    """Recover ``h`` from far fields on a uniform frequency grid.

    For each lag ``tau_j = j * dk`` the zeroth-order estimates from all pairs
    ``(k, k + tau_j)`` inside the band ``(K0, K]`` are averaged; the polar
    samples are Hermitian-completed and inverted up to ``cutoff_radius``
    (default: the largest available lag).

    Parameters
    ----------
    m, d : order and dimension.
    K0, K : band ``(K0, K]``; every frequency used lies in it.
    cutoff_radius : optional low-pass radius.
    symbol_point : ``"midpoint"`` or ``"lower"``.
    """

    def __init__(self, m=3.0, d=2, K0=20.0, K=40.0, cutoff_radius=None,
                 symbol_point="midpoint"):
        self.m = m
        self.d = d
        self.K0 = K0
        self.K = K
        self.cutoff_radius = cutoff_radius
        self.symbol_point = symbol_point

    def _validate(self, X, ks, directions):
        X = np.asarray(X, dtype=np.complex128)
        if X.ndim != 3:
            raise ValueError("X must have shape (N, n_k, n_directions)")
        if X.shape[0] < 2:
            raise EmptyEnsemble("need at least two realizations")
        ks = np.asarray(ks, dtype=float).reshape(-1)
        dirs = np.atleast_2d(np.asarray(directions, dtype=float))
        if X.shape[1:] != (ks.size, dirs.shape[0]):
            raise ValueError("X does not match the frequency and direction grids")
        if dirs.shape[1] != self.d:
            raise DimensionError("directions do not match d")
        if not np.all(np.isfinite(X)):
            raise ValueError("far fields must be finite")
        if self.symbol_point not in SYMBOL_POINTS:
            raise ValueError(f"symbol_point must be one of {SYMBOL_POINTS}")
        if not 0 < self.K0 < self.K:
            raise BandViolation("need 0 < K0 < K")
        return X, ks, dirs

    def fit(self, X, ks, directions, direction_weights=None):
        X, ks, dirs = self._validate(X, ks, directions)
        inband = (ks > self.K0) & (ks <= self.K * (1 + 1e-12))
        X, ks = X[:, inband], ks[inband]
        dk = uniform_step(ks)
        lags = np.arange(1, ks.size)
        if self.cutoff_radius is not None:
            lags = lags[lags * dk <= self.cutoff_radius * (1 + 1e-12)]
        if lags.size == 0:
            raise BandViolation("band too narrow for any frequency lag")
        q = np.empty((X.shape[0], lags.size, dirs.shape[0]), dtype=np.complex128)
        for j, lag in enumerate(lags):
            k = ks[:-lag]
            tau = lag * dk
            pref = zeroth_order_prefactor(k, tau, self.m, self.d, self.symbol_point)
            q[:, j] = np.mean(pref[None, :, None] * X[:, lag:] * np.conj(X[:, :-lag]), axis=1)
        mean, se = mean_and_stderr(q)
        samples = PolarSamples(lags * dk, dirs, mean, direction_weights, stderr=se)
        self.polar_samples_ = hermitian_complete(samples)
        self.cutoff_radius_ = float(samples.radii[-1])
        self.n_samples_ = X.shape[0]
        self.frequencies_ = ks
        return self

    def predict(self, grid: GridSpec) -> Field:
        check_is_fitted(self, "polar_samples_")
        return invert_polar_fourier(self.polar_samples_, self.cutoff_radius_, grid)

    def reconstruct(self, grid: GridSpec, h_true: Optional[Field] = None) -> ReconstructionResult:
        h = self.predict(grid)
        err = None if h_true is None else reconstruction_error(h, h_true)
        params = {"m": self.m, "d": self.d, "K0": self.K0, "K": self.K, "N": self.n_samples_,
                  "symbol_point": self.symbol_point}
        return ReconstructionResult(h, self.cutoff_radius_, err, params)

    def score(self, grid: GridSpec, h_true: Field) -> float:
        """Negative relative L2 error (larger is better)."""
        return -reconstruction_error(self.predict(grid), h_true)
