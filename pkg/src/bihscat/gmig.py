"""Gaussian random sources with isotropic covariance symbol ``h(x)|xi|^{-m}``.

A realization is ``f = sqrt(h) * (-Delta)^{-m/4} W`` with ``W`` discrete white
noise, so the covariance operator ``sqrt(h)(-Delta)^{-m/2}sqrt(h)`` has
principal symbol ``h(x)|xi|^{-m}``.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import DimensionError, EmptyEnsemble, NegativeStrength, SeedMismatch
from .grid import (Field, GridSpec, SpectralMultiplier, _check_nyquist, apply_multiplier, nudft,
                   read_field, write_field)

WORKERS_ENV = "BIHSCAT_WORKERS"


def worker_count(workers: Optional[int] = None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    return max(1, int(workers))


def bump(r: np.ndarray, radius: float) -> np.ndarray:
    """``exp(1 - 1/(1 - (r/radius)^2))`` on ``r < radius``, 0 elsewhere; peak 1."""
    r = np.asarray(r, dtype=float)
    out = np.zeros(r.shape)
    inside = r < radius
    q = (r[inside] / radius) ** 2
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - q))
    return out


def bump_field(grid: GridSpec, radius: float, amplitude: float = 1.0, center=None) -> Field:
    c = np.zeros(grid.dim) if center is None else np.asarray(center, dtype=float)
    r = np.sqrt(sum((x - ci) ** 2 for x, ci in zip(grid.coords(), c)))
    return Field(grid, amplitude * bump(r, radius))


def gaussian_bump_field(grid: GridSpec, sigma: float, radius: float,
                        amplitude: float = 1.0) -> Field:
    """Gaussian ``exp(-|x|^2/(2 sigma^2))`` tapered to compact support by a bump."""
    r = grid.radius()
    return Field(grid, amplitude * np.exp(-0.5 * (r / sigma) ** 2) * bump(r, radius))


@dataclass(frozen=True, eq=False)
class StrengthProfile:
    h: Field
    bound_M: Optional[float] = None

    def __post_init__(self):
        if not self.h.is_real:
            raise ValueError("strength must be real")
        v = self.h.values
        if np.any(v < 0):
            raise NegativeStrength("strength must be nonnegative")
        M = float(v.max()) if self.bound_M is None else float(self.bound_M)
        if v.size and v.max() > M * (1 + 1e-12):
            raise ValueError("strength exceeds its declared bound M")
        object.__setattr__(self, "bound_M", M)
        rim = ~self.h.grid.inner_mask(1.0 - 2.0 * 2 / self.h.grid.n_per_axis)
        if np.any(v[rim] != 0):
            raise ValueError("strength must vanish within 2 cells of the box boundary")

    @property
    def grid(self) -> GridSpec:
        return self.h.grid

    def h_hat(self, xis) -> np.ndarray:
        return nudft(self.h.values, self.grid, np.atleast_2d(xis))


@dataclass(frozen=True, eq=False)
class GmigSpec:
    m: float
    strength: StrengthProfile
    mode: str = "point"

    def __post_init__(self):
        d = self.d
        if self.mode == "point":
            if not (d - 1 < self.m < d + 3) and self.m != 0:
                raise ValueError(f"point-frequency pipeline needs d-1 < m < d+3, got m={self.m}")
        elif self.mode == "band_averaged":
            if d != 3:
                raise DimensionError("band-averaged sources are three-dimensional")
            if not 2 < self.m < 9:
                raise ValueError(f"band-averaged pipeline needs 2 < m < 9, got m={self.m}")
        elif self.mode != "free":
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def grid(self) -> GridSpec:
        return self.strength.grid

    @property
    def d(self) -> int:
        return self.grid.dim

    def multiplier(self) -> SpectralMultiplier:
        return SpectralMultiplier.power(-self.m / 2.0, zero_mode=0.0)

    def to_dict(self) -> dict:
        return {"m": self.m, "mode": self.mode, "bound_M": self.strength.bound_M,
                "grid": self.grid.to_dict()}


def realization_seed(master_seed: int, index: int) -> int:
    """64-bit seed of realization ``index``; depends only on (master, index)."""
    ss = np.random.SeedSequence([int(master_seed), int(index)])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def sample_white_noise(grid: GridSpec, seed: int) -> Field:
    """I.i.d. N(0, 1/cell_volume) per node."""
    rng = np.random.default_rng(int(seed))
    return Field(grid, rng.standard_normal(grid.shape) / np.sqrt(grid.cell_volume))


def _colored_noise(spec: GmigSpec, seed: int) -> np.ndarray:
    W = sample_white_noise(spec.grid, seed)
    if spec.m == 0:
        return W.values
    return apply_multiplier(W, spec.multiplier()).values.real


def sample_gmig(spec: GmigSpec, seed: int) -> Field:
    """One realization ``sqrt(h) (-Delta)^{-m/4} W`` (zero mode removed)."""
    h = spec.strength.h.values
    if np.any(h < 0):
        raise NegativeStrength("strength must be nonnegative")
    root = np.sqrt(h)
    if not np.any(root):
        return Field(spec.grid, np.zeros(spec.grid.shape))
    return Field(spec.grid, root * _colored_noise(spec, seed))


@dataclass(eq=False)
class FieldEnsemble:
    spec: GmigSpec
    values: np.ndarray
    seeds: list
    master_seed: Optional[int] = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape[1:] != self.spec.grid.shape:
            raise ValueError("realization shape does not match the grid")
        if len(self.seeds) != self.values.shape[0]:
            raise ValueError("need exactly one seed per realization")
        if len(set(self.seeds)) != len(self.seeds):
            raise SeedMismatch("seeds must be pairwise distinct")

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def realizations(self) -> list:
        return [Field(self.spec.grid, v) for v in self.values]

    def regenerate(self, i: int) -> Field:
        return sample_gmig(self.spec, self.seeds[i])

    @classmethod
    def from_fields(cls, spec: GmigSpec, fields: Sequence[Field], seeds=None):
        seeds = list(range(len(fields))) if seeds is None else list(seeds)
        vals = np.stack([f.values for f in fields]) if len(fields) else \
            np.zeros((0,) + spec.grid.shape)
        return cls(spec, vals, seeds)


def generate_ensemble(spec: GmigSpec, master_seed: int, N: int,
                      workers: Optional[int] = None) -> FieldEnsemble:
    """``N`` realizations with seeds ``realization_seed(master_seed, i)``."""
    if N < 0:
        raise ValueError("N must be nonnegative")
    seeds = [realization_seed(master_seed, i) for i in range(N)]
    out = np.empty((N,) + spec.grid.shape)

    def fill(i):
        out[i] = sample_gmig(spec, seeds[i]).values

    nw = worker_count(workers)
    if nw == 1:
        for i in range(N):
            fill(i)
    else:
        with ThreadPoolExecutor(nw) as ex:
            list(ex.map(fill, range(N)))
    return FieldEnsemble(spec, out, seeds, int(master_seed))


def mean_and_stderr(samples: np.ndarray, axis: int = 0):
    """Sample mean and its standard error along ``axis`` (complex-aware)."""
    samples = np.asarray(samples)
    n = samples.shape[axis]
    if n == 0:
        raise EmptyEnsemble("no realizations")
    mean = samples.mean(axis=axis)
    if n == 1:
        return mean, np.zeros(mean.shape)
    dev = np.abs(samples - np.expand_dims(mean, axis)) ** 2
    se = np.sqrt(dev.sum(axis=axis) / (n - 1) / n)
    return mean, se


def empirical_fourier_correlation(ensemble: FieldEnsemble, k: float, tau: float, xhat):
    """Sample mean and standard error of ``f^((k+tau)x) conj(f^(k x))``."""
    if ensemble.N == 0:
        raise EmptyEnsemble("ensemble is empty")
    xhat = np.asarray(xhat, dtype=float).reshape(-1)
    xhat = xhat / np.linalg.norm(xhat)
    xis = np.stack([(k + tau) * xhat, k * xhat])
    _check_nyquist(ensemble.spec.grid, xis)
    fh = nudft(ensemble.values, ensemble.spec.grid, xis)
    mean, se = mean_and_stderr(fh[:, 0] * np.conj(fh[:, 1]))
    return complex(mean), float(se)


@dataclass
class SymbolReport:
    k_band: list
    directions: np.ndarray
    ratios: np.ndarray
    h_hat_zero: float
    band: tuple = (0.8, 1.2)
    median: float = float("nan")
    spread: float = float("nan")
    passed: bool = True
    entries: list = dc_field(default_factory=list)

    def __post_init__(self):
        r = np.asarray(self.ratios, dtype=float).reshape(-1)
        if r.size:
            self.median = float(np.median(r))
            q1, q3 = np.percentile(r, [25, 75])
            self.spread = float(q3 - q1)
            self.passed = bool(self.band[0] <= self.median <= self.band[1])


def symbol_validation(ensemble: FieldEnsemble, k_band, directions,
                      band=(0.8, 1.2)) -> SymbolReport:
    """``k^m E|f^(k x)|^2 / h^(0)`` for every (k, x); median checked against ``band``."""
    dirs = np.asarray(directions, dtype=float).reshape(-1, ensemble.spec.d)
    ks = np.asarray(list(k_band), dtype=float)
    h0 = float(np.real(ensemble.spec.strength.h_hat(np.zeros((1, ensemble.spec.d)))[0]))
    if dirs.size == 0 or ks.size == 0:
        return SymbolReport(list(ks), dirs, np.zeros((len(ks), len(dirs))), h0)
    if ensemble.N == 0:
        raise EmptyEnsemble("ensemble is empty")
    xis = (ks[:, None, None] * dirs[None]).reshape(-1, ensemble.spec.d)
    _check_nyquist(ensemble.spec.grid, xis)
    fh = nudft(ensemble.values, ensemble.spec.grid, xis)
    power = np.mean(np.abs(fh) ** 2, axis=0).reshape(len(ks), len(dirs))
    ratios = ks[:, None] ** ensemble.spec.m * power / h0
    entries = [(float(k), j, float(ratios[i, j])) for i, k in enumerate(ks)
               for j in range(len(dirs))]
    return SymbolReport(list(ks), dirs, ratios, h0, tuple(band), entries=entries)


# ---------------------------------------------------------------------------
# Ensemble directories


def save_ensemble(directory, ensemble: FieldEnsemble) -> list:
    """One field file pair per realization plus ``ensemble.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = list(write_field(directory / "strength", ensemble.spec.strength.h))
    names = []
    for i, f in enumerate(ensemble.realizations):
        written += list(write_field(directory / f"field_{i:05d}", f))
        names.append(f"field_{i:05d}")
    manifest = {"spec": ensemble.spec.to_dict(), "master_seed": ensemble.master_seed,
                "N": ensemble.N, "seeds": [str(s) for s in ensemble.seeds], "fields": names}
    path = directory / "ensemble.json"
    path.write_text(json.dumps(manifest, indent=1))
    return written + [path]


def load_ensemble(directory) -> FieldEnsemble:
    directory = Path(directory)
    m = json.loads((directory / "ensemble.json").read_text())
    h = read_field(directory / "strength")
    spec = GmigSpec(m["spec"]["m"], StrengthProfile(h, m["spec"]["bound_M"]), m["spec"]["mode"])
    fields = [read_field(directory / n) for n in m["fields"]]
    ens = FieldEnsemble.from_fields(spec, fields, [int(s) for s in m["seeds"]])
    ens.master_seed = m["master_seed"]
    return ens
