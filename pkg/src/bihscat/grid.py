"""Uniform periodic grids, sampled fields and the discrete Fourier machinery.

Fourier convention (used everywhere in the package)::

    f_hat(xi) = integral f(y) exp(-1j * xi . y) dy

Grid nodes sit at ``x_j = -R + j*h`` (``h = 2R/n``) so the origin is a node,
and every node carries the cell volume ``h**d`` in midpoint quadrature.
:func:`spectral_transform` is the node sum ``sum_j f_j exp(-1j xi_q . x_j)``
at the discrete frequencies ``xi_q = 2 pi q / (2R)``; multiplied by the cell
volume it coincides with :func:`nudft_point` evaluated at ``xi_q``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.fft as sfft

from .exceptions import GridMismatch, NyquistViolation


@dataclass(frozen=True)
class GridSpec:
    """Box ``[-R, R)^d`` sampled with ``n`` nodes per axis."""

    dim: int
    n_per_axis: int
    half_width: float

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        n = int(self.n_per_axis)
        if n < 8 or n & (n - 1):
            raise ValueError(f"n_per_axis must be a power of two >= 8, got {self.n_per_axis}")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")
        object.__setattr__(self, "n_per_axis", n)
        object.__setattr__(self, "half_width", float(self.half_width))

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / self.n_per_axis

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.dim

    @property
    def shape(self) -> tuple:
        return (self.n_per_axis,) * self.dim

    @property
    def size(self) -> int:
        return self.n_per_axis ** self.dim

    @property
    def nyquist(self) -> float:
        return np.pi / self.spacing

    def axis(self) -> np.ndarray:
        return -self.half_width + self.spacing * np.arange(self.n_per_axis)

    def coords(self) -> list:
        return np.meshgrid(*([self.axis()] * self.dim), indexing="ij", sparse=True)

    def radius(self) -> np.ndarray:
        return np.sqrt(sum(c * c for c in self.coords()))

    def freq_axis(self) -> np.ndarray:
        """Discrete angular frequencies in FFT order."""
        return 2.0 * np.pi * sfft.fftfreq(self.n_per_axis, d=self.spacing)

    def wavevectors(self) -> list:
        return np.meshgrid(*([self.freq_axis()] * self.dim), indexing="ij", sparse=True)

    def freq_magnitude(self) -> np.ndarray:
        return np.sqrt(sum(w * w for w in self.wavevectors()))

    def inner_mask(self, fraction: float = 0.5) -> np.ndarray:
        """Nodes inside ``[-fraction*R, fraction*R)^d``."""
        a = self.axis()
        inside = (a >= -fraction * self.half_width) & (a < fraction * self.half_width)
        out = inside
        for _ in range(self.dim - 1):
            out = np.multiply.outer(out, inside)
        return out

    def to_dict(self) -> dict:
        return {"dim": self.dim, "n_per_axis": self.n_per_axis, "half_width": self.half_width}


@dataclass(frozen=True, eq=False)
class Field:
    """Sampled function on a :class:`GridSpec` (real or complex)."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.size != self.grid.size:
            raise GridMismatch(f"expected {self.grid.size} samples, got {v.size}")
        object.__setattr__(self, "values", v.reshape(self.grid.shape))

    @property
    def is_real(self) -> bool:
        return not np.iscomplexobj(self.values)

    def norm(self) -> float:
        """Discrete L2 norm with cell-volume weights."""
        return float(np.sqrt(self.grid.cell_volume * np.sum(np.abs(self.values) ** 2)))

    def with_values(self, values) -> "Field":
        return Field(self.grid, values)


def real_field(grid: GridSpec, values) -> Field:
    return Field(grid, np.asarray(values, dtype=np.float64))


def complex_field(grid: GridSpec, values) -> Field:
    return Field(grid, np.asarray(values, dtype=np.complex128))


def zeros(grid: GridSpec, dtype=np.float64) -> Field:
    return Field(grid, np.zeros(grid.shape, dtype=dtype))


def _check_same_grid(a: GridSpec, b: GridSpec):
    if a != b:
        raise GridMismatch(f"grid mismatch: {a} vs {b}")


# ---------------------------------------------------------------------------
# Discrete transforms


def _node_phase(grid: GridSpec) -> np.ndarray:
    # exp(1j * xi_q * R) = (-1)**q per axis; corrects the -R origin shift
    q = np.rint(sfft.fftfreq(grid.n_per_axis) * grid.n_per_axis).astype(np.int64)
    s1 = np.where(q % 2 == 0, 1.0, -1.0)
    out = s1
    for _ in range(grid.dim - 1):
        out = np.multiply.outer(out, s1)
    return out


def spectral_transform(field: Field, direction: str = "forward") -> Field:
    """Discrete Fourier transform in the package convention.

    ``forward`` returns the node sum ``sum_j f_j exp(-1j xi_q . x_j)`` in FFT
    frequency order; ``inverse`` undoes it exactly (``1/n^d`` normalisation).
    """
    axes = tuple(range(-field.grid.dim, 0))
    phase = _node_phase(field.grid)
    if direction == "forward":
        out = sfft.fftn(field.values, axes=axes) * phase
    elif direction == "inverse":
        out = sfft.ifftn(field.values * phase, axes=axes)
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    return Field(field.grid, out)


def _check_nyquist(grid: GridSpec, xis: np.ndarray):
    mags = np.linalg.norm(np.atleast_2d(xis), axis=-1)
    if np.any(mags * grid.spacing >= np.pi):
        raise NyquistViolation(
            f"|xi| = {mags.max():.4g} exceeds the grid Nyquist limit {grid.nyquist:.4g}")


def nudft_point(field: Field, xi) -> complex:
    """Midpoint quadrature of ``integral field(y) exp(-1j xi . y) dy``."""
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.shape != (field.grid.dim,):
        raise ValueError(f"xi must have {field.grid.dim} components")
    return complex(nudft(field.values, field.grid, xi[None, :])[0])


def _support_slices(values: np.ndarray, dim: int) -> tuple:
    nz = values != 0
    lead = tuple(range(values.ndim - dim))
    if lead:
        nz = nz.any(axis=lead)
    slices = []
    for ax in range(dim):
        other = tuple(a for a in range(dim) if a != ax)
        hit = np.flatnonzero(nz.any(axis=other) if other else nz)
        if hit.size == 0:
            return None
        slices.append(slice(hit[0], hit[-1] + 1))
    return tuple(slices)


def nudft(values: np.ndarray, grid: GridSpec, xis: np.ndarray, *, chunk: int = 256) -> np.ndarray:
    """Batched nonuniform DFT.

    ``values`` has shape ``(*batch, *grid.shape)``, ``xis`` shape ``(P, d)``.
    Returns ``(*batch, P)``. The sum is restricted to the common bounding box
    of the nonzero samples and evaluated axis by axis, so compactly supported
    ensembles are cheap.
    """
    xis = np.atleast_2d(np.asarray(xis, dtype=float))
    d = grid.dim
    if xis.shape[-1] != d:
        raise ValueError("xis must have shape (P, dim)")
    _check_nyquist(grid, xis)
    values = np.asarray(values)
    batch = values.shape[:-d]
    out = np.zeros(batch + (xis.shape[0],), dtype=np.complex128)
    sl = _support_slices(values, d)
    if sl is None:
        return out
    v = values[(Ellipsis,) + sl].reshape((-1,) + tuple(s.stop - s.start for s in sl))
    ax = grid.axis()
    res = np.empty((v.shape[0], xis.shape[0]), dtype=np.complex128)
    for p0 in range(0, xis.shape[0], chunk):
        xp = xis[p0:p0 + chunk]
        t = v.astype(np.complex128)
        # contract trailing axis first, carrying the point index along
        e = np.exp(-1j * np.multiply.outer(xp[:, d - 1], ax[sl[d - 1]]))
        t = np.einsum("...c,pc->...p", t, e, optimize=True)
        for a in range(d - 2, -1, -1):
            e = np.exp(-1j * np.multiply.outer(xp[:, a], ax[sl[a]]))
            t = np.einsum("...cp,pc->...p", t, e, optimize=True)
        res[:, p0:p0 + chunk] = t
    return (grid.cell_volume * res).reshape(batch + (xis.shape[0],))


# ---------------------------------------------------------------------------
# Spectral multipliers


@dataclass
class SpectralMultiplier:
    """Pointwise weight on discrete frequencies.

    ``symbol`` maps the list of wavevector component arrays (broadcastable,
    FFT order) to weights; ``zero_mode`` replaces the value at ``xi = 0``.
    """

    symbol: Callable
    zero_mode: complex = 0.0
    grid: Optional[GridSpec] = None
    _cache: dict = dc_field(default_factory=dict, repr=False)

    @classmethod
    def power(cls, p: float, zero_mode: complex = 0.0, grid: Optional[GridSpec] = None):
        """Multiplier ``|xi|**p``."""
        def sym(ks):
            mag = np.sqrt(sum(k * k for k in ks))
            with np.errstate(divide="ignore", invalid="ignore"):
                return mag ** p
        return cls(sym, zero_mode, grid)

    @classmethod
    def identity(cls):
        return cls(lambda ks: np.ones(np.broadcast_shapes(*(k.shape for k in ks))), 1.0)

    def evaluate(self, grid: GridSpec) -> np.ndarray:
        if self.grid is not None:
            _check_same_grid(self.grid, grid)
        if grid not in self._cache:
            w = np.broadcast_to(self.symbol(grid.wavevectors()), grid.shape).astype(np.complex128)
            w[(0,) * grid.dim] = self.zero_mode
            if not np.all(np.isfinite(w)):
                raise ValueError("multiplier is not finite on the discrete frequencies")
            if np.all(w.imag == 0):
                w = w.real.copy()
            self._cache[grid] = w
        return self._cache[grid]


def apply_multiplier(field: Field, mult: SpectralMultiplier) -> Field:
    """Multiply the discrete spectrum of ``field`` by ``mult``."""
    w = mult.evaluate(field.grid)
    axes = tuple(range(-field.grid.dim, 0))
    out = sfft.ifftn(w * sfft.fftn(field.values, axes=axes), axes=axes)
    return Field(field.grid, out)


# ---------------------------------------------------------------------------
# Field files: JSON sidecar + raw little-endian array


def write_field(path, field: Field) -> tuple:
    """Write ``<path>.json`` and ``<path>.bin``; returns both paths."""
    path = Path(path)
    dtype = "f64" if field.is_real else "c128"
    meta = dict(field.grid.to_dict(), dtype=dtype, order="row-major")
    js, bn = path.with_suffix(".json"), path.with_suffix(".bin")
    js.write_text(json.dumps(meta, indent=1, sort_keys=True))
    arr = np.ascontiguousarray(field.values, dtype="<f8" if dtype == "f64" else "<c16")
    arr.tofile(bn)
    return js, bn


def read_field(path) -> Field:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    grid = GridSpec(meta["dim"], meta["n_per_axis"], meta["half_width"])
    if meta.get("order", "row-major") != "row-major":
        raise ValueError("only row-major field files are supported")
    dt = {"f64": "<f8", "c128": "<c16"}[meta["dtype"]]
    vals = np.fromfile(path.with_suffix(".bin"), dtype=dt)
    return Field(grid, vals.astype(np.float64 if meta["dtype"] == "f64" else np.complex128))


# ---------------------------------------------------------------------------
# Direction sets with quadrature weights on S^{d-1}


def circle_directions(count: int):
    """``count`` equispaced unit vectors and trapezoid weights (sum 2 pi)."""
    if count < 1:
        raise ValueError("count must be positive")
    th = 2 * np.pi * np.arange(count) / count
    return np.stack([np.cos(th), np.sin(th)], axis=1), np.full(count, 2 * np.pi / count)


def sphere_directions(n_theta: int, n_phi: int = None):
    """Gauss-Legendre in cos(theta) times trapezoid in phi (weights sum 4 pi).

    Symmetric under x -> -x when ``n_phi`` is even.
    """
    n_phi = 2 * n_theta if n_phi is None else n_phi
    ct, wt = np.polynomial.legendre.leggauss(n_theta)
    ph = 2 * np.pi * np.arange(n_phi) / n_phi
    st = np.sqrt(1 - ct ** 2)
    dirs = np.stack([np.multiply.outer(st, np.cos(ph)), np.multiply.outer(st, np.sin(ph)),
                     np.multiply.outer(ct, np.ones(n_phi))], axis=-1).reshape(-1, 3)
    w = np.multiply.outer(wt, np.full(n_phi, 2 * np.pi / n_phi)).reshape(-1)
    return dirs, w


def unit_directions(d: int, count: int):
    if d == 2:
        return circle_directions(count)
    n_theta = max(2, int(round(np.sqrt(count / 2))))
    return sphere_directions(n_theta)
