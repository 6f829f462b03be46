"""Free biharmonic resolvent, Born series and far-field patterns.

``R0(lambda)`` is applied as an aperiodic discrete convolution (circulant
embedding on the doubled grid) with ``G_lambda`` sampled at every node
separation, the ``r = 0`` sample taking the finite limit value. The discrete
operator ``h^d G(x_i - x_j)`` is symmetric, which the far-field weights below
rely on.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.fft as sfft

from .exceptions import (DomainError, GridMismatch, IndexOutOfRange, KernelDomainError,
                         NyquistViolation, PowerIterationStall, SupportViolation)
from .grid import Field, GridSpec, nudft
from .kernels import WavenumberPoint, biharmonic_kernel

SOLVER_NYQUIST_FRACTION = 0.25  # k * h < pi/4
SUPPORT_TOL = 1e-10


def farfield_constant(d: int) -> complex:
    if d == 2:
        return np.exp(0.25j * np.pi) / np.sqrt(8 * np.pi)
    if d == 3:
        return 1.0 / (4 * np.pi)
    raise ValueError("d must be 2 or 3")


def farfield_prefactor(k: float, d: int) -> complex:
    """``C_d / (2 k^{(7-d)/2})``."""
    return farfield_constant(d) / (2.0 * float(k) ** ((7 - d) / 2))


def _check_support(values: np.ndarray, grid: GridSpec, what: str = "density"):
    scale = np.max(np.abs(values)) if values.size else 0.0
    if scale == 0:
        return
    outside = ~grid.inner_mask(0.5)
    leak = np.max(np.abs(values[..., outside]))
    if leak > SUPPORT_TOL * scale:
        raise SupportViolation(f"{what} is not supported in the inner half-box "
                               f"(relative leak {leak / scale:.2e})")


@dataclass(frozen=True, eq=False)
class Potential:
    V: Field

    def __post_init__(self):
        if not self.V.is_real:
            raise ValueError("potential must be real")
        _check_support(self.V.values, self.V.grid, "potential")

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.V.values)))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.V.values)

    @classmethod
    def zero(cls, grid: GridSpec):
        return cls(Field(grid, np.zeros(grid.shape)))


@dataclass(frozen=True, eq=False)
class ScatteringProblem:
    k: float
    potential: Potential
    source: Field

    def __post_init__(self):
        if not self.k > 0:
            raise DomainError("wavenumber must be positive")
        if self.potential.V.grid != self.source.grid:
            raise GridMismatch("potential and source live on different grids")
        _check_admissible(self.k, self.grid)
        _check_support(self.source.values, self.grid, "source")

    @property
    def grid(self) -> GridSpec:
        return self.source.grid

    @property
    def d(self) -> int:
        return self.grid.dim


@dataclass
class BornSolution:
    u: Field
    terms: list
    term_norms: list
    converged: bool
    contraction_estimate: float
    lam: complex = 0j

    def ratios(self) -> np.ndarray:
        n = np.asarray(self.term_norms)
        return n[1:] / n[:-1] if n.size > 1 else np.array([])


@dataclass
class FarFieldSample:
    k: complex
    directions: np.ndarray
    values: np.ndarray
    kind: str = "full"

    def __post_init__(self):
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=float))
        if not np.allclose(np.linalg.norm(self.directions, axis=1), 1.0, atol=1e-12, rtol=0):
            raise ValueError("directions must be unit vectors")


def _check_admissible(lam, grid: GridSpec):
    if abs(lam) * grid.spacing >= np.pi * SOLVER_NYQUIST_FRACTION:
        raise NyquistViolation(
            f"|k| h = {abs(lam) * grid.spacing:.3g} violates the solver guard k h < pi/4")


# ---------------------------------------------------------------------------
# Free resolvent


@lru_cache(maxsize=96)
def _kernel_hat(lam: complex, grid: GridSpec, conj: bool) -> np.ndarray:
    n, d, h = grid.n_per_axis, grid.dim, grid.spacing
    o = h * np.arange(n + 1)
    rq = np.sqrt(sum(c * c for c in np.meshgrid(*([o] * d), indexing="ij", sparse=True)))
    gq = biharmonic_kernel(lam, rq.ravel(), d).reshape(rq.shape) * grid.cell_volume
    if conj:
        gq = np.conj(gq)
    m = np.arange(2 * n)
    idx = np.minimum(m, 2 * n - m)
    g = gq[np.ix_(*([idx] * d))]
    out = sfft.fftn(g)
    out.setflags(write=False)
    return out


def kernel_spectrum(lam, grid: GridSpec, conj: bool = False) -> np.ndarray:
    """FFT of the doubled-grid kernel samples ``h^d G_lambda``; cached per key."""
    lam = complex(lam.lam if isinstance(lam, WavenumberPoint) else lam)
    if lam == 0 or (lam.real == 0 and lam.imag < 0 and grid.dim == 2):
        raise KernelDomainError(f"cannot evaluate G at lambda = {lam}")
    _check_admissible(lam, grid)
    return _kernel_hat(lam, grid, bool(conj))


def _convolve(values: np.ndarray, grid: GridSpec, khat: np.ndarray) -> np.ndarray:
    d, n = grid.dim, grid.n_per_axis
    axes = tuple(range(-d, 0))
    batch = values.shape[:-d]
    pad = np.zeros(batch + (2 * n,) * d, dtype=np.complex128)
    pad[(Ellipsis,) + (slice(0, n),) * d] = values
    out = sfft.ifftn(sfft.fftn(pad, axes=axes, overwrite_x=True) * khat, axes=axes,
                     overwrite_x=True)
    return np.ascontiguousarray(out[(Ellipsis,) + (slice(0, n),) * d])


def apply_R0_values(lam, values: np.ndarray, grid: GridSpec, *, conj: bool = False,
                    check: bool = True) -> np.ndarray:
    """Array-level :func:`apply_R0`; ``values`` may carry leading batch axes."""
    if check:
        _check_support(values, grid)
    return _convolve(values, grid, kernel_spectrum(lam, grid, conj))


def apply_R0(k, density: Field, d: Optional[int] = None) -> Field:
    """Volume potential ``integral G_k(x, y) density(y) dy`` on the grid."""
    if d is not None and d != density.grid.dim:
        raise GridMismatch("dimension does not match the density grid")
    return Field(density.grid, apply_R0_values(k, density.values, density.grid))


# ---------------------------------------------------------------------------
# Born series


def _neumann(lam, first: np.ndarray, V: np.ndarray, grid: GridSpec, tol: float, jmax: int,
             conj: bool = False):
    """Terms t_0 = first, t_{j+1} = -R0(V t_j) until ||t_j||/||t_0|| < tol."""
    axes = tuple(range(-grid.dim, 0))
    terms = [first]
    norms = [np.sqrt(grid.cell_volume * np.sum(np.abs(first) ** 2, axis=axes))]
    base = np.where(norms[0] > 0, norms[0], 1.0)
    converged, contraction = True, 0.0
    if not np.any(V) or not np.any(first):
        return terms, norms, True, 0.0
    khat = kernel_spectrum(lam, grid, conj)
    while True:
        nxt = -_convolve(V * terms[-1], grid, khat)
        nn = np.sqrt(grid.cell_volume * np.sum(np.abs(nxt) ** 2, axis=axes))
        ratio = np.max(nn / np.where(norms[-1] > 0, norms[-1], 1.0))
        contraction = float(ratio)
        terms.append(nxt)
        norms.append(nn)
        if np.all(nn / base < tol):
            break
        if ratio >= 1.0 or len(terms) > jmax:
            converged = False
            break
    return terms, norms, converged, contraction


def born_solve(problem: ScatteringProblem, tol: float = 1e-8, jmax: int = 50,
               lam=None) -> BornSolution:
    """Born series ``u = sum_j (-R0 V)^j R0 f`` at ``lam`` (default ``k``).

    Divergence is reported through ``converged=False`` rather than raised.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    lam = problem.k if lam is None else complex(lam)
    grid = problem.grid
    t0 = apply_R0_values(lam, problem.source.values, grid)
    terms, norms, ok, contraction = _neumann(lam, t0, problem.potential.V.values, grid, tol, jmax)
    u = np.sum(terms, axis=0) if len(terms) > 1 else terms[0]
    return BornSolution(Field(grid, u), [Field(grid, t) for t in terms],
                        [float(n) for n in norms], ok, contraction, complex(lam))


# ---------------------------------------------------------------------------
# Finite-difference residual

_D4 = np.array([-1.0, 12.0, -39.0, 56.0, -39.0, 12.0, -1.0]) / 6.0
_D2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


def _stencil(u: np.ndarray, coeffs: np.ndarray, axis: int, h: float, order: int) -> np.ndarray:
    half = len(coeffs) // 2
    out = np.zeros_like(u)
    for c, s in zip(coeffs, range(-half, half + 1)):
        out += c * np.roll(u, -s, axis=axis)
    return out / h ** order


def bilaplacian_fd(u: np.ndarray, h: float) -> np.ndarray:
    """Fourth-order accurate Delta^2 (periodic wrap; trust only the interior)."""
    d = u.ndim
    out = sum(_stencil(u, _D4, a, h, 4) for a in range(d))
    second = [_stencil(u, _D2, a, h, 2) for a in range(d)]
    for a in range(d):
        for b in range(a + 1, d):
            out = out + 2.0 * _stencil(second[a], _D2, b, h, 2)
    return out


def pde_residual(solution: BornSolution, problem: ScatteringProblem,
                 fraction: float = 0.5) -> float:
    """Relative l2 residual of (Delta^2 - k^4 + V) u - f on ``[-fR, fR)^d``."""
    grid = problem.grid
    u = solution.u.values
    k = solution.lam if solution.lam else problem.k
    res = bilaplacian_fd(u, grid.spacing) - k ** 4 * u + problem.potential.V.values * u \
        - problem.source.values
    mask = grid.inner_mask(fraction)
    num = np.linalg.norm(res[mask])
    den = np.linalg.norm(problem.source.values[mask])
    if den == 0:
        return float(num)
    return float(num / den)


# ---------------------------------------------------------------------------
# Far fields


def far_field_density(problem: ScatteringProblem, solution: BornSolution) -> np.ndarray:
    return problem.source.values - problem.potential.V.values * solution.u.values


def far_field(problem: ScatteringProblem, solution: BornSolution, directions) -> FarFieldSample:
    """``u_inf(x, k) = C_d/(2k^{(7-d)/2}) int exp(-ik x.y)(f - V u)(y) dy``."""
    dirs = np.atleast_2d(np.asarray(directions, dtype=float))
    k = problem.k
    vals = farfield_prefactor(k, problem.d) * nudft(far_field_density(problem, solution),
                                                    problem.grid, k * dirs)
    return FarFieldSample(k, dirs, vals, "full")


def far_field_term(j: int, problem: ScatteringProblem, solution: BornSolution,
                   directions) -> FarFieldSample:
    """Far field of the j-th Born density ``(-V R0)^j f``."""
    if j < 0 or j > len(solution.terms):
        raise IndexOutOfRange(f"term {j} not available ({len(solution.terms)} computed)")
    dirs = np.atleast_2d(np.asarray(directions, dtype=float))
    k = problem.k
    dens = problem.source.values if j == 0 else \
        -problem.potential.V.values * solution.terms[j - 1].values
    vals = farfield_prefactor(k, problem.d) * nudft(dens, problem.grid, k * dirs)
    return FarFieldSample(k, dirs, vals, f"term:{j}")


def v_far_field(problem: ScatteringProblem, directions, tol: float = 1e-12,
                jmax: int = 50) -> FarFieldSample:
    """Conjugate-side far field from the solve at the imaginary wavenumber ``ik``.

    Equals ``conj(u_inf)`` for real source and potential.
    """
    if not (problem.source.is_real and problem.potential.V.is_real):
        raise ValueError("v_far_field requires real source and potential")
    dirs = np.atleast_2d(np.asarray(directions, dtype=float))
    k = problem.k
    sol = born_solve(problem, tol=tol, jmax=jmax, lam=1j * k)
    dens = far_field_density(problem, sol)
    pref = np.conj(farfield_constant(problem.d)) / (2.0 * k ** ((7 - problem.d) / 2))
    vals = pref * nudft(dens, problem.grid, -k * dirs)
    return FarFieldSample(1j * k, dirs, vals, "v_field")


def far_field_weights(lam, potential: Potential, directions, *, sign: float = -1.0,
                      tol: float = 1e-10, jmax: int = 50, split_terms: bool = False):
    """Weights ``psi`` with ``int exp(sign*i k x.y)(f - V u)(y) dy = h^d sum psi f``.

    ``psi = sum_j (-R0 V)^j e`` with ``e = exp(sign*i|lam| x.y)``; by symmetry
    of the discrete resolvent one solve per direction replaces one solve per
    realization. With ``split_terms`` the individual Born terms are returned.
    """
    grid = potential.V.grid
    dirs = np.atleast_2d(np.asarray(directions, dtype=float))
    e = _plane_waves(lam, grid, dirs, sign)
    if potential.is_zero:
        return [e] if split_terms else e
    terms, _, ok, contraction = _neumann(complex(lam), e, potential.V.values, grid, tol, jmax)
    if not ok:
        from .exceptions import NumericDivergence
        raise NumericDivergence(f"Born series diverged at lambda={lam} "
                                f"(contraction {contraction:.3g})")
    return terms if split_terms else np.sum(terms, axis=0)


def _plane_waves(lam, grid: GridSpec, dirs: np.ndarray, sign: float, box=None) -> np.ndarray:
    kr = abs(complex(lam))
    ax = grid.axis()
    box = box or (slice(None),) * grid.dim
    e = 1.0
    for a in range(grid.dim):
        shape = [1] * (grid.dim + 1)
        shape[0], shape[a + 1] = len(dirs), -1
        e = e * np.exp(1j * sign * kr * np.multiply.outer(dirs[:, a], ax[box[a]])).reshape(shape)
    return np.ascontiguousarray(e, dtype=np.complex128)


def _source_matrix(sources: np.ndarray, grid: GridSpec):
    from .grid import _support_slices
    box = _support_slices(sources, grid.dim)
    if box is None:
        return None, None
    S = np.ascontiguousarray(sources[(Ellipsis,) + box]).reshape(sources.shape[0], -1)
    return box, S


def _contract(S: np.ndarray, w: np.ndarray, grid: GridSpec) -> np.ndarray:
    w = w.reshape(w.shape[0], -1)
    if np.isrealobj(S):
        return grid.cell_volume * (S @ w.real.T + 1j * (S @ w.imag.T))
    return grid.cell_volume * (S @ w.T)


def apply_weights(weights: np.ndarray, sources: np.ndarray, grid: GridSpec) -> np.ndarray:
    """``h^d sum_y weights[p](y) sources[b](y)`` -> ``(B, P)``."""
    d = grid.dim
    batch = sources.shape[:-d]
    flat = sources.reshape((-1,) + grid.shape)
    box, S = _source_matrix(flat, grid)
    if box is None:
        return np.zeros(batch + (weights.shape[0],), dtype=np.complex128)
    w = weights[(slice(None),) + box]
    return _contract(S, w, grid).reshape(batch + (weights.shape[0],))


def _weights_for(k, potential, dirs, kind, tol, box):
    """Far-field weights restricted to the source bounding box ``box``."""
    sign = 1.0 if kind == "v_field" else -1.0
    lam = 1j * k if kind == "v_field" else k
    if potential.is_zero:
        if kind in ("full", "v_field", "term:0", "tail:0"):
            return _plane_waves(lam, potential.V.grid, dirs, sign, box)
        if kind.startswith(("term:", "tail:")):
            return np.zeros((len(dirs),) + tuple(b.stop - b.start for b in box), np.complex128)
    if kind in ("full", "v_field"):
        w = far_field_weights(lam, potential, dirs, sign=sign, tol=tol)
    else:
        j = int(kind.split(":")[1])
        terms = far_field_weights(k, potential, dirs, tol=tol, split_terms=True)
        sel = terms[j:j + 1] if kind.startswith("term:") else terms[j:]
        w = np.sum(sel, axis=0) if sel else np.zeros_like(terms[0])
    return w[(slice(None),) + box]


def ensemble_far_field(sources: np.ndarray, grid: GridSpec, ks: Sequence[float], directions,
                       potential: Optional[Potential] = None, *, kind: str = "full",
                       tol: float = 1e-10, direction_chunk: int = 16,
                       workers: int = 1) -> np.ndarray:
    """Far fields of a stack of sources ``(N, *shape)`` -> ``(N, len(ks), P)``.

    ``kind``: ``full``, ``term:j`` (j-th Born term), ``tail:j`` (sum of terms
    >= j) or ``v_field``. Tasks are (frequency, direction chunk) cells with a
    fixed partition, so the result does not depend on ``workers``.
    """
    potential = Potential.zero(grid) if potential is None else potential
    d = grid.dim
    dirs = np.atleast_2d(np.asarray(directions, dtype=float))
    if kind not in ("full", "v_field") and not kind.startswith(("term:", "tail:")):
        raise ValueError(f"unknown far-field kind {kind!r}")
    if not potential.is_zero:
        for k in ks:
            _check_admissible(k, grid)
    out = np.zeros((sources.shape[0], len(ks), len(dirs)), dtype=np.complex128)
    box, S = _source_matrix(sources, grid)
    if box is None:
        return out
    tasks = [(i, p0) for i in range(len(ks)) for p0 in range(0, len(dirs), direction_chunk)]

    def run(task):
        i, p0 = task
        k = float(ks[i])
        sl = slice(p0, p0 + direction_chunk)
        w = _weights_for(k, potential, dirs[sl], kind, tol, box)
        pref = np.conj(farfield_constant(d)) / (2.0 * k ** ((7 - d) / 2)) if kind == "v_field" \
            else farfield_prefactor(k, d)
        out[:, i, sl] = pref * _contract(S, w, grid)

    if workers <= 1:
        for t in tasks:
            run(t)
    else:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(run, tasks))
    return out


# ---------------------------------------------------------------------------
# Resolvent norm probe


@dataclass
class CutoffWindow:
    chi: Field
    diameter_L: float

    def __post_init__(self):
        v = self.chi.values
        if v.min() < -1e-14 or v.max() > 1 + 1e-14:
            raise ValueError("cutoff must take values in [0, 1]")
        _check_support(v, self.chi.grid, "cutoff")
        pts = np.argwhere(v > 0)
        if len(pts):
            span = (pts.max(axis=0) - pts.min(axis=0)) * self.chi.grid.spacing
            if not self.diameter_L > np.linalg.norm(span):
                raise ValueError("diameter_L must exceed the support diameter of chi")

    @classmethod
    def smooth_box(cls, grid: GridSpec, inner: float, outer: float):
        """chi = 1 on ``|x|_inf <= inner``, 0 beyond ``outer`` (C-infinity ramp)."""
        if not 0 < inner < outer <= 0.5 * grid.half_width:
            raise ValueError("need 0 < inner < outer <= R/2")

        def ramp(t):
            t = np.clip(t, 0, 1)
            with np.errstate(divide="ignore", over="ignore"):
                a = np.where(t > 0, np.exp(-1 / np.where(t > 0, t, 1)), 0.0)
                b = np.where(t < 1, np.exp(-1 / np.where(t < 1, 1 - t, 1)), 0.0)
            return b / (a + b)

        chi = np.ones(grid.shape)
        for c in grid.coords():
            chi = chi * ramp((np.abs(c) - inner) / (outer - inner))
        chi[~grid.inner_mask(0.5)] = 0.0
        return cls(Field(grid, chi), 2 * np.sqrt(grid.dim) * outer * 1.01 + grid.spacing)


@dataclass
class SlopeReport:
    k_list: list
    norms: list
    fitted_slope: float
    predicted_slope: float
    iterations: int
    variant: str = "free"
    extras: dict = dc_field(default_factory=dict)

    def within(self, tol: float) -> bool:
        return abs(self.fitted_slope - self.predicted_slope) <= tol


def predicted_resolvent_slope(d: int) -> float:
    return -3.0 if d == 3 else -2.5


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def operator_norm(k, window: CutoffWindow, potential: Optional[Potential] = None,
                  iterations: int = 30, seed: int = 0, tol: float = 1e-10) -> float:
    """||chi R chi||_{L2->L2} by power iteration on ``A^* A``."""
    grid = window.chi.grid
    chi = window.chi.values
    V = None if potential is None or potential.is_zero else potential.V.values

    def forward(x, conj):
        y = chi * x
        y = apply_R0_values(k, y, grid, conj=conj, check=False)
        if V is not None:
            terms, _, ok, _ = _neumann(k, y, V, grid, tol, 50, conj=conj)
            if not ok:
                raise PowerIterationStall(f"perturbed resolvent series diverged at k={k}")
            y = np.sum(terms, axis=0)
        return chi * y

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(grid.shape) * chi
    x = x / np.linalg.norm(x)
    est = []
    for _ in range(iterations):
        y = forward(x, False)
        s = np.linalg.norm(y)
        est.append(s)
        if s == 0:
            raise PowerIterationStall("operator annihilated the iterate")
        z = forward(y, True)  # A^* is the same convolution with conjugated kernel
        x = z / np.linalg.norm(z)
    if len(est) > 2 and abs(est[-1] - est[-2]) > 1e-2 * est[-1]:
        raise PowerIterationStall(f"norm estimate not settled at k={k}: {est[-3:]}")
    return float(est[-1])


def resolvent_norm_probe(k_list, window: CutoffWindow, variant="free", d: Optional[int] = None,
                         iterations: int = 30) -> SlopeReport:
    """Fit the log-log decay of ``||chi R chi||`` over ``k_list``."""
    grid = window.chi.grid
    if d is not None and d != grid.dim:
        raise GridMismatch("dimension does not match the window grid")
    ks = [float(k) for k in k_list]
    if max(ks) / min(ks) < 10 - 1e-9:
        raise ValueError("k_list must span at least a decade")
    potential = None
    name = "free"
    if isinstance(variant, Potential):
        potential, name = variant, "potential"
    elif variant != "free":
        raise ValueError("variant must be 'free' or a Potential")
    norms = [operator_norm(k, window, potential, iterations) for k in ks]
    return SlopeReport(ks, norms, loglog_slope(ks, norms), predicted_resolvent_slope(grid.dim),
                       iterations, name)


# ---------------------------------------------------------------------------
# Far-field ensemble files


def write_farfield_ensemble(directory, ks, directions, values: np.ndarray, kind: str = "full"):
    """Manifest JSON plus one ``<kind>_k<i>.bin`` complex array ``(N, P)`` per k."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    values = np.asarray(values, dtype=np.complex128)
    tag = kind.replace(":", "")
    files = []
    for i in range(len(ks)):
        name = f"{tag}_k{i:03d}.bin"
        np.ascontiguousarray(values[:, i, :], dtype="<c16").tofile(directory / name)
        files.append(name)
    manifest = {"k_values": [float(k) for k in ks],
                "directions": np.asarray(directions, float).tolist(),
                "N": int(values.shape[0]), "kind": kind, "files": files}
    path = directory / f"farfield_{tag}.json"
    path.write_text(json.dumps(manifest, indent=1))
    return [path] + [directory / f for f in files]


def read_farfield_ensemble(directory, kind: str = "full"):
    directory = Path(directory)
    tag = kind.replace(":", "")
    m = json.loads((directory / f"farfield_{tag}.json").read_text())
    P = len(m["directions"])
    vals = np.stack([np.fromfile(directory / f, dtype="<c16").reshape(m["N"], P)
                     for f in m["files"]], axis=1)
    return np.asarray(m["k_values"]), np.asarray(m["directions"]), vals
