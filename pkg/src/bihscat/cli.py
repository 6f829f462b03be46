"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence, 4 I/O error.
The worker count defaults to the ``BIHSCAT_WORKERS`` environment variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .exceptions import BihscatError, ConfigError, NumericDivergence, PowerIterationStall

log = logging.getLogger("bihscat")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4


def _grid_args(p):
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--n", type=int, default=256, help="nodes per axis")
    p.add_argument("--half-width", type=float, default=2.4)


def _grid(a):
    from .grid import GridSpec
    return GridSpec(a.dim, a.n, a.half_width)


def _emit(obj, out=None):
    text = json.dumps(obj, indent=1, default=float)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def cmd_sample_field(a):
    from .gmig import (GmigSpec, StrengthProfile, bump_field, generate_ensemble, sample_gmig,
                       realization_seed, save_ensemble)
    from .grid import write_field
    grid = _grid(a)
    spec = GmigSpec(a.m, StrengthProfile(bump_field(grid, a.radius, a.amplitude)))
    if a.N is None:
        f = sample_gmig(spec, realization_seed(a.seed, 0))
        paths = write_field(a.out, f)
    else:
        paths = save_ensemble(a.out, generate_ensemble(spec, a.seed, a.N, a.workers))
    _emit({"written": [str(p) for p in paths]})


def cmd_forward(a):
    from .forward import Potential, ScatteringProblem, born_solve, pde_residual
    from .grid import Field, read_field, write_field
    f = read_field(a.source)
    V = read_field(a.potential) if a.potential else Field(f.grid, np.zeros(f.grid.shape))
    prob = ScatteringProblem(a.k, Potential(V), f)
    sol = born_solve(prob, tol=a.tol, jmax=a.jmax)
    if not sol.converged:
        raise NumericDivergence(f"Born series did not converge (contraction "
                                f"{sol.contraction_estimate:.3g})")
    paths = write_field(a.out, sol.u) if a.out else ()
    _emit({"terms": len(sol.terms), "term_norms": sol.term_norms,
           "residual": pde_residual(sol, prob), "written": [str(p) for p in paths]})


def cmd_farfield(a):
    from .forward import Potential, ensemble_far_field, write_farfield_ensemble
    from .gmig import load_ensemble
    from .grid import read_field, unit_directions
    ens = load_ensemble(a.ensemble)
    grid = ens.spec.grid
    pot = Potential(read_field(a.potential)) if a.potential else None
    dirs, _ = unit_directions(grid.dim, a.directions)
    ks = np.asarray(a.k, dtype=float)
    X = ensemble_far_field(ens.values, grid, ks, dirs, pot, kind=a.kind, workers=a.workers)
    if not np.all(np.isfinite(X)):
        raise NumericDivergence("non-finite far field")
    paths = write_farfield_ensemble(a.out, ks, dirs, X, a.kind)
    _emit({"written": [str(p) for p in paths]})


def cmd_invert(a):
    from .forward import read_farfield_ensemble
    from .grid import read_field
    from .inverse import StrengthReconstructor
    ks, dirs, X = read_farfield_ensemble(a.farfield)
    grid_src = read_field(a.grid_from)
    est = StrengthReconstructor(a.m, dirs.shape[1], a.K0, a.K, a.cutoff, a.symbol_point)
    est.fit(X, ks, dirs)
    res = est.reconstruct(grid_src.grid, grid_src if a.truth else None)
    paths = res.save(a.out)
    _emit({"cutoff_radius": res.cutoff_radius, "rel_L2_error": res.rel_L2_error,
           "written": [str(p) for p in paths]})


def cmd_resolvent_probe(a):
    from .forward import CutoffWindow, resolvent_norm_probe
    grid = _grid(a)
    R = grid.half_width
    window = CutoffWindow.smooth_box(grid, a.inner * R, 0.5 * R)
    ks = np.geomspace(a.k_min, a.k_max, a.num_k)
    rep = resolvent_norm_probe(ks, window, iterations=a.iterations)
    _emit({"k": rep.k_list, "norms": rep.norms, "fitted_slope": rep.fitted_slope,
           "predicted_slope": rep.predicted_slope}, a.out)


def cmd_continuation_check(a):
    from .stability import SlabSpec, continuation_bound_check
    slab = SlabSpec(a.K0, a.K, a.h0)
    zq = np.linspace(a.K * 1.01, a.K + a.span, a.num_z)
    tests = {"constant": lambda z: a.eps,
             "decaying": lambda z: a.eps * np.exp(-(z - a.K))}
    out = {}
    for name, p in tests.items():
        r = continuation_bound_check(p, a.M, zq, slab)
        out[name] = {"eps": r.eps, "holds": r.holds, "min_margin": float(r.margins.min()),
                     "mu_at_most_one": r.mu_at_most_one}
    _emit(out, a.out)


def cmd_experiment(a):
    from .experiment import ExperimentConfig, emit_report, run_experiment
    cfg = ExperimentConfig.load(a.config, a.set or ())
    man = run_experiment(cfg, a.output_dir, a.workers)
    root = Path(a.output_dir or cfg["output_dir"])
    summary = emit_report(root)
    _emit({"complete": man.complete, "files": len(man.files), "config_hash": man.config_hash,
           "warnings": summary["warnings"]})


def cmd_report(a):
    from .experiment import emit_report
    if not Path(a.run_dir).is_dir():
        raise FileNotFoundError(a.run_dir)
    _emit(emit_report(a.run_dir))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bihscat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--workers", type=int, default=None,
                   help="worker threads (default: $BIHSCAT_WORKERS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample-field", help="sample one source or a seeded ensemble")
    _grid_args(s)
    s.add_argument("--m", type=float, default=3.0)
    s.add_argument("--radius", type=float, default=1.0, help="strength bump radius")
    s.add_argument("--amplitude", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0, help="master seed")
    s.add_argument("--N", type=int, default=None, help="ensemble size (directory output)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample_field)

    s = sub.add_parser("forward", help="Born solve for one source")
    s.add_argument("--source", required=True, help="field file (without suffix)")
    s.add_argument("--potential", default=None)
    s.add_argument("--k", type=float, required=True)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--jmax", type=int, default=50)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_forward)

    s = sub.add_parser("farfield", help="far fields of a stored ensemble")
    s.add_argument("--ensemble", required=True)
    s.add_argument("--k", type=float, nargs="+", required=True)
    s.add_argument("--directions", type=int, default=64)
    s.add_argument("--potential", default=None)
    s.add_argument("--kind", default="full")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_farfield)

    s = sub.add_parser("invert", help="reconstruct the strength from stored far fields")
    s.add_argument("--farfield", required=True)
    s.add_argument("--grid-from", required=True, help="field file defining the target grid")
    s.add_argument("--truth", action="store_true", help="treat --grid-from as the true h")
    s.add_argument("--m", type=float, default=3.0)
    s.add_argument("--K0", type=float, required=True)
    s.add_argument("--K", type=float, required=True)
    s.add_argument("--cutoff", type=float, default=None)
    s.add_argument("--symbol-point", default="midpoint", choices=["midpoint", "lower"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("resolvent-probe", help="log-log decay of the cutoff resolvent norm")
    _grid_args(s)
    s.add_argument("--k-min", type=float, required=True)
    s.add_argument("--k-max", type=float, required=True)
    s.add_argument("--num-k", type=int, default=6)
    s.add_argument("--inner", type=float, default=0.4, help="plateau of the window / R")
    s.add_argument("--iterations", type=int, default=30)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_resolvent_probe)

    s = sub.add_parser("continuation-check", help="check the continuation bound on test functions")
    s.add_argument("--K0", type=float, default=1.0)
    s.add_argument("--K", type=float, default=2.0)
    s.add_argument("--h0", type=float, default=0.5)
    s.add_argument("--M", type=float, default=1.0)
    s.add_argument("--eps", type=float, default=1e-3)
    s.add_argument("--span", type=float, default=5.0)
    s.add_argument("--num-z", type=int, default=20)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_continuation_check)

    s = sub.add_parser("experiment", help="run the configured pipeline")
    s.add_argument("--config", required=True, help="YAML or JSON config file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. band.K=20 (repeatable)")
    s.add_argument("--output-dir", default=None)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("report", help="consolidate a run directory into CSV/JSON tables")
    s.add_argument("run_dir")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    from .gmig import worker_count
    args.workers = worker_count(args.workers)
    try:
        args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NumericDivergence, PowerIterationStall) as exc:
        log.error("numeric divergence: %s", exc)
        return EXIT_DIVERGENCE
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except BihscatError as exc:
        cause = getattr(exc, "cause", None)
        if isinstance(cause, ConfigError):
            log.error("config error: %s", exc)
            return EXIT_CONFIG
        if isinstance(cause, (NumericDivergence, PowerIterationStall)):
            log.error("numeric divergence: %s", exc)
            return EXIT_DIVERGENCE
        if isinstance(cause, OSError):
            log.error("I/O error: %s", exc)
            return EXIT_IO
        log.error("%s", exc)
        return EXIT_CONFIG
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
