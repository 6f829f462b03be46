"""Configuration-driven pipeline: sample, solve, correlate, reconstruct, report.

Config schema (YAML or JSON; every key optional except where noted)::

    dim: 2
    grid: {n: 256, half_width: 2.4}
    source:
      m: 3.0
      strength_profile: {name: bump, radius: 1.0, amplitude: 1.0}
                         # or {name: gaussian_bump, sigma, radius, amplitude}
                         # or {file: path/to/field}
      master_seed: 0
      N: 512
      save_fields: false
    potential: {name: none}        # or {name: bump, radius, amplitude} / {file: ...}
    band: {K0: 20, K: 40, num_k: 40, eta_grid: [0.1, ..., 0.9], discrepancy_stride: 4}
    directions: {count: 64}
    mode: point                    # or band_averaged (d = 3)
    inversion: {cutoff_radius: 10.0, t: 0.1, symbol_point: midpoint}
    stability: {s: 1.0, delta_override: null, K_values: [40]}
    band_average: {k_values: [8.0], t_nodes: 16}
    slopes: {enabled: false, k_values: null, resolvent: false}
    output_dir: runs/example

With a nonzero potential, discrepancy pairs ``(k, (1+eta)k)`` whose upper
frequency violates the solver guard are left out of the declared grid.
"""
from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .exceptions import BihscatError, ConfigError, NumericDivergence
from .forward import (SOLVER_NYQUIST_FRACTION, Potential, ensemble_far_field,
                      write_farfield_ensemble)
from .gmig import (GmigSpec, StrengthProfile, bump_field, gaussian_bump_field, generate_ensemble,
                   save_ensemble, worker_count)
from .grid import Field, GridSpec, circle_directions, read_field, sphere_directions, write_field
from .inverse import (ETA_GRID, CorrelationDataset, StrengthReconstructor,
                      band_averaged_statistic, band_calibration_weight,
                      band_statistic_from_farfields, band_t_grid, correlation_estimate,
                      data_discrepancy, reconstruction_error)
from .stability import StabilityParams, stability_rhs, write_stability_csv

DEFAULTS = {
    "dim": 2,
    "grid": {"n": 256, "half_width": 2.4},
    "source": {"m": 3.0, "strength_profile": {"name": "bump", "radius": 1.0, "amplitude": 1.0},
               "master_seed": 0, "N": 512, "save_fields": False},
    "potential": {"name": "none"},
    "band": {"K0": 20.0, "K": 40.0, "num_k": 40, "eta_grid": list(ETA_GRID),
             "discrepancy_stride": 4},
    "directions": {"count": 64},
    "mode": "point",
    "inversion": {"cutoff_radius": 10.0, "t": 0.1, "symbol_point": "midpoint"},
    "stability": {"s": 1.0, "delta_override": None, "K_values": None},
    "band_average": {"k_values": [8.0], "t_nodes": 16},
    "slopes": {"enabled": False, "k_values": None, "resolvent": False},
    "output_dir": "run",
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            sub = dict(base[key])
            sub.update(val)
            out[key] = sub
        else:
            out[key] = val
    return out


def set_override(raw: dict, assignment: str) -> dict:
    """Apply ``section.key=value`` (value parsed as YAML) to a raw config dict."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    path, value = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{path} does not address a config section")
    node[keys[-1]] = yaml.safe_load(value)
    return raw


@dataclass
class ExperimentConfig:
    data: dict

    @classmethod
    def from_dict(cls, raw: Optional[dict]) -> "ExperimentConfig":
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        cfg = cls(_merge(DEFAULTS, raw))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides=()) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError:
            raise
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        raw = raw or {}
        for a in overrides:
            set_override(raw, a)
        return cls.from_dict(raw)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def hash(self) -> str:
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"), default=float)
        return hashlib.sha256(canon.encode()).hexdigest()

    # -- derived objects ---------------------------------------------------

    @property
    def grid(self) -> GridSpec:
        return GridSpec(int(self["dim"]), int(self["grid"]["n"]), float(self["grid"]["half_width"]))

    def strength(self) -> Field:
        return _profile(self["source"]["strength_profile"], self.grid, "strength")

    def potential(self) -> Potential:
        return Potential(_profile(self["potential"], self.grid, "potential"))

    def gmig_spec(self) -> GmigSpec:
        return GmigSpec(float(self["source"]["m"]), StrengthProfile(self.strength()),
                        "band_averaged" if self["mode"] == "band_averaged" else "point")

    def directions(self):
        count = int(self["directions"]["count"])
        if self["dim"] == 2:
            return circle_directions(count)
        n_theta = max(2, int(round(np.sqrt(count / 2))))
        return sphere_directions(n_theta)

    def stability_K_values(self) -> list:
        vals = self["stability"]["K_values"]
        return [float(self["band"]["K"])] if not vals else sorted(float(v) for v in vals)

    def band_grid(self) -> np.ndarray:
        """Uniform frequency grid covering every stability sub-band."""
        b = self["band"]
        step = (b["K"] - b["K0"]) / b["num_k"]
        ratio = b["K0"] / b["K"]
        lo = min(K * ratio for K in self.stability_K_values())
        i0 = int(np.floor(lo / step + 1e-9)) + 1
        i1 = int(np.floor(b["K"] / step + 1e-9))
        return step * np.arange(i0, i1 + 1)

    def validate(self):
        try:
            grid = self.grid
            spec = self.gmig_spec()
            pot = self.potential()
        except ConfigError:
            raise
        except (BihscatError, ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        b = self["band"]
        if not 0 < b["K0"] < b["K"]:
            raise ConfigError("band needs 0 < K0 < K")
        if int(b["num_k"]) < 2:
            raise ConfigError("band.num_k must be at least 2")
        if self["mode"] not in ("point", "band_averaged"):
            raise ConfigError("mode must be 'point' or 'band_averaged'")
        if int(self["source"]["N"]) < 2:
            raise ConfigError("source.N must be at least 2")
        eta_max = max(b["eta_grid"])
        top = (1 + eta_max) * b["K"]
        if top * grid.spacing >= np.pi:
            raise ConfigError("discrepancy frequencies exceed the grid Nyquist limit")
        if not pot.is_zero and b["K"] * grid.spacing >= np.pi * SOLVER_NYQUIST_FRACTION:
            raise ConfigError("band violates the solver guard k h < pi/4")
        st = self["stability"]
        mode = "band_averaged" if self["mode"] == "band_averaged" else "point"
        try:
            StabilityParams(spec.m, grid.dim, float(st["s"]), float(self["inversion"]["t"]),
                            st["delta_override"], mode)
        except BihscatError as exc:
            raise ConfigError(f"stability parameters: {exc}") from exc
        if self["directions"]["count"] < 2:
            raise ConfigError("need at least two directions")


def _profile(spec: dict, grid: GridSpec, what: str) -> Field:
    if spec is None:
        spec = {"name": "none"}
    if "file" in spec:
        f = read_field(spec["file"])
        if f.grid != grid:
            raise ConfigError(f"{what} file lives on a different grid")
        return f
    name = spec.get("name", "none")
    amp = float(spec.get("amplitude", 1.0))
    if name == "none":
        return Field(grid, np.zeros(grid.shape))
    if name == "bump":
        return bump_field(grid, float(spec["radius"]), amp, spec.get("center"))
    if name == "gaussian_bump":
        return gaussian_bump_field(grid, float(spec["sigma"]), float(spec["radius"]), amp)
    raise ConfigError(f"unknown {what} profile {name!r}")


# ---------------------------------------------------------------------------
# Manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    seeds: dict
    timings: dict = dc_field(default_factory=dict)
    files: dict = dc_field(default_factory=dict)
    complete: bool = False
    failed_stage: Optional[str] = None
    error: Optional[str] = None

    def record(self, root: Path, paths):
        for p in paths:
            p = Path(p)
            self.files[str(p.relative_to(root))] = sha256_file(p)

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "code_version": self.code_version,
                "seeds": self.seeds, "timings": self.timings,
                "files": dict(sorted(self.files.items())), "complete": self.complete,
                "failed_stage": self.failed_stage, "error": self.error}

    def write(self, root: Path) -> Path:
        path = Path(root) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def read(cls, root) -> "RunManifest":
        d = json.loads((Path(root) / "manifest.json").read_text())
        return cls(**d)


class StageError(BihscatError, RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage
        self.cause = exc


# ---------------------------------------------------------------------------
# Pipeline


def _json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=float))
    return path


def run_experiment(config: ExperimentConfig, output_dir=None,
                   workers: Optional[int] = None) -> RunManifest:
    """Run every stage, writing artifacts and ``manifest.json`` to the output dir."""
    root = Path(output_dir if output_dir is not None else config["output_dir"])
    root.mkdir(parents=True, exist_ok=True)
    nw = worker_count(workers)
    src = config["source"]
    man = RunManifest(config.hash, __version__,
                      {"master_seed": int(src["master_seed"]), "N": int(src["N"])})
    state = {}

    stages = [("config", _stage_config), ("sample", _stage_sample),
              ("farfield", _stage_farfield), ("correlate", _stage_correlate),
              ("reconstruct", _stage_reconstruct), ("stability", _stage_stability)]
    if config["mode"] == "band_averaged":
        stages.insert(4, ("band_average", _stage_band_average))
    if config["slopes"]["enabled"]:
        stages.append(("slopes", _stage_slopes))
    for name, fn in stages:
        t0 = time.perf_counter()
        try:
            paths = fn(config, root, state, nw)
        except Exception as exc:
            man.failed_stage = name
            man.error = f"{type(exc).__name__}: {exc}"
            man.timings[name] = time.perf_counter() - t0
            man.write(root)
            raise StageError(name, exc) from exc
        man.timings[name] = time.perf_counter() - t0
        man.record(root, paths)
    man.complete = True
    man.write(root)
    return man


def _stage_config(config, root, state, nw):
    p = root / "config.yaml"
    p.write_text(yaml.safe_dump(config.data, sort_keys=True))
    return [p]


def _stage_sample(config, root, state, nw):
    spec = config.gmig_spec()
    src = config["source"]
    ens = generate_ensemble(spec, int(src["master_seed"]), int(src["N"]), workers=nw)
    state["ensemble"] = ens
    if src.get("save_fields"):
        return save_ensemble(root / "ensemble", ens)
    paths = list(write_field(root / "strength", spec.strength.h))
    seeds = {"master_seed": ens.master_seed, "N": ens.N, "spec": spec.to_dict(),
             "seeds": [str(s) for s in ens.seeds]}
    paths.append(_json(root / "ensemble_seeds.json", seeds))
    return paths


def _stage_farfield(config, root, state, nw):
    ens = state["ensemble"]
    grid = config.grid
    pot = config.potential()
    dirs, _ = config.directions()
    paths = []
    if config["mode"] == "band_averaged":
        return paths
    ks = config.band_grid()
    X = ensemble_far_field(ens.values, grid, ks, dirs, pot, workers=nw)
    _check_finite(X)
    state["band"] = (ks, dirs, X)
    paths += write_farfield_ensemble(root / "farfield", ks, dirs, X, "full")
    b = config["band"]
    kd = ks[::max(1, int(b["discrepancy_stride"]))]
    etas = np.asarray(b["eta_grid"], dtype=float)
    shifted = np.unique(np.round(np.outer(kd, 1 + etas).reshape(-1), 12))
    if not pot.is_zero:
        shifted = shifted[shifted * grid.spacing < np.pi * SOLVER_NYQUIST_FRACTION]
    Y = ensemble_far_field(ens.values, grid, shifted, dirs, pot, workers=nw)
    _check_finite(Y)
    state["discrepancy"] = (kd, etas, shifted, X[:, np.searchsorted(ks, kd)], Y)
    paths += write_farfield_ensemble(root / "farfield_discrepancy", shifted, dirs, Y, "full")
    return paths


def _check_finite(X):
    if not np.all(np.isfinite(X)):
        raise NumericDivergence("non-finite far-field values")


def _stage_correlate(config, root, state, nw):
    if config["mode"] == "band_averaged":
        return []
    kd, etas, shifted, Xk, Y = state["discrepancy"]
    dirs = config.directions()[0]
    rows = {"k": [], "tau": [], "direction_index": [], "estimate": [], "stderr": []}
    for i, k in enumerate(kd):
        for eta in etas:
            j = int(np.argmin(np.abs(shifted - (1 + eta) * k)))
            if abs(shifted[j] - (1 + eta) * k) > 1e-9 * k:
                continue
            mean, se = correlation_estimate(Xk[:, i], Y[:, j], dirs)
            rows["k"] += [k] * len(dirs)
            rows["tau"] += [shifted[j] - k] * len(dirs)
            rows["direction_index"] += list(range(len(dirs)))
            rows["estimate"] += list(mean)
            rows["stderr"] += list(se)
    ds = CorrelationDataset(**rows, directions=dirs, N=state["ensemble"].N, mode="point")
    state["correlations"] = ds
    return ds.save(root / "correlations") + [ds.to_csv(root / "correlations.csv")]


def _stage_band_average(config, root, state, nw):
    ens = state["ensemble"]
    grid = config.grid
    if grid.dim != 3:
        raise ConfigError("band-averaged mode needs dim = 3")
    pot = config.potential()
    dirs = config.directions()[0]
    m = float(config["source"]["m"])
    sp = config["inversion"]["symbol_point"]
    ba = config["band_average"]
    rows = {"k": [], "tau": [], "direction_index": [], "estimate": [], "stderr": []}
    table = []
    for k in ba["k_values"]:
        tg = band_t_grid(float(k), int(ba["t_nodes"]))
        A = ensemble_far_field(ens.values, grid, tg, dirs, pot, workers=nw)
        for eta in config["band"]["eta_grid"]:
            B = ensemble_far_field(ens.values, grid, tg + eta * k, dirs, pot, workers=nw)
            stat, se = band_statistic_from_farfields(A, B, tg, float(k), m, 3)
            w = band_calibration_weight(tg, float(k), float(eta), m, 3, sp)
            rows["k"] += [k] * len(dirs)
            rows["tau"] += [eta * k] * len(dirs)
            rows["direction_index"] += list(range(len(dirs)))
            rows["estimate"] += list(stat)
            rows["stderr"] += list(se)
            for p in range(len(dirs)):
                table.append({"k": float(k), "eta": float(eta), "direction_index": p,
                              "statistic": float(stat[p]), "stderr": float(se[p]),
                              "h_hat_sq": float(stat[p] / w), "h_hat_sq_stderr": float(se[p] / w)})
    ds = CorrelationDataset(**rows, directions=dirs, N=ens.N, mode="band_averaged")
    state["band_stats"] = ds
    paths = ds.save(root / "band_statistics") + [ds.to_csv(root / "band_statistics.csv")]
    paths.append(_json(root / "band_calibrated.json", table))
    return paths


def _stage_reconstruct(config, root, state, nw):
    if config["mode"] == "band_averaged":
        return []
    ks, dirs, X = state["band"]
    grid = config.grid
    b, inv = config["band"], config["inversion"]
    h_true = config.strength()
    m = float(config["source"]["m"])
    ratio = b["K0"] / b["K"]
    results = []
    paths = []
    for K in config.stability_K_values():
        est = StrengthReconstructor(m, grid.dim, K * ratio, K, inv["cutoff_radius"],
                                    inv["symbol_point"])
        est.fit(X, ks, dirs)
        res = est.reconstruct(grid, h_true)
        tag = f"reconstruction_K{K:g}"
        paths += res.save(root / tag)
        results.append((K, K * ratio, res))
    state["reconstructions"] = results
    return paths


def _stage_stability(config, root, state, nw):
    grid = config.grid
    m = float(config["source"]["m"])
    st = config["stability"]
    mode = "band_averaged" if config["mode"] == "band_averaged" else "point"
    params = StabilityParams(m, grid.dim, float(st["s"]), float(config["inversion"]["t"]),
                             st["delta_override"], mode)
    b = config["band"]
    summary = {"beta0": params.beta0, "beta": params.beta, "delta": params.delta,
               "mode": mode, "rows": []}
    if mode == "band_averaged":
        ds = state["band_stats"]
        eps = data_discrepancy(ds, (0.0, np.inf), "eps2", m, grid.dim, eta_grid=b["eta_grid"])
        summary["eps2"] = eps
        return [_json(root / "stability_summary.json", summary)]
    Ks, epss, rhss, errs = [], [], [], []
    ds = state["correlations"]
    for K, K0, res in state["reconstructions"]:
        try:
            eps = data_discrepancy(ds, (K0, K), "eps1", m, grid.dim, eta_grid=b["eta_grid"])
        except BihscatError:
            eps = float("nan")
        rhs = stability_rhs(K, eps, params.beta0, params.beta) if 0 < eps < np.exp(-1) \
            else float("nan")
        Ks.append(K)
        epss.append(eps)
        rhss.append(rhs)
        errs.append(res.rel_L2_error)
        summary["rows"].append({"K": K, "K0": K0, "eps1": eps, "rhs": rhs,
                                "rel_L2_error": res.rel_L2_error,
                                "cutoff_radius": res.cutoff_radius})
    p1 = write_stability_csv(root / "stability.csv", Ks, epss, rhss, errs)
    return [p1, _json(root / "stability_summary.json", summary)]


def _stage_slopes(config, root, state, nw):
    from .forward import CutoffWindow, loglog_slope, predicted_resolvent_slope, \
        resolvent_norm_probe
    from .grid import nudft
    ens = state["ensemble"]
    grid = config.grid
    pot = config.potential()
    dirs = config.directions()[0]
    m = float(config["source"]["m"])
    sl = config["slopes"]
    b = config["band"]
    ks = np.asarray(sl["k_values"] or np.geomspace(b["K"] / 10, b["K"], 6), dtype=float)
    rows = []
    xis = (ks[:, None, None] * dirs[None]).reshape(-1, grid.dim)
    power = np.mean(np.abs(nudft(ens.values, grid, xis)) ** 2, axis=0)
    power = power.reshape(len(ks), len(dirs)).mean(axis=1)
    rows.append({"quantity": "symbol_decay", "fitted_slope": loglog_slope(ks, power),
                 "predicted_slope": -m})
    if not pot.is_zero:
        u1 = ensemble_far_field(ens.values, grid, ks, dirs, pot, kind="term:1", workers=nw)
        p1 = np.mean(np.abs(u1) ** 2, axis=(0, 2))
        rows.append({"quantity": "born_term1_power", "fitted_slope": loglog_slope(ks, p1),
                     "predicted_slope": -10.0})
    if sl["resolvent"]:
        R = grid.half_width
        window = CutoffWindow.smooth_box(grid, 0.4 * R, 0.5 * R)
        rep = resolvent_norm_probe(ks, window)
        rows.append({"quantity": "resolvent_norm", "fitted_slope": rep.fitted_slope,
                     "predicted_slope": predicted_resolvent_slope(grid.dim)})
    return [_json(root / "slopes.json", rows)]


# ---------------------------------------------------------------------------
# Report


def emit_report(run_dir) -> dict:
    """Collect run artifacts into ``report/`` (CSV tables + ``summary.json``).

    Missing artifacts are listed under ``warnings`` rather than raised.
    """
    run_dir = Path(run_dir)
    out = run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    warnings, tables = [], {}
    summary = {"run_dir": str(run_dir), "warnings": warnings, "tables": tables}
    man_path = run_dir / "manifest.json"
    if man_path.exists():
        man = json.loads(man_path.read_text())
        summary["complete"] = man.get("complete", False)
        summary["config_hash"] = man.get("config_hash")
        summary["failed_stage"] = man.get("failed_stage")
    else:
        warnings.append("manifest.json missing")
    stab = run_dir / "stability_summary.json"
    if stab.exists():
        s = json.loads(stab.read_text())
        rows = s.get("rows", [])
        path = out / "error_vs_K.csv"
        with path.open("w") as fh:
            fh.write("K,K0,eps1,rhs,rel_L2_error,cutoff_radius\n")
            for r in rows:
                fh.write(",".join(repr(float(r[c])) if r[c] is not None else "nan"
                                  for c in ("K", "K0", "eps1", "rhs", "rel_L2_error",
                                            "cutoff_radius")) + "\n")
        tables["error_vs_K"] = path.name
        summary["stability"] = {k: v for k, v in s.items() if k != "rows"}
    else:
        warnings.append("stability_summary.json missing")
    corr = run_dir / "correlations.csv"
    if corr.exists():
        data = np.loadtxt(corr, delimiter=",", skiprows=1, ndmin=2)
        path = out / "discrepancy_by_k.csv"
        with path.open("w") as fh:
            fh.write("k,max_abs_corr\n")
            for k in np.unique(data[:, 0]):
                sel = data[:, 0] == k
                fh.write(f"{k!r},{np.max(np.hypot(data[sel, 3], data[sel, 4]))!r}\n")
        tables["discrepancy_by_k"] = path.name
    else:
        warnings.append("correlations.csv missing")
    slopes = run_dir / "slopes.json"
    if slopes.exists():
        s = json.loads(slopes.read_text())
        path = out / "slopes.csv"
        with path.open("w") as fh:
            fh.write("quantity,fitted_slope,predicted_slope\n")
            for row in s:
                fh.write(f"{row['quantity']},{row['fitted_slope']!r},{row['predicted_slope']!r}\n")
        tables["slopes"] = path.name
    _json(out / "summary.json", summary)
    return summary
