import json

import pytest
import yaml

from bihscat.cli import EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO, EXIT_OK, main
from bihscat.exceptions import ConfigError
from bihscat.experiment import ExperimentConfig, RunManifest, emit_report, run_experiment

SMOKE = {
    "dim": 2,
    "grid": {"n": 64, "half_width": 4.0},
    "source": {"m": 3.0, "strength_profile": {"name": "bump", "radius": 1.5},
               "master_seed": 1, "N": 8},
    "band": {"K0": 2.0, "K": 4.0, "num_k": 2},
    "directions": {"count": 8},
    "inversion": {"cutoff_radius": 2.0},
}


def write_config(tmp_path, over=None, name="c.yaml"):
    cfg = json.loads(json.dumps(SMOKE))
    for key, val in (over or {}).items():
        if isinstance(val, dict):
            cfg.setdefault(key, {}).update(val)
        else:
            cfg[key] = val
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return p


def run(tmp_path, out, workers=1, over=None, extra=()):
    cfg = write_config(tmp_path, over)
    return main(["--workers", str(workers), "experiment", "--config", str(cfg),
                 "--output-dir", str(tmp_path / out), *extra])


def test_smoke_experiment(tmp_path, capsys):
    assert run(tmp_path, "a") == EXIT_OK
    man = RunManifest.read(tmp_path / "a")
    assert man.complete and man.failed_stage is None and len(man.files) >= 6
    for rel, digest in man.files.items():
        assert (tmp_path / "a" / rel).exists()
    assert (tmp_path / "a" / "report" / "summary.json").exists()
    out = json.loads(capsys.readouterr().out)
    assert out["complete"] is True


def test_rerun_and_workers_reproducible(tmp_path):
    assert run(tmp_path, "a") == EXIT_OK
    assert run(tmp_path, "b") == EXIT_OK
    assert run(tmp_path, "c", workers=3) == EXIT_OK
    files = [RunManifest.read(tmp_path / d).files for d in "abc"]
    assert files[0] == files[1] == files[2]


def test_override(tmp_path):
    assert run(tmp_path, "a", extra=["--set", "source.N=4"]) == EXIT_OK
    saved = yaml.safe_load((tmp_path / "a" / "config.yaml").read_text())
    assert saved["source"]["N"] == 4


def test_exit_codes(tmp_path):
    # t must stay below delta/d
    assert run(tmp_path, "x", over={"inversion": {"cutoff_radius": 2.0, "t": 0.5}}) == EXIT_CONFIG
    assert main(["experiment", "--config", str(tmp_path / "missing.yaml")]) == EXIT_IO
    assert run(tmp_path, "y", over={"bogus": 1}) == EXIT_CONFIG
    strong = {"name": "bump", "radius": 1.0, "amplitude": 5e4}
    assert run(tmp_path, "z", over={"potential": strong}) == EXIT_DIVERGENCE
    man = RunManifest.read(tmp_path / "z")
    assert not man.complete and man.failed_stage == "farfield"


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"band": {"K0": 5.0, "K": 4.0}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"grid": {"n": 64, "half_width": 4.0},
                                    "band": {"K0": 10.0, "K": 40.0}})
    a = ExperimentConfig.from_dict(SMOKE)
    b = ExperimentConfig.from_dict(json.loads(json.dumps(SMOKE)))
    assert a.hash == b.hash
    assert a.hash != ExperimentConfig.from_dict({**SMOKE, "mode": "point",
                                                 "directions": {"count": 6}}).hash


def test_report_on_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty")]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["warnings"]
    assert main(["report", str(tmp_path / "nowhere")]) == EXIT_IO


def test_report_tables(tmp_path):
    cfg = ExperimentConfig.from_dict({**SMOKE, "stability": {"K_values": [3.0, 4.0]}})
    run_experiment(cfg, tmp_path / "r")
    summary = emit_report(tmp_path / "r")
    lines = (tmp_path / "r" / "report" / "error_vs_K.csv").read_text().splitlines()
    assert len(lines) == 3
    assert "error_vs_K" in json.dumps(summary)


def test_subcommands(tmp_path, capsys):
    g = ["--dim", "2", "--n", "64", "--half-width", "4"]
    assert main(["sample-field", *g, "--out", str(tmp_path / "f"), "--radius", "1.5"]) == 0
    assert main(["sample-field", *g, "--out", str(tmp_path / "ens"), "--N", "4",
                 "--radius", "1.5"]) == 0
    assert main(["forward", "--source", str(tmp_path / "f"), "--k", "3",
                 "--out", str(tmp_path / "u")]) == 0
    assert main(["farfield", "--ensemble", str(tmp_path / "ens"), "--k", "2.5", "3", "3.5",
                 "4", "--directions", "8", "--out", str(tmp_path / "ff")]) == 0
    assert main(["invert", "--farfield", str(tmp_path / "ff"), "--grid-from", str(tmp_path / "f"),
                 "--K0", "2", "--K", "4", "--cutoff", "1.5", "--out", str(tmp_path / "rec")]) == 0
    assert main(["resolvent-probe", "--n", "64", "--half-width", "1.2", "--k-min", "2",
                 "--k-max", "20", "--num-k", "3", "--iterations", "10"]) == 0
    assert main(["continuation-check", "--out", str(tmp_path / "cc.json")]) == 0
    cc = json.loads((tmp_path / "cc.json").read_text())
    assert cc["constant"]["holds"] and cc["decaying"]["holds"]
    assert main(["forward", "--source", str(tmp_path / "nope"), "--k", "3"]) == EXIT_IO
    capsys.readouterr()


def test_forward_divergence_exit(tmp_path):
    g = ["--dim", "2", "--n", "64", "--half-width", "4"]
    assert main(["sample-field", *g, "--out", str(tmp_path / "f")]) == 0
    from bihscat.gmig import bump_field
    from bihscat.grid import GridSpec, write_field
    write_field(tmp_path / "V", bump_field(GridSpec(2, 64, 4.0), 1.0, 5e4))
    assert main(["forward", "--source", str(tmp_path / "f"), "--potential", str(tmp_path / "V"),
                 "--k", "3"]) == EXIT_DIVERGENCE
