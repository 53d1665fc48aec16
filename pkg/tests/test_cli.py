import csv
import json
from pathlib import Path

import numpy as np
import pytest

from src.sgd_lab import EXIT_CONFIG_ERROR, EXIT_NUMERICAL_FAILURE, EXIT_OK, main
from src.sgd_config import ConfigError, validate_config
from src.sgd_experiments import ExperimentRunner, jsonable

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("SGD_LAB_OUT_DIR", raising=False)
    monkeypatch.delenv("SGD_LAB_WORKERS", raising=False)


def write_config(tmp_path, text, name="experiment.conf"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def run(config_path, out_dir, *extra):
    return main(["run", str(config_path), "--out-dir", str(out_dir), *extra])


def read_summary(out_dir, kind):
    return json.loads((Path(out_dir) / f"{kind}_summary.json").read_text(encoding="utf-8"))


SIMULATE = """
[game]
builtin=matching_pennies

[noise]
model=uncorrelated
sigma=0.2

[sim]
step=0.1
horizon=2
seed=3

[experiment]
kind=simulate
n_runs=2
x0=[[0.7, 0.3], [0.4, 0.6]]
"""


# =============================================================================
# list
# =============================================================================

def test_list(capsys):
    assert main(["list"]) == EXIT_OK
    assert "prisoners_dilemma" in capsys.readouterr().out


def test_list_json(capsys):
    assert main(["list", "--json"]) == EXIT_OK
    catalog = json.loads(capsys.readouterr().out)
    assert {record["name"] for record in catalog} >= {"matching_pennies", "harmonic_2x2x2", "zero_game"}


def test_no_command():
    assert main([]) == EXIT_CONFIG_ERROR


# =============================================================================
# run
# =============================================================================

def test_club_faces(tmp_path):
    assert run(CONFIG_DIR / "prisoners_dilemma_club.conf", tmp_path) == EXIT_OK
    results = read_summary(tmp_path, "club")["results"]
    assert results["count"] == 4
    assert results["faces"][0]["face"] == "{D}×{D}"
    assert results["faces"][0]["margin"] == pytest.approx(1.0)
    assert results["faces"][-1]["proper"] is False


def test_harmonic_check(tmp_path):
    assert run(CONFIG_DIR / "harmonic_check.conf", tmp_path) == EXIT_OK
    results = read_summary(tmp_path, "harmonic_check")["results"]
    assert results["verdict"] == "harmonic"
    assert results["max_residual"] <= 1e-9


def test_harmonic_check_rejects_prisoners_dilemma(tmp_path):
    config = write_config(tmp_path, "[game]\nbuiltin=prisoners_dilemma\n[sim]\nstep=0.1\nhorizon=0\n[experiment]\nkind=harmonic_check\n")
    assert run(config, tmp_path / "out") == EXIT_OK
    results = read_summary(tmp_path / "out", "harmonic_check")["results"]
    assert results["verdict"] == "not_harmonic"
    assert results["residuals"][1][1] == pytest.approx(2.0)


def test_simulate_writes_trajectories(tmp_path):
    config = write_config(tmp_path, SIMULATE)
    assert run(config, tmp_path / "out") == EXIT_OK
    out = tmp_path / "out"
    summary = read_summary(out, "simulate")
    assert summary["seed"] == 3
    assert len(summary["results"]["runs"]) == 2

    lines = (out / "trajectory_run0001.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == f"# seed=3 config_hash={summary['config_hash']}"
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == ["t", "player", "action", "x", "y"]
    assert len(rows) == 1 + 21 * 4
    sidecar = json.loads((out / "trajectory_run0001.json").read_text(encoding="utf-8"))
    assert sidecar["run_id"] == 1 and sidecar["config_hash"] == summary["config_hash"]


def test_identical_configs_give_identical_bytes(tmp_path):
    config = write_config(tmp_path, SIMULATE)
    assert run(config, tmp_path / "a") == EXIT_OK
    assert run(config, tmp_path / "b", "--workers", "2") == EXIT_OK
    for name in ("simulate_summary.json", "trajectory_run0000.csv", "trajectory_run0001.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override_changes_results(tmp_path):
    config = write_config(tmp_path, SIMULATE)
    assert run(config, tmp_path / "a") == EXIT_OK
    assert run(config, tmp_path / "b", "--seed", "4") == EXIT_OK
    assert read_summary(tmp_path / "b", "simulate")["seed"] == 4
    first = (tmp_path / "a" / "trajectory_run0000.csv").read_text(encoding="utf-8").splitlines()[2:]
    second = (tmp_path / "b" / "trajectory_run0000.csv").read_text(encoding="utf-8").splitlines()[2:]
    assert first[:4] == second[:4]
    assert first != second


def test_hitting_time_with_bound(tmp_path):
    config = write_config(tmp_path, """
[game]
builtin=matching_pennies
[noise]
model=uncorrelated
sigma=0.5
[sim]
step=0.02
horizon=20
[experiment]
kind=hitting_time
epsilon=0.1
n_runs=6
""")
    assert run(config, tmp_path / "out") == EXIT_OK
    results = read_summary(tmp_path / "out", "hitting_time")["results"]
    assert results["stats"]["n_runs"] == 6
    assert results["bound"]["lam"] > 0
    lines = (tmp_path / "out" / "hitting_times.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("# seed=0 config_hash=")
    assert lines[1] == "hit,hit_time"
    assert len(lines) == 2 + results["stats"]["n_hit"]


def test_hitting_time_without_noise_skips_bound(tmp_path):
    config = write_config(tmp_path, """
[game]
builtin=prisoners_dilemma
[sim]
step=0.01
horizon=20
[experiment]
kind=hitting_time
n_runs=1
x0=[[0.6, 0.4], [0.6, 0.4]]
""")
    assert run(config, tmp_path / "out") == EXIT_OK
    results = read_summary(tmp_path / "out", "hitting_time")["results"]
    assert results["stats"]["n_hit"] == 1
    assert results["bound"] is None
    assert "sigma_min" in results["bound_skipped"]


def test_stability(tmp_path):
    config = write_config(tmp_path, """
[game]
builtin=prisoners_dilemma
[noise]
model=uncorrelated
sigma=0.1
[sim]
step=0.01
horizon=2
sample_stride=10
[experiment]
kind=stability
face=[[1], ["D"]]
n_runs=8
""")
    assert run(config, tmp_path / "out") == EXIT_OK
    results = read_summary(tmp_path / "out", "stability")["results"]
    assert results["club_margin"] == pytest.approx(1.0)
    assert results["stats"]["level"] == pytest.approx(0.01 * 3.6888794541139363)
    lines = (tmp_path / "out" / "stability_runs.csv").read_text(encoding="utf-8").splitlines()
    assert lines[1] == "run_id,min_energy,final_distance"
    assert len(lines) == 10


def test_stability_full_face_needs_level(tmp_path):
    config = write_config(tmp_path, """
[game]
builtin=prisoners_dilemma
[noise]
model=uncorrelated
sigma=0.1
[sim]
step=0.01
horizon=1
[experiment]
kind=stability
face=[["C", "D"], ["C", "D"]]
n_runs=2
""")
    assert run(config, tmp_path / "out") == EXIT_CONFIG_ERROR


def test_energy_experiment(tmp_path):
    config = write_config(tmp_path, """
[game]
builtin=matching_pennies
[noise]
model=uncorrelated
sigma=0.2
[sim]
step=0.02
horizon=20
sample_stride=10
seed=1
[experiment]
kind=energy
level=0.1
n_runs=6
growth_profile=true
generator_probes=2
sublevel_samples=2000
""")
    assert run(config, tmp_path / "out") == EXIT_OK
    results = read_summary(tmp_path / "out", "energy")["results"]
    assert results["stats"]["initial_energy"] == pytest.approx(0.0, abs=1e-12)
    assert len(results["generator"]) == 2
    assert (tmp_path / "out" / "energy_profile.csv").exists()


@pytest.mark.parametrize("text", [
    # no harmonic weights
    "[game]\nbuiltin=prisoners_dilemma\n[noise]\nmodel=uncorrelated\nsigma=0.2\n"
    "[sim]\nstep=0.1\nhorizon=1\n[experiment]\nkind=energy\nn_runs=2\n",
    # no noise
    "[game]\nbuiltin=matching_pennies\n[sim]\nstep=0.1\nhorizon=1\n[experiment]\nkind=energy\nn_runs=2\n",
    # unknown key
    "[game]\nbuiltin=matching_pennies\n[sim]\nstep=0.1\nhorizon=1\nstepsize=2\n[experiment]\nkind=club\n",
    # weights of the wrong shape
    "[game]\nbuiltin=matching_pennies\nweights=[[1, 1, 1], [1, 1]]\n[sim]\nstep=0.1\nhorizon=1\n[experiment]\nkind=harmonic_check\n",
])
def test_config_errors_exit_2(tmp_path, text):
    config = write_config(tmp_path, text)
    assert run(config, tmp_path / "out") == EXIT_CONFIG_ERROR


def test_invalid_config_writes_nothing(tmp_path):
    config = write_config(tmp_path, "[game]\nbuiltin=matching_pennies\n[sim]\nstep=-1\nhorizon=1\n[experiment]\nkind=club\n")
    assert run(config, tmp_path / "out") == EXIT_CONFIG_ERROR
    assert not (tmp_path / "out").exists()


def test_runs_override_on_club_is_rejected(tmp_path):
    assert run(CONFIG_DIR / "prisoners_dilemma_club.conf", tmp_path, "--runs", "5") == EXIT_CONFIG_ERROR


def test_srd_compare(tmp_path):
    config = write_config(tmp_path, json.dumps({
        "game": {"builtin": "zero_game"},
        "noise": {"model": "uncorrelated", "sigma": [0.2, 0.1]},
        "sim": {"step": 0.05, "horizon": 5},
        "experiment": {"kind": "srd_compare", "n_runs": 10},
    }), name="srd.json")
    assert run(config, tmp_path / "out") == EXIT_OK
    results = read_summary(tmp_path / "out", "srd_compare")["results"]
    assert results["pure_noise"] is True
    assert results["variants"]["AS"]["prediction"]["drift"][0] == pytest.approx([0.015])
    assert "prediction" not in results["variants"]["PI"]
    assert len(results["variants"]["EW"]["absorbed_fraction"]) == 4


def test_numerical_failure_exit_3(tmp_path):
    config = write_config(tmp_path, json.dumps({
        "game": {"payoffs": [[[3e307, 0.0], [5e307, 1e307]], [[3e307, 5e307], [0.0, 1e307]]]},
        "sim": {"step": 10.0, "horizon": 100.0},
        "experiment": {"kind": "simulate", "integrator": "deterministic"},
    }), name="overflow.json")
    assert run(config, tmp_path / "out") == EXIT_NUMERICAL_FAILURE


# =============================================================================
# Runner internals
# =============================================================================

def test_runner_faces_from_labels_and_indices():
    config = validate_config({
        "game": {"builtin": "prisoners_dilemma"},
        "sim": {"step": 0.1, "horizon": 1.0},
        "experiment": {"kind": "club"},
    })
    runner = ExperimentRunner(config)
    assert runner._face([["D"], [0, 1]]).supports == ((1,), (0, 1))
    with pytest.raises(ConfigError):
        runner._face([["Z"], ["D"]])
    with pytest.raises(ConfigError):
        runner._face([[2], ["D"]])


def test_jsonable():
    assert jsonable({"a": np.float64(float("inf")), "b": np.arange(2), "c": (np.bool_(True),)}) == {
        "a": "inf", "b": [0, 1], "c": [True],
    }
