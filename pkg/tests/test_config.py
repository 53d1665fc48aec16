import json
from pathlib import Path

import numpy as np
import pytest

from src.sgd_config import (
    DEFAULT_OUT_DIR,
    ConfigError,
    apply_overrides,
    load_config,
    parse_config_text,
    parse_value,
    read_config_file,
    validate_config,
)

from src.sgd_builtins import game_from_dict, get_builtin
from src.sgd_experiments import ExperimentRunner
from src.sgd_game_core import Game

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

BASE = {
    "game": {"builtin": "matching_pennies"},
    "noise": {"model": "uncorrelated", "sigma": 0.2},
    "sim": {"step": 0.1, "horizon": 1.0},
    "experiment": {"kind": "hitting_time"},
}


def with_section(section, **values):
    raw = json.loads(json.dumps(BASE))
    raw.setdefault(section, {}).update(values)
    return raw


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("SGD_LAB_OUT_DIR", raising=False)
    monkeypatch.delenv("SGD_LAB_WORKERS", raising=False)


# =============================================================================
# Parsing
# =============================================================================

@pytest.mark.parametrize("text, expected", [
    ("true", True),
    ("False", False),
    ("none", None),
    ("0.25", 0.25),
    ("12", 12),
    ("[[0.5, 0.5], [1, 0]]", [[0.5, 0.5], [1, 0]]),
    ('{"a": 1}', {"a": 1}),
    ("entropic", "entropic"),
    ("tsallis:q=0.5", "tsallis:q=0.5"),
])
def test_parse_value(text, expected):
    assert parse_value(text) == expected


def test_parse_config_text():
    sections = parse_config_text("# comment\n[game]\nbuiltin=prisoners_dilemma\n\n[sim]\nstep = 0.01\nhorizon=5\n")
    assert sections == {"game": {"builtin": "prisoners_dilemma"}, "sim": {"step": 0.01, "horizon": 5}}


@pytest.mark.parametrize("text", [
    "[game]\nbuiltin=a\n[game]\nbuiltin=b\n",
    "[sim]\nstep=1\nstep=2\n",
    "[sim]\nstep\n",
    "step=1\n[sim]\n",
])
def test_parse_config_text_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_read_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "missing.conf")
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError):
        read_config_file(bad)


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*")), ids=lambda p: p.name)
def test_shipped_configs_validate(path):
    config = load_config(path)
    assert config.kind in path.name or config.kind.split("_")[0] in path.name


# =============================================================================
# Validation
# =============================================================================

def test_defaults():
    config = validate_config({k: v for k, v in BASE.items() if k != "noise"})
    assert config.sections["noise"] == {"model": "zero"}
    assert config.sections["kernel"] == {"spec": "entropic"}
    assert config.params["epsilon"] == 0.1 and config.params["n_runs"] == 100
    assert config.seed == 0
    assert str(config.output_dir) == str(Path(DEFAULT_OUT_DIR))
    assert config.workers == 1


def test_environment_defaults(monkeypatch, tmp_path):
    monkeypatch.setenv("SGD_LAB_OUT_DIR", str(tmp_path))
    monkeypatch.setenv("SGD_LAB_WORKERS", "4")
    config = validate_config(BASE)
    assert config.output_dir == tmp_path
    assert config.workers == 4
    monkeypatch.setenv("SGD_LAB_WORKERS", "many")
    with pytest.raises(ConfigError):
        validate_config(BASE)


@pytest.mark.parametrize("raw", [
    with_section("plot", style="dark"),
    with_section("game", payoffs=[[[1, 0], [0, 1]], [[1, 0], [0, 1]]]),
    with_section("game", colour="red"),
    {**BASE, "game": {"builtin": "zero_sum"}},
    {**BASE, "game": {"builtin": "unknown_game"}},
    with_section("game", params={"size": 3}),
    with_section("kernel", spec="quadratic"),
    {**BASE, "noise": {"model": "uncorrelated"}},
    {**BASE, "noise": {"model": "zero", "sigma": 0.1}},
    {**BASE, "noise": {"model": "pink"}},
    with_section("sim", step=0.0),
    with_section("sim", step=2.0),
    with_section("sim", sample_stride=0),
    with_section("sim", seed=-3),
    with_section("sim", scheme="heun"),
    {**BASE, "experiment": {"kind": "bifurcation"}},
    {**BASE, "experiment": {"kind": "stability"}},
    {**BASE, "experiment": {"kind": "simulate", "integrator": "srd"}},
    {**BASE, "experiment": {"kind": "simulate", "variant": "EW"}},
    with_section("experiment", epsilon=0.0),
    with_section("experiment", n_runs=0),
    with_section("experiment", bound="yes"),
    with_section("experiment", verbose=True),
    {k: v for k, v in BASE.items() if k != "sim"},
])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        validate_config(raw)


def test_kernel_specs_are_canonical():
    config = validate_config(with_section("kernel", spec=["tsallis", "tsallis:q=0.50"]))
    assert config.sections["kernel"]["spec"] == ["tsallis:q=0.5", "tsallis:q=0.5"]


# =============================================================================
# Game files with flat payoffs
# =============================================================================

FLAT_MATCHING_PENNIES = """
[game]
players = 2
actions = [2, 2]
payoffs = [[1, -1, -1, 1], [-1, 1, 1, -1]]

[sim]
step = 0.1
horizon = 1

[experiment]
kind = simulate
"""


def test_flat_matching_pennies_matches_builtin():
    config = validate_config(parse_config_text(FLAT_MATCHING_PENNIES))
    game = ExperimentRunner(config).game
    builtin, _ = get_builtin("matching_pennies")
    assert np.array_equal(game.payoffs, builtin.payoffs)
    assert game_from_dict({"players": 2, "actions": [2, 2], "payoffs": [[1, -1, -1, 1], [-1, 1, 1, -1]]}) == Game(
        builtin.payoffs, name="custom"
    )


def test_flat_payoffs_last_player_index_fastest():
    raw = {**BASE, "game": {"actions": [2, 3], "payoffs": [list(range(6)), [0] * 6]}}
    payoffs = validate_config(raw).sections["game"]["payoffs"]
    assert payoffs[0] == [[0, 1, 2], [3, 4, 5]]


@pytest.mark.parametrize("game", [
    {"actions": [2, 2], "payoffs": [[1, -1, -1], [-1, 1, 1, -1]]},
    {"actions": [2, 2], "payoffs": [[1, -1, -1, 1]]},
    {"players": 3, "actions": [2, 2], "payoffs": [[1, -1, -1, 1], [-1, 1, 1, -1]]},
    {"players": 2, "payoffs": [[[1, -1], [-1, 1]], [[-1, 1], [1, -1]]]},
    {"actions": [2, 0], "payoffs": [[], []]},
    {"actions": 4, "payoffs": [[1, -1, -1, 1], [-1, 1, 1, -1]]},
    {"builtin": "matching_pennies", "actions": [2, 2]},
])
def test_flat_payoffs_rejected(game):
    with pytest.raises(ConfigError):
        validate_config({**BASE, "game": game})


# =============================================================================
# Hash and overrides
# =============================================================================

def test_config_hash_ignores_output_directory():
    first = validate_config(with_section("output", directory="a"))
    second = validate_config(with_section("output", directory="b"))
    assert first.config_hash() == second.config_hash()
    reseeded = apply_overrides(first, seed=7)
    assert reseeded.seed == 7
    assert reseeded.config_hash() != first.config_hash()


def test_overrides():
    config = apply_overrides(validate_config(BASE), runs=12, workers=3, out_dir="elsewhere")
    assert config.params["n_runs"] == 12
    assert config.workers == 3
    assert config.output_dir == Path("elsewhere")

    club = validate_config({**BASE, "experiment": {"kind": "club"}})
    with pytest.raises(ConfigError):
        apply_overrides(club, runs=5)
    with pytest.raises(ConfigError):
        apply_overrides(club, workers=0)
