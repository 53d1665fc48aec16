#!/usr/bin/env python3
"""
SGD Lab Config Module

Experiment files: key=value lines grouped under [section] headers, with
JSON literals for lists and nested values, or the same sections as a JSON
document. Everything is validated before any computation starts; unknown
sections and keys are errors.
"""

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

# Handle both relative and absolute imports
try:
    from .sgd_dynamics import ConfigError, SRD_VARIANTS, SimConfig
    from .sgd_regularization import get_kernel
    from .sgd_builtins import BUILTIN_GAMES, payoffs_from_flat
except ImportError:
    from sgd_dynamics import ConfigError, SRD_VARIANTS, SimConfig
    from sgd_regularization import get_kernel
    from sgd_builtins import BUILTIN_GAMES, payoffs_from_flat


DEFAULT_OUT_DIR = "./sgd_output"
DEFAULT_WORKERS = 1
MAX_WORKERS = 64

SUPPORTED_SECTIONS = ("game", "kernel", "noise", "sim", "experiment", "output")
SUPPORTED_NOISE_MODELS = ("uncorrelated", "full", "zero")
SUPPORTED_INTEGRATORS = ("sftrl_scores", "sftrl_strategies", "deterministic", "srd")

SECTION_KEYS = {
    "game": {"builtin", "params", "players", "actions", "payoffs", "labels", "name", "weights"},
    "kernel": {"spec"},
    "noise": {"model", "sigma", "matrix"},
    "sim": {"step", "horizon", "sample_stride", "seed", "scheme"},
    "output": {"directory", "write_trajectory"},
}

# experiment kind -> parameter defaults (None = optional, REQUIRED = must be given)
REQUIRED = object()
EXPERIMENT_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "simulate": {"integrator": "sftrl_scores", "variant": None, "x0": None, "n_runs": 1},
    "hitting_time": {"player": 0, "epsilon": 0.1, "n_runs": 100, "x0": None, "bound": True},
    "stability": {"face": REQUIRED, "eps_prob": 0.05, "level": None, "n_runs": 200},
    "energy": {
        "level": 2.0, "n_runs": 100, "x0": None, "mode": "escape",
        "growth_profile": False, "generator_probes": 0, "sublevel_samples": 100_000,
    },
    "club": {"cap": 10 ** 6, "tol": 1e-9},
    "harmonic_check": {"tol": 1e-9},
    "srd_compare": {"variants": list(SRD_VARIANTS), "n_runs": 200, "x0": None, "threshold": 0.01, "benchmarks": None},
}
SUPPORTED_EXPERIMENTS = tuple(EXPERIMENT_DEFAULTS)


@dataclass
class ExperimentConfig:
    """Validated experiment configuration; `sections` holds the canonical values."""
    sections: Dict[str, Dict[str, Any]]
    source: Optional[str] = None
    workers: int = DEFAULT_WORKERS

    @property
    def kind(self) -> str:
        return self.sections["experiment"]["kind"]

    @property
    def params(self) -> Dict[str, Any]:
        return self.sections["experiment"]

    @property
    def seed(self) -> int:
        return self.sections["sim"]["seed"]

    @property
    def output_dir(self) -> Path:
        return Path(self.sections["output"]["directory"])

    def sim_config(self) -> SimConfig:
        sim = self.sections["sim"]
        return SimConfig(
            step=sim["step"],
            horizon=sim["horizon"],
            sample_stride=sim["sample_stride"],
            seed=sim["seed"],
            scheme=sim["scheme"],
        )

    def hashed_sections(self) -> Dict[str, Dict[str, Any]]:
        """Sections that determine the results; the output directory is excluded."""
        hashed = copy.deepcopy(self.sections)
        hashed["output"].pop("directory", None)
        return hashed

    def config_hash(self) -> str:
        canonical = json.dumps(self.hashed_sections(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# =============================================================================
# Parsing
# =============================================================================

def parse_value(value: str) -> Any:
    """true/false, JSON literals (numbers, lists, objects, quoted strings), else the raw string."""
    value = value.strip()
    if value.lower() in ["true", "false"]:
        return value.lower() == "true"
    if value.lower() in ["none", "null"]:
        return None
    try:
        return json.loads(value)
    except ValueError:
        return value


def parse_config_text(text: str) -> Dict[str, Dict[str, Any]]:
    """
    Parse [section] headers and key=value lines.

    Raises:
        ConfigError: On a line outside any section, a malformed line or a repeated key
    """
    sections: Dict[str, Dict[str, Any]] = {}
    current = None
    for number, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()

        # Skip comments and empty lines
        if not line or line.startswith("#"):
            continue

        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current in sections:
                raise ConfigError(f"Line {number}: section [{current}] appears twice")
            sections[current] = {}
            continue

        if "=" not in line:
            raise ConfigError(f"Line {number}: expected key=value, got '{line}'")
        if current is None:
            raise ConfigError(f"Line {number}: key=value before any [section] header")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in sections[current]:
            raise ConfigError(f"Line {number}: key '{key}' repeated in [{current}]")
        sections[current][key] = parse_value(value)
    return sections


def read_config_file(path: Union[str, Path]) -> Dict[str, Dict[str, Any]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}")
    if path.suffix.lower() == ".json":
        try:
            raw = json.loads(text)
        except ValueError as e:
            raise ConfigError(f"Invalid JSON in {path}: {e}")
        if not isinstance(raw, dict) or not all(isinstance(v, dict) for v in raw.values()):
            raise ConfigError(f"JSON config must map section names to objects: {path}")
        return raw
    return parse_config_text(text)


# =============================================================================
# Validation
# =============================================================================

def validate_int_range(value, min_val, max_val, name) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"Invalid {name}: must be integer, got {type(value).__name__}")
    if not (min_val <= value <= max_val):
        raise ConfigError(f"Invalid {name}: {value} (must be {min_val}-{max_val})")
    return value


def validate_float_range(value, min_val, max_val, name, open_low: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"Invalid {name}: must be number, got {type(value).__name__}")
    below = value <= min_val if open_low else value < min_val
    if below or value > max_val:
        bracket = "(" if open_low else "["
        raise ConfigError(f"Invalid {name}: {value} (must be in {bracket}{min_val}, {max_val}])")
    return float(value)


def validate_bool(value, name) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"Invalid {name}: must be true/false, got {value}")
    return value


def _check_keys(section: str, values: Dict[str, Any], allowed):
    unknown = set(values) - set(allowed)
    if unknown:
        raise ConfigError(f"Unknown keys in [{section}]: {sorted(unknown)}. Allowed keys: {sorted(allowed)}")


def _flat_payoffs(game: Dict[str, Any]) -> list:
    """Nested payoffs from `actions` plus per-player arrays in row-major profile order."""
    actions = game["actions"]
    if not isinstance(actions, list) or len(actions) < 2:
        raise ConfigError(f"Invalid actions: must be a list [A_1, ..., A_N] with N >= 2, got {actions}")
    for count in actions:
        validate_int_range(count, 1, 10 ** 6, "actions entry")
    players = validate_int_range(game.get("players", len(actions)), 2, 10 ** 6, "players")
    if players != len(actions):
        raise ConfigError(f"players = {players} but actions lists {len(actions)} entries")
    try:
        return payoffs_from_flat(game["payoffs"], actions).tolist()
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e))


def _validate_game(game: Dict[str, Any]) -> Dict[str, Any]:
    _check_keys("game", game, SECTION_KEYS["game"])
    has_builtin = "builtin" in game
    has_payoffs = "payoffs" in game
    if has_builtin == has_payoffs:
        raise ConfigError("[game] needs exactly one of 'builtin' or 'payoffs'")
    out: Dict[str, Any] = {}
    if has_builtin:
        name = game["builtin"]
        if name not in BUILTIN_GAMES:
            raise ConfigError(
                f"Unsupported builtin game: {name}. Supported games: {list(BUILTIN_GAMES.keys())}"
            )
        params = game.get("params") or {}
        if not isinstance(params, dict):
            raise ConfigError(f"Invalid game params: must be an object, got {params}")
        unknown = set(params) - set(BUILTIN_GAMES[name].params)
        if unknown:
            raise ConfigError(f"Unknown parameters for builtin '{name}': {sorted(unknown)}")
        if name == "zero_sum" and "matrix" not in params:
            raise ConfigError("Builtin 'zero_sum' needs params.matrix")
        for key in ("labels", "players", "actions"):
            if key in game:
                raise ConfigError(f"'{key}' only applies to inline payoffs")
        out.update(builtin=name, params=params)
    else:
        if "params" in game:
            raise ConfigError("'params' only applies to builtin games")
        if not isinstance(game["payoffs"], list):
            raise ConfigError("Invalid payoffs: must be a nested list of shape (N, A_1, ..., A_N)")
        payoffs = game["payoffs"]
        if "actions" in game:
            payoffs = _flat_payoffs(game)
        elif "players" in game:
            raise ConfigError("'players' needs 'actions' = [A_1, ..., A_N]")
        out.update(payoffs=payoffs, labels=game.get("labels"), name=game.get("name", "custom"))
    if "name" in game and has_builtin:
        raise ConfigError("'name' only applies to inline payoffs")
    if game.get("weights") is not None:
        if not isinstance(game["weights"], list):
            raise ConfigError("Invalid weights: must be a list of per-player lists")
        out["weights"] = game["weights"]
    return out


def _validate_kernel(kernel: Dict[str, Any]) -> Dict[str, Any]:
    _check_keys("kernel", kernel, SECTION_KEYS["kernel"])
    spec = kernel.get("spec", "entropic")
    specs = spec if isinstance(spec, list) else [spec]
    try:
        canonical = [get_kernel(item).spec for item in specs]
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e))
    return {"spec": canonical if isinstance(spec, list) else canonical[0]}


def _validate_noise(noise: Dict[str, Any]) -> Dict[str, Any]:
    _check_keys("noise", noise, SECTION_KEYS["noise"])
    model = noise.get("model", "uncorrelated")
    if model not in SUPPORTED_NOISE_MODELS:
        raise ConfigError(f"Unsupported noise model: {model}. Supported models: {list(SUPPORTED_NOISE_MODELS)}")
    if model == "uncorrelated":
        if "sigma" not in noise or "matrix" in noise:
            raise ConfigError("Uncorrelated noise needs 'sigma' (scalar or list) and no 'matrix'")
        return {"model": model, "sigma": noise["sigma"]}
    if model == "full":
        if "matrix" not in noise or "sigma" in noise:
            raise ConfigError("Full noise needs 'matrix' and no 'sigma'")
        return {"model": model, "matrix": noise["matrix"]}
    if set(noise) - {"model"}:
        raise ConfigError("Zero noise takes no parameters")
    return {"model": model}


def _validate_sim(sim: Dict[str, Any]) -> Dict[str, Any]:
    _check_keys("sim", sim, SECTION_KEYS["sim"])
    for key in ("step", "horizon"):
        if key not in sim:
            raise ConfigError(f"[sim] is missing '{key}'")
    out = {
        "step": validate_float_range(sim["step"], 0.0, 1e6, "step", open_low=True),
        "horizon": validate_float_range(sim["horizon"], 0.0, 1e9, "horizon"),
        "sample_stride": validate_int_range(sim.get("sample_stride", 1), 1, 10 ** 9, "sample_stride"),
        "seed": validate_int_range(sim.get("seed", 0), 0, 2 ** 63 - 1, "seed"),
        "scheme": sim.get("scheme"),
    }
    if out["scheme"] is not None and out["scheme"] not in SimConfig.SUPPORTED_SCHEMES:
        raise ConfigError(
            f"Unsupported scheme: {out['scheme']}. Supported schemes: {list(SimConfig.SUPPORTED_SCHEMES)}"
        )
    SimConfig(**out)
    return out


def _validate_experiment(experiment: Dict[str, Any]) -> Dict[str, Any]:
    kind = experiment.get("kind")
    if kind not in EXPERIMENT_DEFAULTS:
        raise ConfigError(f"Unsupported experiment: {kind}. Supported experiments: {list(SUPPORTED_EXPERIMENTS)}")
    defaults = EXPERIMENT_DEFAULTS[kind]
    _check_keys("experiment", experiment, set(defaults) | {"kind"})

    out: Dict[str, Any] = {"kind": kind}
    for key, default in defaults.items():
        if key in experiment:
            out[key] = experiment[key]
        elif default is REQUIRED:
            raise ConfigError(f"Experiment '{kind}' needs '{key}'")
        else:
            out[key] = copy.deepcopy(default)

    if "n_runs" in out:
        validate_int_range(out["n_runs"], 1, 10 ** 7, "n_runs")
    if out.get("x0") is not None and not isinstance(out["x0"], list):
        raise ConfigError("Invalid x0: must be a list of per-player mixed strategies")

    if kind == "simulate":
        if out["integrator"] not in SUPPORTED_INTEGRATORS:
            raise ConfigError(
                f"Unsupported integrator: {out['integrator']}. Supported integrators: {list(SUPPORTED_INTEGRATORS)}"
            )
        if out["integrator"] == "srd" and out["variant"] not in SRD_VARIANTS:
            raise ConfigError(f"Integrator 'srd' needs variant in {list(SRD_VARIANTS)}, got {out['variant']}")
        if out["integrator"] != "srd" and out["variant"] is not None:
            raise ConfigError("'variant' only applies to the srd integrator")
    elif kind == "hitting_time":
        validate_int_range(out["player"], 0, 10 ** 6, "player")
        validate_float_range(out["epsilon"], 0.0, 1.0, "epsilon", open_low=True)
        validate_bool(out["bound"], "bound")
    elif kind == "stability":
        if not isinstance(out["face"], list) or not all(isinstance(s, list) and s for s in out["face"]):
            raise ConfigError("Invalid face: must be a list of non-empty per-player action lists")
        validate_float_range(out["eps_prob"], 0.0, 1.0, "eps_prob", open_low=True)
        if out["level"] is not None:
            validate_float_range(out["level"], 0.0, 1e9, "level", open_low=True)
    elif kind == "energy":
        validate_float_range(out["level"], 0.0, 1e9, "level", open_low=True)
        if out["mode"] not in ("escape", "return"):
            raise ConfigError(f"Unsupported energy mode: {out['mode']}. Supported modes: ['escape', 'return']")
        validate_bool(out["growth_profile"], "growth_profile")
        validate_int_range(out["generator_probes"], 0, 1000, "generator_probes")
        validate_int_range(out["sublevel_samples"], 1, 10 ** 8, "sublevel_samples")
    elif kind == "club":
        validate_int_range(out["cap"], 1, 10 ** 9, "cap")
        validate_float_range(out["tol"], 0.0, 1.0, "tol")
    elif kind == "harmonic_check":
        validate_float_range(out["tol"], 0.0, 1.0, "tol")
    elif kind == "srd_compare":
        variants = out["variants"]
        if not isinstance(variants, list) or not variants or any(v not in SRD_VARIANTS for v in variants):
            raise ConfigError(f"Invalid variants: {variants} (each must be one of {list(SRD_VARIANTS)})")
        validate_float_range(out["threshold"], 0.0, 1.0, "threshold", open_low=True)
        if out["benchmarks"] is not None and not isinstance(out["benchmarks"], list):
            raise ConfigError("Invalid benchmarks: must be a list of action indices")
    return out


def _validate_output(output: Dict[str, Any]) -> Dict[str, Any]:
    _check_keys("output", output, SECTION_KEYS["output"])
    directory = output.get("directory") or os.getenv("SGD_LAB_OUT_DIR", DEFAULT_OUT_DIR)
    if not isinstance(directory, str):
        raise ConfigError(f"Invalid output directory: {directory}")
    return {
        "directory": directory,
        "write_trajectory": validate_bool(output.get("write_trajectory", True), "write_trajectory"),
    }


def validate_config(raw: Dict[str, Dict[str, Any]], source: Optional[str] = None) -> ExperimentConfig:
    """
    Schema-validate parsed sections into an ExperimentConfig.

    Raises:
        ConfigError: On unknown sections or keys, missing values or out-of-range values
    """
    unknown = set(raw) - set(SUPPORTED_SECTIONS)
    if unknown:
        raise ConfigError(f"Unknown sections: {sorted(unknown)}. Supported sections: {list(SUPPORTED_SECTIONS)}")
    for required in ("game", "sim", "experiment"):
        if required not in raw:
            raise ConfigError(f"Config is missing the [{required}] section")
    sections = {
        "game": _validate_game(raw["game"]),
        "kernel": _validate_kernel(raw.get("kernel", {})),
        "noise": _validate_noise(raw.get("noise", {"model": "zero"})),
        "sim": _validate_sim(raw["sim"]),
        "experiment": _validate_experiment(raw["experiment"]),
        "output": _validate_output(raw.get("output", {})),
    }
    workers = os.getenv("SGD_LAB_WORKERS")
    try:
        workers = DEFAULT_WORKERS if workers is None else int(workers)
    except ValueError:
        raise ConfigError(f"Invalid SGD_LAB_WORKERS: {workers}")
    return ExperimentConfig(sections=sections, source=source, workers=validate_int_range(workers, 1, MAX_WORKERS, "workers"))


def apply_overrides(
    config: ExperimentConfig,
    seed: Optional[int] = None,
    out_dir: Optional[str] = None,
    runs: Optional[int] = None,
    workers: Optional[int] = None
) -> ExperimentConfig:
    """Command-line overrides; --runs only applies to experiments with an n_runs parameter."""
    sections = copy.deepcopy(config.sections)
    if seed is not None:
        sections["sim"]["seed"] = validate_int_range(seed, 0, 2 ** 63 - 1, "seed")
    if out_dir is not None:
        sections["output"]["directory"] = str(out_dir)
    if runs is not None:
        if "n_runs" not in sections["experiment"]:
            raise ConfigError(f"Experiment '{config.kind}' takes no run count")
        sections["experiment"]["n_runs"] = validate_int_range(runs, 1, 10 ** 7, "runs")
    if workers is not None:
        workers = validate_int_range(workers, 1, MAX_WORKERS, "workers")
    return ExperimentConfig(sections=sections, source=config.source, workers=workers or config.workers)


def load_config(path: Union[str, Path], **overrides) -> ExperimentConfig:
    """Read, validate and override an experiment file."""
    config = validate_config(read_config_file(path), source=str(path))
    return apply_overrides(config, **overrides)
