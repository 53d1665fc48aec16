#!/usr/bin/env python3
"""
SGD Lab Experiments Module

Turns a validated ExperimentConfig into games, regularizers and noise,
dispatches the requested experiment and writes CSV/JSON artifacts. Every
artifact carries the seed and the config hash; nothing time-dependent is
written, so identical configs give identical bytes.
"""

import csv
import json
import math
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

# Handle both relative and absolute imports
try:
    from .sgd_game_core import (
        Face, Game, HarmonicStructure, classify_profile, club_margin, enumerate_club_faces,
        flatten_profile, harmonic_residuals, harmonic_structure, unit_weights, uniform_profile,
    )
    from .sgd_regularization import RegularizerSet
    from .sgd_noise import NoiseModel, full_noise, sampling_generator, uncorrelated_noise, zero_noise
    from .sgd_dynamics import (
        BatchResult, ConfigError, write_trajectory_csv, write_trajectory_json,
        simulate_deterministic_ftrl_batch, simulate_sftrl_scores_batch,
        simulate_sftrl_strategies_batch, simulate_srd_batch,
    )
    from .sgd_analysis import (
        MonteCarloRunner, energy_escape_stats, energy_growth_profile, estimate_hitting_time,
        generator_estimate, lambda_bound, merge_batches, pure_noise_drift, raise_on_failure,
        recurrence_probe, stability_experiment, stability_level, AssumptionError,
    )
    from .sgd_builtins import get_builtin
    from .sgd_config import ExperimentConfig
except ImportError:
    from sgd_game_core import (
        Face, Game, HarmonicStructure, classify_profile, club_margin, enumerate_club_faces,
        flatten_profile, harmonic_residuals, harmonic_structure, unit_weights, uniform_profile,
    )
    from sgd_regularization import RegularizerSet
    from sgd_noise import NoiseModel, full_noise, sampling_generator, uncorrelated_noise, zero_noise
    from sgd_dynamics import (
        BatchResult, ConfigError, write_trajectory_csv, write_trajectory_json,
        simulate_deterministic_ftrl_batch, simulate_sftrl_scores_batch,
        simulate_sftrl_strategies_batch, simulate_srd_batch,
    )
    from sgd_analysis import (
        MonteCarloRunner, energy_escape_stats, energy_growth_profile, estimate_hitting_time,
        generator_estimate, lambda_bound, merge_batches, pure_noise_drift, raise_on_failure,
        recurrence_probe, stability_experiment, stability_level, AssumptionError,
    )
    from sgd_builtins import get_builtin
    from sgd_config import ExperimentConfig


# sampling purpose for generator probe states
_PURPOSE_PROBES = 3


def jsonable(value: Any) -> Any:
    """Convert numpy values for json.dump; non-finite floats become the strings inf/-inf/nan."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isfinite(value):
            return value
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


class ExperimentRunner:
    """Build the objects an experiment needs, run it and write its artifacts."""

    def __init__(
        self,
        config: ExperimentConfig,
        verbose: bool = False,
        progress_callback: Optional[Callable[[int, int], None]] = None
    ):
        """
        Initialize the runner and build game, regularizers and noise.

        Raises:
            ConfigError: If the config describes objects that cannot be built
        """
        self.config = config
        self.verbose = verbose
        self._trajectories = []
        self.monte_carlo = MonteCarloRunner(
            max_workers=config.workers,
            verbose=verbose,
            progress_callback=progress_callback,
        )
        try:
            self.game, self.structure = self._build_game()
            self.regularizers = self._build_regularizers()
            self.noise = self._build_noise()
            self.sim = config.sim_config()
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e))

    def _log(self, message: str):
        """Log message if verbose mode enabled."""
        if self.verbose:
            print(f"[Runner] {message}")

    # -------------------------------------------------------------------------
    # Builders
    # -------------------------------------------------------------------------

    def _build_game(self) -> Tuple[Game, Optional[HarmonicStructure]]:
        section = self.config.sections["game"]
        if "builtin" in section:
            game, structure = get_builtin(section["builtin"], section["params"])
        else:
            labels = section.get("labels")
            game = Game(
                np.asarray(section["payoffs"], dtype=float),
                name=section["name"],
                action_labels=None if labels is None else tuple(tuple(player) for player in labels),
            )
            structure = None
        if section.get("weights") is not None:
            structure = harmonic_structure(section["weights"])
            if structure.action_counts != game.action_counts:
                raise ConfigError(
                    f"Harmonic weights have action counts {structure.action_counts}, game has {game.action_counts}"
                )
        return game, structure

    def _build_regularizers(self) -> RegularizerSet:
        spec = self.config.sections["kernel"]["spec"]
        if isinstance(spec, list):
            regularizers = RegularizerSet.from_specs(spec)
            regularizers.check_players(self.game.num_players)
            return regularizers
        return RegularizerSet.uniform(spec, self.game.num_players)

    def _build_noise(self) -> NoiseModel:
        section = self.config.sections["noise"]
        counts = self.game.action_counts
        if section["model"] == "uncorrelated":
            return uncorrelated_noise(counts, section["sigma"])
        if section["model"] == "full":
            return full_noise(counts, section["matrix"])
        return zero_noise(counts)

    def _initial_profile(self, x0, default=None):
        if x0 is not None:
            return [np.asarray(block, dtype=float) for block in x0]
        return default if default is not None else uniform_profile(self.game)

    def _face(self, raw) -> Face:
        """Face from per-player lists of action labels or indices."""
        supports = []
        for i, actions in enumerate(raw):
            labels = self.game.labels_for(i) if i < self.game.num_players else ()
            support = []
            for action in actions:
                if isinstance(action, str):
                    if action not in labels:
                        raise ConfigError(f"Unknown action '{action}' for player {i}; labels are {list(labels)}")
                    support.append(labels.index(action))
                else:
                    support.append(int(action))
            supports.append(tuple(support))
        try:
            return Face(tuple(supports)).validate(self.game)
        except ValueError as e:
            raise ConfigError(str(e))

    def _require_structure(self) -> HarmonicStructure:
        if self.structure is None:
            raise ConfigError(
                f"Experiment '{self.config.kind}' needs harmonic weights; game '{self.game.name}' has none "
                f"(set [game] weights)"
            )
        return self.structure

    # -------------------------------------------------------------------------
    # Experiments
    # -------------------------------------------------------------------------

    def run(self) -> Dict[str, Any]:
        """
        Run the configured experiment and write its artifacts.

        Returns:
            Dict with the summary record and the list of written files
        """
        handlers = {
            "simulate": self.run_simulate,
            "hitting_time": self.run_hitting_time,
            "stability": self.run_stability,
            "energy": self.run_energy,
            "club": self.run_club,
            "harmonic_check": self.run_harmonic_check,
            "srd_compare": self.run_srd_compare,
        }
        kind = self.config.kind
        self._log(f"Running '{kind}' on {self.game.name} (seed {self.config.seed})")
        results, tables = handlers[kind]()

        out_dir = self.config.output_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        written = [self._write_summary(out_dir, results)]
        for name, (header, rows) in tables.items():
            written.append(self._write_table(out_dir / name, header, rows))
        written.extend(self._write_extra(out_dir))
        self._log(f"Wrote {len(written)} file(s) to {out_dir}")
        return {"summary": self._summary_record(results), "files": [str(path) for path in written]}

    def _batches(self, simulate: Callable[[Tuple[int, ...]], BatchResult], n_runs: int, label: str) -> BatchResult:
        result = merge_batches(self.monte_carlo.map(simulate, n_runs, label))
        raise_on_failure(result)
        return result

    def run_simulate(self):
        params = self.config.params
        x0 = self._initial_profile(params["x0"])
        integrator = params["integrator"]
        record = self.config.sections["output"]["write_trajectory"]

        def simulate(run_ids):
            if integrator == "deterministic":
                return simulate_deterministic_ftrl_batch(self.game, self.regularizers, x0, self.sim, len(run_ids), None, True, run_ids)
            if integrator == "sftrl_strategies":
                return simulate_sftrl_strategies_batch(
                    self.game, self.regularizers, self.noise, x0, self.sim, len(run_ids), None, True, run_ids
                )
            if integrator == "srd":
                return simulate_srd_batch(self.game, self.noise, x0, self.sim, params["variant"], len(run_ids), None, True, run_ids)
            return simulate_sftrl_scores_batch(self.game, self.regularizers, self.noise, x0, self.sim, len(run_ids), None, True, run_ids)

        result = self._batches(simulate, params["n_runs"], "simulation runs")
        self._trajectories = [result.trajectory(i) for i in range(result.n_runs)] if record else []
        runs = []
        for i in range(result.n_runs):
            final = result.final_strategies[i]
            blocks = np.split(final, np.cumsum(self.game.action_counts)[:-1])
            runs.append({
                "run_id": result.run_ids[i],
                "terminal_reason": result.terminal_reasons[i],
                "final_time": result.final_times[i],
                "final_strategies": [block.tolist() for block in blocks],
                "classification": classify_profile(self.game, blocks, tol=1e-2).value,
            })
        return {"integrator": result.integrator, "n_runs": result.n_runs, "runs": runs}, {}

    def run_hitting_time(self):
        params = self.config.params
        x0 = self._initial_profile(params["x0"])
        player, epsilon = params["player"], params["epsilon"]
        try:
            stats = estimate_hitting_time(
                self.game, self.regularizers, self.noise, x0, self.sim,
                player, epsilon, params["n_runs"], self.monte_carlo,
            )
        except ValueError as e:
            raise ConfigError(str(e))
        results = {"player": player, "epsilon": epsilon, "stats": stats.to_dict()}
        if params["bound"]:
            try:
                constants = lambda_bound(self.game, player, self.regularizers[player], self.noise, epsilon)
                results["bound"] = constants.to_dict()
                results["within_bound"] = (
                    None if stats.mean_hit_time is None else stats.mean_hit_time <= constants.bound_value
                )
            except (AssumptionError, ValueError) as e:
                results["bound"] = None
                results["bound_skipped"] = str(e)
        rows = [[index, repr(t)] for index, t in enumerate(stats.hit_times)]
        return results, {"hitting_times.csv": (["hit", "hit_time"], rows)}

    def run_stability(self):
        params = self.config.params
        face = self._face(params["face"])
        margin = club_margin(self.game, face)
        n_out = len(face.out_actions(self.game))
        level = params["level"]
        if level is None:
            if not (0 < margin < math.inf):
                raise ConfigError(
                    f"Face {face.describe(self.game)} has club margin {margin:g}; give [experiment] level explicitly"
                )
            level = stability_level(self.noise, margin, n_out, params["eps_prob"])
        self._log(f"Face {face.describe(self.game)}: margin {margin:g}, energy level {level:.4g}")
        stats = stability_experiment(
            self.game, self.regularizers, self.noise, face, level,
            params["eps_prob"], params["n_runs"], self.sim, self.monte_carlo,
        )
        rows = [
            [run, repr(energy), repr(distance)]
            for run, (energy, distance) in enumerate(zip(stats.min_energies, stats.final_distances))
        ]
        results = {"club_margin": margin, "stats": stats.to_dict()}
        return results, {"stability_runs.csv": (["run_id", "min_energy", "final_distance"], rows)}

    def run_energy(self):
        params = self.config.params
        structure = self._require_structure()
        x0 = self._initial_profile(params["x0"], default=list(structure.center))
        level = params["level"]
        tables = {}
        if params["mode"] == "escape":
            stats = energy_escape_stats(
                self.game, structure, self.regularizers, self.noise, x0, level,
                params["n_runs"], self.sim, self.monte_carlo, params["sublevel_samples"],
            )
            results = {"mode": "escape", "stats": stats.to_dict()}
        else:
            stats = recurrence_probe(
                self.game, structure, self.regularizers, self.noise, x0, level, "return",
                params["n_runs"], self.sim, runner=self.monte_carlo,
            )
            results = {"mode": "return", "stats": stats.to_dict()}
        if params["growth_profile"]:
            profile = energy_growth_profile(
                self.game, structure, self.regularizers, self.noise, x0,
                params["n_runs"], self.sim, self.monte_carlo,
            )
            results["growth_profile"] = profile.to_dict()
            tables["energy_profile.csv"] = (
                ["t", "mean", "std", "stderr"],
                [[repr(t), repr(m), repr(s), repr(e)] for t, m, s, e in zip(profile.times, profile.mean, profile.std, profile.stderr)],
            )
        if params["generator_probes"]:
            probes = self._probe_scores(params["generator_probes"])
            estimates = generator_estimate(
                self.game, structure, self.regularizers, self.noise, probes, seed=self.config.seed
            )
            results["generator"] = [estimate.to_dict() for estimate in estimates]
        return results, tables

    def _probe_scores(self, count: int) -> np.ndarray:
        generator = sampling_generator(self.config.seed, 0, _PURPOSE_PROBES)
        blocks = [generator.dirichlet(np.ones(a), size=count) for a in self.game.action_counts]
        strategies = np.clip(np.concatenate(blocks, axis=1), 1e-6, None)
        strategies = np.concatenate(
            [block / block.sum(axis=1, keepdims=True) for block in np.split(strategies, np.cumsum(self.game.action_counts)[:-1], axis=1)],
            axis=1,
        )
        return self.regularizers.gradient_flat(strategies, self.game.offsets)

    def run_club(self):
        params = self.config.params
        faces = enumerate_club_faces(self.game, params["cap"], params["tol"])
        records = [
            {
                "face": face.describe(self.game),
                "supports": [list(support) for support in face.supports],
                "proper": face.is_proper(self.game),
                "margin": club_margin(self.game, face),
            }
            for face in faces
        ]
        return {"faces": records, "count": len(records)}, {}

    def run_harmonic_check(self):
        weights = list(self.structure.weights) if self.structure is not None else unit_weights(self.game)
        residuals = harmonic_residuals(self.game, weights)
        worst = float(np.max(np.abs(residuals)))
        verdict = "harmonic" if worst <= self.config.params["tol"] else "not_harmonic"
        results = {
            "weights": [np.asarray(w).tolist() for w in weights],
            "max_residual": worst,
            "verdict": verdict,
            "residuals": residuals.tolist(),
        }
        return results, {}

    def run_srd_compare(self):
        params = self.config.params
        if not self.noise.is_diagonal:
            raise ConfigError("srd_compare needs uncorrelated noise")
        x0 = self._initial_profile(params["x0"])
        benchmarks = params["benchmarks"] or [0] * self.game.num_players
        threshold = params["threshold"]
        pure_noise = not np.any(self.game.payoffs)
        start = flatten_profile(x0)
        horizon = self.sim.n_steps * self.sim.step
        variants = {}
        for variant in params["variants"]:
            def simulate(run_ids, variant=variant):
                return simulate_srd_batch(self.game, self.noise, x0, self.sim, variant, len(run_ids), None, False, run_ids)

            result = self._batches(simulate, params["n_runs"], f"srd {variant} runs")
            final = result.final_strategies
            record = {
                "absorbed_fraction": np.mean(final < threshold, axis=0).tolist(),
                "z": self._z_statistics(start, final, benchmarks, horizon),
            }
            if pure_noise and variant in ("EW", "AS"):
                record["prediction"] = pure_noise_drift(self.noise, variant, benchmarks).to_dict()
            variants[variant] = record
        return {"threshold": threshold, "benchmarks": benchmarks, "pure_noise": pure_noise, "variants": variants}, {}

    def _z_statistics(self, start: np.ndarray, final: np.ndarray, benchmarks, horizon: float) -> List[Dict[str, Any]]:
        """Per player: mean and variance rate of z_ia(T) - z_ia(0), z_ia = log(x_ia / x_ib)."""
        stats = []
        with np.errstate(divide="ignore"):
            for (lo, hi), b in zip(self.game.offsets, benchmarks):
                z0 = np.log(start[lo:hi]) - np.log(start[lo + b])
                z = np.log(final[:, lo:hi]) - np.log(final[:, [lo + b]])
                change = np.delete(z - z0, b, axis=1)
                finite = np.all(np.isfinite(change), axis=1)
                change = change[finite]
                stats.append({
                    "runs": int(finite.sum()),
                    "mean_rate": (change.mean(axis=0) / horizon).tolist() if change.size and horizon > 0 else None,
                    "variance_rate": (change.var(axis=0, ddof=1) / horizon).tolist() if change.shape[0] > 1 and horizon > 0 else None,
                })
        return stats

    # -------------------------------------------------------------------------
    # Artifacts
    # -------------------------------------------------------------------------

    def _summary_record(self, results: Dict[str, Any]) -> Dict[str, Any]:
        return jsonable({
            "experiment": self.config.kind,
            "game": self.game.name,
            "seed": self.config.seed,
            "config_hash": self.config.config_hash(),
            "config": self.config.hashed_sections(),
            "noise": self.noise.describe(),
            "kernels": self.regularizers.specs,
            "results": results,
        })

    def _provenance(self) -> str:
        return f"seed={self.config.seed} config_hash={self.config.config_hash()}"

    def _write_summary(self, out_dir: Path, results: Dict[str, Any]) -> Path:
        path = out_dir / f"{self.config.kind}_summary.json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self._summary_record(results), f, indent=2, sort_keys=True)
        return path

    def _write_table(self, path: Path, header: List[str], rows: List[List[Any]]) -> Path:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"# {self._provenance()}\n")
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
        return path

    def _write_extra(self, out_dir: Path) -> List[Path]:
        """Trajectory CSV/JSON files of a simulate experiment."""
        written = []
        extra = {"seed": self.config.seed, "config_hash": self.config.config_hash()}
        for trajectory in self._trajectories:
            stem = f"trajectory_run{trajectory.run_id:04d}"
            written.append(write_trajectory_csv(trajectory, out_dir / f"{stem}.csv", self._provenance()))
            written.append(write_trajectory_json(trajectory, out_dir / f"{stem}.json", extra))
        return written
