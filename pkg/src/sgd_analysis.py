#!/usr/bin/env python3
"""
SGD Lab Analysis Module

Monte Carlo estimators and exact bound calculators for the stochastic
dynamics: hitting times of pure-strategy neighborhoods, Lyapunov constants,
face distances and energies, club stability experiments, harmonic energy
statistics, generator estimates and recurrence probes.

Monte Carlo work fans out over run batches through MonteCarloRunner; every
run owns its noise substream, so aggregates do not depend on the schedule.
"""

import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import comb
from scipy.stats import linregress, norm

# Handle both relative and absolute imports
try:
    from .sgd_game_core import (
        Face, Game, HarmonicStructure, flatten_profile, payoff_bound,
        require_harmonic, split_profile,
    )
    from .sgd_regularization import (
        DIAGNOSTIC_FLOOR, DomainError, Kernel, RegularizerSet, diagnostic_gradient,
        mirror, rate_function, trace_jacobian_at,
    )
    from .sgd_noise import NOISE_NAMESPACE, NoiseModel, philox_generator, sampling_generator
    from .sgd_dynamics import (
        BatchResult, ConfigError, NumericalFailureError, SimConfig, Trajectory,
        simulate_deterministic_ftrl_batch, simulate_sftrl_scores_batch,
    )
except ImportError:
    from sgd_game_core import (
        Face, Game, HarmonicStructure, flatten_profile, payoff_bound,
        require_harmonic, split_profile,
    )
    from sgd_regularization import (
        DIAGNOSTIC_FLOOR, DomainError, Kernel, RegularizerSet, diagnostic_gradient,
        mirror, rate_function, trace_jacobian_at,
    )
    from sgd_noise import NOISE_NAMESPACE, NoiseModel, philox_generator, sampling_generator
    from sgd_dynamics import (
        BatchResult, ConfigError, NumericalFailureError, SimConfig, Trajectory,
        simulate_deterministic_ftrl_batch, simulate_sftrl_scores_batch,
    )


CONFIDENCE_LEVEL = 0.95
DEFAULT_SUBLEVEL_SAMPLES = 100_000
DEFAULT_GENERATOR_DRAWS = 10_000
DEFAULT_GENERATOR_STEP = 1e-4
CONVERGENCE_DISTANCE = 0.01
UNDERFLOW_THRESHOLD = 1e-300
LATTICE_POINT_LIMIT = 200_000

# sampling purposes under SAMPLING_NAMESPACE
_PURPOSE_INITIAL_POINTS = 1
_PURPOSE_SUBLEVEL = 2


class AssumptionError(ValueError):
    """A quantity was requested outside the assumptions it depends on."""


# =============================================================================
# Monte Carlo runner
# =============================================================================

class MonteCarloRunner:
    """
    Split runs into batches and simulate them on a thread pool.

    Results come back in batch order regardless of completion order.
    """

    DEFAULT_BATCH_SIZE = 50
    DEFAULT_MAX_WORKERS = 1

    def __init__(
        self,
        max_workers: int = DEFAULT_MAX_WORKERS,
        batch_size: int = DEFAULT_BATCH_SIZE,
        verbose: bool = False,
        progress_callback: Optional[Callable[[int, int], None]] = None
    ):
        """
        Initialize the runner.

        Args:
            max_workers: Number of concurrent threads
            batch_size: Runs simulated together in one vectorized batch
            verbose: If True, log batch progress
            progress_callback: Optional callback(completed, total) called after each batch
        """
        if max_workers < 1:
            raise ValueError(f"max_workers must be at least 1, got {max_workers}")
        if batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {batch_size}")
        self.max_workers = max_workers
        self.batch_size = batch_size
        self.verbose = verbose
        self.progress_callback = progress_callback

    def _log(self, message: str):
        """Log message if verbose mode enabled."""
        if self.verbose:
            print(f"[MonteCarlo] {message}")

    def batches(self, n_runs: int) -> List[Tuple[int, ...]]:
        return [
            tuple(range(start, min(start + self.batch_size, n_runs)))
            for start in range(0, n_runs, self.batch_size)
        ]

    def map(self, simulate: Callable[[Tuple[int, ...]], BatchResult], n_runs: int, label: str = "runs") -> List[BatchResult]:
        """
        Simulate run ids 0..n_runs-1 batch by batch.

        Args:
            simulate: Function taking a tuple of run ids and returning their BatchResult
            n_runs: Total number of runs
            label: Name used in log lines

        Returns:
            BatchResults ordered by run id
        """
        batches = self.batches(n_runs)
        total = len(batches)
        results: Dict[int, BatchResult] = {}
        started = time.time()
        self._log(f"Simulating {n_runs} {label} in {total} batch(es) on {self.max_workers} worker(s)")

        if self.max_workers == 1:
            for index, run_ids in enumerate(batches):
                results[index] = simulate(run_ids)
                if self.progress_callback:
                    self.progress_callback(index + 1, total)
        else:
            with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
                future_to_index = {executor.submit(simulate, run_ids): index for index, run_ids in enumerate(batches)}
                completed = 0
                for future in as_completed(future_to_index):
                    index = future_to_index[future]
                    try:
                        results[index] = future.result()
                    except Exception as e:
                        self._log(f"❌ Batch {index} failed: {e}")
                        raise
                    completed += 1
                    if self.progress_callback:
                        self.progress_callback(completed, total)

        self._log(f"Finished {label} in {time.time() - started:.1f}s")
        return [results[index] for index in range(total)]


def merge_batches(batches: Sequence[BatchResult]) -> BatchResult:
    """Concatenate batch results along the run axis; shorter recordings are padded with their frozen last sample."""
    if not batches:
        raise ValueError("Nothing to merge")
    if len(batches) == 1:
        return batches[0]
    first = batches[0]
    longest = max(batches, key=lambda b: b.times.size)

    def pad(samples: Optional[np.ndarray], size: int) -> Optional[np.ndarray]:
        if samples is None or samples.shape[0] == size:
            return samples
        tail = np.repeat(samples[-1:], size - samples.shape[0], axis=0)
        return np.concatenate([samples, tail], axis=0)

    size = longest.times.size
    strategies = None
    scores = None
    if first.strategies is not None:
        strategies = np.concatenate([pad(b.strategies, size) for b in batches], axis=1)
    if first.scores is not None:
        scores = np.concatenate([pad(b.scores, size) for b in batches], axis=1)
    return BatchResult(
        integrator=first.integrator,
        config=first.config,
        action_counts=first.action_counts,
        run_ids=tuple(r for b in batches for r in b.run_ids),
        times=longest.times,
        strategies=strategies,
        scores=scores,
        samples_recorded=np.concatenate([b.samples_recorded for b in batches]),
        terminal_reasons=[reason for b in batches for reason in b.terminal_reasons],
        stop_times=np.concatenate([b.stop_times for b in batches]),
        final_times=np.concatenate([b.final_times for b in batches]),
        final_strategies=np.concatenate([b.final_strategies for b in batches], axis=0),
        final_scores=None if first.final_scores is None else np.concatenate([b.final_scores for b in batches], axis=0),
    )


def raise_on_failure(result: BatchResult):
    """Turn runs that ended in a non-finite state into NumericalFailureError."""
    failed = [i for i, reason in enumerate(result.terminal_reasons) if reason == "numerical_failure"]
    if failed:
        run_ids = [result.run_ids[i] for i in failed]
        times = [float(result.final_times[i]) for i in failed]
        raise NumericalFailureError(
            f"{len(failed)} run(s) hit a non-finite state (first run {run_ids[0]} at t={times[0]:g})",
            run_ids, times,
        )


def _simulate_scores(
    game: Game,
    regularizers: RegularizerSet,
    noise: NoiseModel,
    x0,
    cfg: SimConfig,
    n_runs: int,
    stop=None,
    record: bool = False,
    runner: Optional[MonteCarloRunner] = None,
    label: str = "runs"
) -> BatchResult:
    """Score-space S-FTRL over n_runs; zero noise switches to the deterministic Euler flow."""
    runner = runner or MonteCarloRunner()
    deterministic = noise.is_zero

    def simulate(run_ids: Tuple[int, ...]) -> BatchResult:
        initial = x0[list(run_ids)] if isinstance(x0, np.ndarray) and x0.ndim == 2 else x0
        if deterministic:
            return simulate_deterministic_ftrl_batch(
                game, regularizers, initial, SimConfig(cfg.step, cfg.horizon, cfg.sample_stride, cfg.seed, "euler"),
                len(run_ids), stop, record, run_ids,
            )
        return simulate_sftrl_scores_batch(
            game, regularizers, noise, initial, cfg, len(run_ids), stop, record, run_ids,
        )

    result = merge_batches(runner.map(simulate, n_runs, label))
    raise_on_failure(result)
    return result


# =============================================================================
# Hitting times
# =============================================================================

@dataclass
class HittingStats:
    """Hitting-time summary; the mean and CI use hit runs only."""
    n_runs: int
    n_hit: int
    censored: int
    mean_hit_time: Optional[float]
    sample_std: Optional[float]
    ci_low: Optional[float]
    ci_high: Optional[float]
    horizon: float
    hit_times: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)


def summarize_hitting_times(stop_times: np.ndarray, horizon: float) -> HittingStats:
    """Hitting statistics from per-run stop times (NaN = censored at the horizon)."""
    stop_times = np.asarray(stop_times, dtype=float)
    hits = stop_times[~np.isnan(stop_times)]
    n_runs = int(stop_times.size)
    n_hit = int(hits.size)
    if n_hit == 0:
        return HittingStats(n_runs, 0, n_runs, None, None, None, None, float(horizon), [])
    mean = float(hits.mean())
    std = float(hits.std(ddof=1)) if n_hit > 1 else 0.0
    half_width = float(norm.ppf(0.5 + CONFIDENCE_LEVEL / 2)) * std / math.sqrt(n_hit)
    return HittingStats(
        n_runs=n_runs,
        n_hit=n_hit,
        censored=n_runs - n_hit,
        mean_hit_time=mean,
        sample_std=std,
        ci_low=mean - half_width,
        ci_high=mean + half_width,
        horizon=float(horizon),
        hit_times=[float(t) for t in hits],
    )


def pure_neighborhood_stop(game: Game, player: int, epsilon: float):
    """Stop predicate: max_a X_ia >= 1 - epsilon for the given player."""
    start, stop = game.offsets[player]

    def predicate(strategies: np.ndarray, _scores) -> np.ndarray:
        return strategies[:, start:stop].max(axis=1) >= 1.0 - epsilon

    return predicate


def _check_epsilon(game: Game, player: int, epsilon: float):
    if not 0 <= player < game.num_players:
        raise ValueError(f"Player index {player} out of range for a {game.num_players}-player game")
    count = game.action_counts[player]
    if not 0.0 < epsilon < 1.0 - 1.0 / count:
        raise ValueError(f"epsilon must lie in (0, {1.0 - 1.0 / count:g}) for {count} actions, got {epsilon}")


def pure_hitting_time(
    game: Game,
    regularizers: RegularizerSet,
    noise: NoiseModel,
    x0,
    cfg: SimConfig,
    player: int,
    epsilon: float,
    run_id: int = 0
) -> Optional[float]:
    """
    First recorded time at which the player's strategy is within epsilon of a vertex.

    Returns:
        The hitting time, or None when the run is censored at the horizon
    """
    _check_epsilon(game, player, epsilon)
    stop = pure_neighborhood_stop(game, player, epsilon)
    if noise.is_zero:
        result = simulate_deterministic_ftrl_batch(
            game, regularizers, x0, SimConfig(cfg.step, cfg.horizon, cfg.sample_stride, cfg.seed, "euler"),
            1, stop, False, (run_id,),
        )
    else:
        result = simulate_sftrl_scores_batch(game, regularizers, noise, x0, cfg, 1, stop, False, (run_id,))
    raise_on_failure(result)
    hit = result.stop_times[0]
    return None if np.isnan(hit) else float(hit)


def estimate_hitting_time(
    game: Game,
    regularizers: RegularizerSet,
    noise: NoiseModel,
    x0,
    cfg: SimConfig,
    player: int,
    epsilon: float,
    n_runs: int,
    runner: Optional[MonteCarloRunner] = None
) -> HittingStats:
    """Hitting-time statistics over n_runs seeded runs (run ids 0..n_runs-1)."""
    _check_epsilon(game, player, epsilon)
    if n_runs < 1:
        raise ValueError(f"n_runs must be at least 1, got {n_runs}")
    stop = pure_neighborhood_stop(game, player, epsilon)
    result = _simulate_scores(game, regularizers, noise, x0, cfg, n_runs, stop, False, runner, "hitting-time runs")
    return summarize_hitting_times(result.stop_times, cfg.horizon)


# =============================================================================
# Lyapunov constants
# =============================================================================

@dataclass
class LyapunovConstants:
    """Constants of the pure-neighborhood hitting-time bound for one player."""
    epsilon: float
    num_actions: int
    payoff_bound: float
    growth: float
    driver_count: int
    sigma_min_sq: float
    sigma_max_sq: float
    B: float
    H_max: float
    H_min: float
    c_eps: float
    lam: float
    log_bound: float
    bound_value: float

    def lambda_residual(self) -> float:
        """lam minus the right-hand side of its defining inequality (zero at construction)."""
        rhs = (self.B + (self.H_max / self.H_min) * (self.num_actions - 1) * self.B + 1.0) / (
            self.sigma_min_sq * self.c_eps
        )
        return self.lam - rhs

    def to_dict(self) -> Dict:
        return asdict(self)


def _simplex_grid(num_actions: int, resolution: int, generator: Optional[np.random.Generator] = None) -> np.ndarray:
    """Lattice points of the simplex with spacing 1/resolution, or Dirichlet samples when the lattice is too large."""
    size = comb(resolution + num_actions - 1, num_actions - 1, exact=True)
    if size > LATTICE_POINT_LIMIT:
        generator = generator or sampling_generator(0)
        return generator.dirichlet(np.ones(num_actions), size=LATTICE_POINT_LIMIT)
    # stars and bars: A-1 bars among resolution + A-1 slots
    slots = resolution + num_actions - 1
    points = [
        np.diff(np.concatenate([[0], bars, [slots + 1]])) - 1
        for bars in itertools.combinations(range(1, slots + 1), num_actions - 1)
    ]
    return np.asarray(points, dtype=float) / resolution


def compute_c_eps(kernel: Kernel, epsilon: float, num_actions: int, grid_resolution: int = 200) -> float:
    """
    min over x with all x_a <= 1 - epsilon, and a with x_a >= 1/A, of g_a (1 - g_a / G)^2.

    The extreme point (1 - epsilon, epsilon/(A-1), ...) is always included.
    """
    if not 0.0 < epsilon < 0.5:
        raise ValueError(f"epsilon must lie in (0, 1/2), got {epsilon}")
    if grid_resolution < 100:
        raise ValueError(f"grid_resolution must be at least 100, got {grid_resolution}")
    if num_actions < 2:
        raise ValueError(f"Need at least 2 actions, got {num_actions}")

    grid = _simplex_grid(num_actions, grid_resolution)
    extreme = np.full(num_actions, epsilon / (num_actions - 1))
    extreme[0] = 1.0 - epsilon
    points = np.vstack([grid[np.all(grid <= 1.0 - epsilon + 1e-12, axis=1)], extreme])

    g = kernel.inverse_curvature(points)
    total = g.sum(axis=1, keepdims=True)
    values = g * (1.0 - g / total) ** 2
    eligible = points >= 1.0 / num_actions - 1e-12
    return float(np.min(values[eligible]))


def kernel_growth(kernel: Kernel, resolution: int = 10_000) -> float:
    """sup |theta'''| / theta''^2 over (0, 1] on a grid."""
    grid = np.linspace(1.0 / resolution, 1.0, resolution)
    return float(np.max(kernel.growth_ratio(grid)))


def curvature_range(kernel: Kernel, num_actions: int, resolution: int = 10_000) -> Tuple[float, float]:
    """(H_max, H_min): max of g on (0, 1/A] and min of g on [1/A, 1]."""
    pivot = 1.0 / num_actions
    low = np.linspace(pivot / resolution, pivot, resolution)
    high = np.linspace(pivot, 1.0, resolution)
    return float(np.max(kernel.inverse_curvature(low))), float(np.min(kernel.inverse_curvature(high)))


def lambda_bound(
    game: Game,
    player: int,
    kernel: Kernel,
    noise: NoiseModel,
    epsilon: float,
    aux_constants: Optional[Dict] = None
) -> LyapunovConstants:
    """
    Lyapunov constants and the expected hitting-time bound for one player.

    lam = (1 / (sigma_min^2 c_eps)) [B + (H_max / H_min)(A - 1) B + 1] with
    B = 2A(M_v + m M sigma_max^2), and the bound
    (2 / lam)(e^lam + A) / (H_min e^(lam / A)), also reported in log form.

    Args:
        aux_constants: optional overrides for "payoff_bound", "growth",
            "c_eps" and "grid_resolution"

    Raises:
        AssumptionError: If the player's sigma_min^2 is zero
    """
    aux = dict(aux_constants or {})
    unknown = set(aux) - {"payoff_bound", "growth", "c_eps", "grid_resolution"}
    if unknown:
        raise ValueError(f"Unknown auxiliary constants: {sorted(unknown)}")
    if not 0 <= player < game.num_players:
        raise ValueError(f"Player index {player} out of range for a {game.num_players}-player game")

    sigma_min_sq, sigma_max_sq = noise.player_bounds[player]
    if sigma_min_sq <= 0:
        raise AssumptionError(f"Hitting-time bound needs sigma_min^2 > 0; player {player} has {sigma_min_sq:g}")

    num_actions = game.action_counts[player]
    payoff_max = float(aux.get("payoff_bound", payoff_bound(game, player)))
    growth = float(aux.get("growth", kernel_growth(kernel)))
    drivers = noise.driver_count(player)
    c_eps = float(aux.get("c_eps", compute_c_eps(kernel, epsilon, num_actions, aux.get("grid_resolution", 200))))
    h_max, h_min = curvature_range(kernel, num_actions)

    b = 2.0 * num_actions * (payoff_max + drivers * growth * sigma_max_sq)
    lam = (b + (h_max / h_min) * (num_actions - 1) * b + 1.0) / (sigma_min_sq * c_eps)
    log_bound = (
        math.log(2.0 / lam)
        + float(np.logaddexp(lam, math.log(num_actions)))
        - math.log(h_min)
        - lam / num_actions
    )
    with np.errstate(over="ignore"):
        bound_value = float(np.exp(log_bound))

    return LyapunovConstants(
        epsilon=epsilon,
        num_actions=num_actions,
        payoff_bound=payoff_max,
        growth=growth,
        driver_count=drivers,
        sigma_min_sq=sigma_min_sq,
        sigma_max_sq=sigma_max_sq,
        B=b,
        H_max=h_max,
        H_min=h_min,
        c_eps=c_eps,
        lam=lam,
        log_bound=log_bound,
        bound_value=bound_value,
    )


# =============================================================================
# Faces: distance, energies, stability
# =============================================================================

def _face_mask(face: Face, action_counts: Sequence[int]) -> np.ndarray:
    """Boolean mask over flat coordinates marking actions outside the face."""
    if len(face.supports) != len(action_counts):
        raise ValueError(f"Face has {len(face.supports)} supports for {len(action_counts)} players")
    mask = []
    for support, count in zip(face.supports, action_counts):
        if support[-1] >= count:
            raise ValueError(f"Face support {support} out of range for {count} actions")
        mask.extend(a not in support for a in range(count))
    return np.asarray(mask, dtype=bool)


def face_distance_batch(strategies: np.ndarray, face: Face, action_counts: Sequence[int]) -> np.ndarray:
    """l1 distance 2 * (mass outside the face) for flat profiles of shape (..., sum A_i)."""
    mask = _face_mask(face, action_counts)
    return 2.0 * np.asarray(strategies, dtype=float)[..., mask].sum(axis=-1)


def face_distance(profile: Sequence[Sequence[float]], face: Face) -> float:
    """l1 distance from a mixed profile to the span of a face."""
    counts = [len(np.ravel(block)) for block in profile]
    return float(face_distance_batch(flatten_profile(profile), face, counts))


def _require_bounded(regularizers: RegularizerSet):
    if not regularizers.all_bounded:
        raise AssumptionError(
            f"Face energies need bounded kernels; got {regularizers.specs}"
        )


def _floored(strategies) -> np.ndarray:
    strategies = np.asarray(strategies, dtype=float)
    if np.any(strategies < 0):
        raise DomainError("Energies are undefined for negative strategy coordinates")
    return np.maximum(strategies, DIAGNOSTIC_FLOOR)


def _interior(profile: Sequence[Sequence[float]], what: str) -> np.ndarray:
    flat = flatten_profile(profile)
    if not np.all(flat > 0):
        raise DomainError(f"{what} needs a profile in the relative interior; got a coordinate <= 0")
    return flat


def face_energy_batch(
    regularizers: RegularizerSet,
    strategies: np.ndarray,
    face: Face,
    action_counts: Sequence[int]
) -> np.ndarray:
    """
    E_ia(x) = D_i(e_ia, x_i) for every out-of-face action, shape (..., n_out).

    Uses D(e_a, x) = theta(1) + (A-1) theta(0) - sum_b theta(x_b) + sum_b theta'(x_b) x_b - theta'(x_a).
    Coordinates that underflowed to zero in a simulation are floored at 1e-300.
    """
    _require_bounded(regularizers)
    strategies = _floored(strategies)
    mask = _face_mask(face, action_counts)
    offsets = np.concatenate([[0], np.cumsum(action_counts)])
    energies = np.empty(strategies.shape[:-1] + (int(mask.sum()),))
    column = 0
    for i, kernel in enumerate(regularizers.kernels):
        x = strategies[..., offsets[i]:offsets[i + 1]]
        out = np.flatnonzero(mask[offsets[i]:offsets[i + 1]])
        if out.size == 0:
            continue
        count = action_counts[i]
        vertex_value = float(kernel.value(1.0)) + (count - 1) * kernel.value_at_zero
        slopes = kernel.d1(x)
        base = vertex_value - kernel.value(x).sum(axis=-1) + (slopes * x).sum(axis=-1)
        energies[..., column:column + out.size] = base[..., None] - slopes[..., out]
        column += out.size
    return energies


def face_energies(
    regularizers: RegularizerSet,
    profile: Sequence[Sequence[float]],
    face: Face
) -> Dict[Tuple[int, int], float]:
    """Bregman divergences from x_i to every out-of-face vertex e_ia, keyed by (player, action)."""
    counts = [len(np.ravel(block)) for block in profile]
    values = face_energy_batch(regularizers, _interior(profile, "Face energy"), face, counts)
    keys = [(i, a) for i, support in enumerate(face.supports) for a in range(counts[i]) if a not in support]
    return {key: float(value) for key, value in zip(keys, values)}


def face_energy_constants(regularizers: RegularizerSet, action_counts: Sequence[int]) -> Tuple[float, float]:
    """
    (c1, c2) for the two-sided bound between face energies and face distance.

    c1 = max_i [theta_i(1) + (A_i-1) theta_i(0) - A_i min theta_i + theta_i'(1)]
    c2 = min_i [theta_i(1) + (A_i-1) theta_i(0) - A_i theta_i(0)]
    """
    _require_bounded(regularizers)
    upper = []
    lower = []
    for kernel, count in zip(regularizers.kernels, action_counts):
        vertex_value = float(kernel.value(1.0)) + (count - 1) * kernel.value_at_zero
        upper.append(vertex_value - count * kernel.min_value + kernel.slope_at_one)
        lower.append(vertex_value - count * kernel.value_at_zero)
    return max(upper), min(lower)


def energy_sandwich(
    regularizers: RegularizerSet,
    profile: Sequence[Sequence[float]],
    face: Face
) -> Tuple[float, float, float]:
    """
    (lower, distance, upper) with lower <= face_distance <= upper.

    lower = sum over out actions of (theta_i')^{-1}(c2 - E_ia) and
    upper = 2 * sum over out actions of Phi(c1 - E_ia), both clamped to 1 per term.
    """
    counts = [len(np.ravel(block)) for block in profile]
    energies = face_energies(regularizers, profile, face)
    c1, c2 = face_energy_constants(regularizers, counts)
    lower = 0.0
    upper = 0.0
    for (i, _), energy in energies.items():
        kernel = regularizers.kernels[i]
        lower += float(min(kernel.inverse_d1(min(c2 - energy, kernel.slope_at_one)), 1.0))
        upper += 2.0 * rate_function(regularizers, c1 - energy)
    return lower, face_distance(profile, face), upper


def stability_level(noise: NoiseModel, margin: float, n_out: int, eps_prob: float) -> float:
    """Energy level M with |out| e^(-M m / sigma_max^2) <= eps_prob."""
    if margin <= 0 or not np.isfinite(margin):
        raise ValueError(f"Club margin must be positive and finite, got {margin}")
    if n_out < 1:
        raise ValueError("Stability level needs at least one out-of-face action")
    if not 0.0 < eps_prob < 1.0:
        raise ValueError(f"eps_prob must lie in (0, 1), got {eps_prob}")
    return float(noise.sigma_max_sq / margin * math.log(n_out / eps_prob))


def sample_initial_points(
    game: Game,
    regularizers: RegularizerSet,
    face: Face,
    level: float,
    n_points: int,
    seed: int = 0,
    max_batches: int = 100
) -> np.ndarray:
    """
    Interior profiles whose out-of-face energies all reach 2 * level.

    Each player mixes an in-face Dirichlet point with an out-of-face Dirichlet
    point, the outside mass drawn log-uniformly in [1e-6, 1].

    Raises:
        ConfigError: If no accepted point turns up within max_batches
    """
    face.validate(game)
    generator = sampling_generator(seed, 0, _PURPOSE_INITIAL_POINTS)
    batch = max(n_points, 256)
    accepted: List[np.ndarray] = []
    found = 0
    for _ in range(max_batches):
        blocks = []
        for support, count in zip(face.supports, game.action_counts):
            out = [a for a in range(count) if a not in support]
            block = np.zeros((batch, count))
            inside = generator.dirichlet(np.ones(len(support)), size=batch)
            if not out:
                block[:, list(support)] = inside
            else:
                mass = 10.0 ** generator.uniform(-6.0, 0.0, size=batch)
                outside = generator.dirichlet(np.ones(len(out)), size=batch)
                block[:, list(support)] = (1.0 - mass)[:, None] * inside
                block[:, out] = mass[:, None] * outside
            blocks.append(block)
        candidates = np.concatenate(blocks, axis=1)
        candidates = candidates[np.all(candidates > 0, axis=1)]
        energies = face_energy_batch(regularizers, candidates, face, game.action_counts)
        keep = candidates[np.all(energies >= 2.0 * level, axis=1)]
        accepted.append(keep)
        found += keep.shape[0]
        if found >= n_points:
            return np.concatenate(accepted, axis=0)[:n_points]
    raise ConfigError(
        f"Empty initialization set: no profile with all face energies >= {2.0 * level:g} "
        f"after {max_batches} batches (level too high for this face)"
    )


@dataclass
class StabilityStats:
    """Outcome of a club-stability experiment."""
    face: str
    level: float
    eps_prob: float
    n_runs: int
    stay_fraction: float
    converge_fraction: float
    min_energies: List[float] = field(default_factory=list)
    final_distances: List[float] = field(default_factory=list)

    @property
    def meets_target(self) -> bool:
        return self.stay_fraction >= 1.0 - self.eps_prob

    def to_dict(self) -> Dict:
        record = asdict(self)
        record["meets_target"] = self.meets_target
        return record


def stability_experiment(
    game: Game,
    regularizers: RegularizerSet,
    noise: NoiseModel,
    face: Face,
    level: float,
    eps_prob: float,
    n_runs: int,
    cfg: SimConfig,
    runner: Optional[MonteCarloRunner] = None
) -> StabilityStats:
    """
    Start runs with all out-of-face energies >= 2 * level and watch them.

    stay_fraction: share of runs whose minimum face energy over the recorded
    samples stays above level. converge_fraction: share whose l1 distance
    to the face stays below 0.01 at every sample in the second half of the run.
    """
    _require_bounded(regularizers)
    face.validate(game)
    if level <= 0:
        raise ValueError(f"Energy level must be positive, got {level}")
    starts = sample_initial_points(game, regularizers, face, level, n_runs, cfg.seed)
    result = _simulate_scores(game, regularizers, noise, starts, cfg, n_runs, None, True, runner, "stability runs")

    samples = result.strategies
    if face.out_actions(game):
        energies = face_energy_batch(regularizers, samples, face, game.action_counts)
        min_energy = energies.min(axis=(0, 2))
    else:
        min_energy = np.full(n_runs, np.inf)
    distances = face_distance_batch(result.final_strategies, face, game.action_counts)
    tail = face_distance_batch(samples[samples.shape[0] // 2:], face, game.action_counts)
    settled = np.all(tail < CONVERGENCE_DISTANCE, axis=0)
    return StabilityStats(
        face=face.describe(game),
        level=float(level),
        eps_prob=float(eps_prob),
        n_runs=n_runs,
        stay_fraction=float(np.mean(min_energy > level)),
        converge_fraction=float(np.mean(settled)),
        min_energies=[float(e) for e in min_energy],
        final_distances=[float(d) for d in distances],
    )


@dataclass
class RateFit:
    slope: float
    intercept: float
    r_value: float
    n_points: int

    def to_dict(self) -> Dict:
        return asdict(self)


def convergence_rate_probe(trajectory: Trajectory, face: Face, regularizers: RegularizerSet) -> RateFit:
    """
    Fit s(t) = max over out actions (i, a) of min_j theta_j'(x_ia(t)) against t.

    The series stops at the first sample where an out-of-face coordinate
    falls below 1e-300.
    """
    mask = _face_mask(face, trajectory.action_counts)
    if not mask.any():
        raise ValueError("The full face has no outside coordinates to track")
    outside = trajectory.strategies[:, mask]
    underflow = np.flatnonzero(np.any(outside < UNDERFLOW_THRESHOLD, axis=1))
    stop = underflow[0] if underflow.size else outside.shape[0]
    if stop < 3:
        raise ValueError(f"Need at least 3 samples before underflow, got {stop}")
    outside = outside[:stop]
    transformed = np.min([diagnostic_gradient(kernel, outside) for kernel in regularizers.kernels], axis=0)
    series = transformed.max(axis=1)
    fit = linregress(trajectory.times[:stop], series)
    return RateFit(float(fit.slope), float(fit.intercept), float(fit.rvalue), int(stop))


# =============================================================================
# Harmonic energy
# =============================================================================

def harmonic_energy_batch(structure: HarmonicStructure, regularizers: RegularizerSet, strategies: np.ndarray) -> np.ndarray:
    """E(x) = sum_i m_i D_i(p_i, x_i) for flat profiles of shape (..., sum A_i)."""
    strategies = _floored(strategies)
    offsets = np.concatenate([[0], np.cumsum(structure.action_counts)])
    total = np.zeros(strategies.shape[:-1])
    for i, kernel in enumerate(regularizers.kernels):
        x = strategies[..., offsets[i]:offsets[i + 1]]
        center = structure.center[i]
        divergence = (
            kernel.value(center).sum()
            - kernel.value(x).sum(axis=-1)
            - (kernel.d1(x) * (center - x)).sum(axis=-1)
        )
        total += structure.mass[i] * np.maximum(divergence, 0.0)
    return total


def harmonic_energy(structure: HarmonicStructure, regularizers: RegularizerSet, profile: Sequence[Sequence[float]]) -> float:
    if len(profile) != len(structure.weights):
        raise ValueError(f"Profile has {len(profile)} players, structure has {len(structure.weights)}")
    return float(harmonic_energy_batch(structure, regularizers, _interior(profile, "Harmonic energy")))


def harmonic_fenchel_batch(structure: HarmonicStructure, regularizers: RegularizerSet, scores: np.ndarray) -> np.ndarray:
    """F(y) = sum_i m_i F_i(p_i, y_i) for flat score rows."""
    scores = np.asarray(scores, dtype=float)
    total = np.zeros(scores.shape[:-1])
    blocks = split_profile(scores, structure.action_counts)
    for i, (kernel, y) in enumerate(zip(regularizers.kernels, blocks)):
        x, center = mirror(kernel, y), structure.center[i]
        coupling = (
            kernel.value(center).sum()
            - kernel.value(x).sum(axis=-1)
            - (y * (center - x)).sum(axis=-1)
        )
        total += structure.mass[i] * coupling
    return total


def weighted_trace_batch(structure: HarmonicStructure, regularizers: RegularizerSet, strategies: np.ndarray) -> np.ndarray:
    """sum_i m_i tr Jac Q_i at flat strategy rows."""
    blocks = split_profile(np.asarray(strategies, dtype=float), structure.action_counts)
    return sum(
        mass * trace_jacobian_at(kernel, block)
        for mass, kernel, block in zip(structure.mass, regularizers.kernels, blocks)
    )


def sublevel_trace_minimum(
    structure: HarmonicStructure,
    regularizers: RegularizerSet,
    level: float,
    n_samples: int = DEFAULT_SUBLEVEL_SAMPLES,
    seed: int = 0
) -> Tuple[float, int]:
    """
    Sampled minimum of sum_i m_i tr Jac Q_i over {E <= level}.

    Uniform Dirichlet products are filtered by the sublevel condition; the
    center always counts.

    Returns:
        (minimum, number of accepted samples including the center)
    """
    generator = sampling_generator(seed, 0, _PURPOSE_SUBLEVEL)
    blocks = [generator.dirichlet(np.ones(count), size=n_samples) for count in structure.action_counts]
    samples = np.vstack([structure.center_flat()[None, :], np.concatenate(blocks, axis=1)])
    samples = samples[np.all(samples > 0, axis=1)]
    inside = samples[harmonic_energy_batch(structure, regularizers, samples) <= level]
    return float(weighted_trace_batch(structure, regularizers, inside).min()), int(inside.shape[0])


def escape_time_bound(
    structure: HarmonicStructure,
    regularizers: RegularizerSet,
    noise: NoiseModel,
    x0,
    level: float,
    n_samples: int = DEFAULT_SUBLEVEL_SAMPLES,
    seed: int = 0
) -> Tuple[float, float, int]:
    """
    Bound 2 (c - E(x0)) / (sigma_min^2 eps(c)) on the expected escape time from {E <= c}.

    Returns:
        (bound, eps(c), sublevel sample count)
    """
    if noise.sigma_min_sq <= 0:
        raise AssumptionError("Escape-time bound needs sigma_min^2 > 0")
    start = harmonic_energy(structure, regularizers, x0)
    floor, accepted = sublevel_trace_minimum(structure, regularizers, level, n_samples, seed)
    bound = 2.0 * max(level - start, 0.0) / (noise.sigma_min_sq * floor)
    return float(bound), floor, accepted


@dataclass
class EnergyProfile:
    times: List[float]
    mean: List[float]
    std: List[float]
    stderr: List[float]
    n_runs: int

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class EnergyStats:
    """Escape statistics from an energy sublevel set, with the matching bound."""
    level: float
    initial_energy: float
    escape: HittingStats
    eps_c: float
    sublevel_samples: int
    bound: float
    profile: Optional[EnergyProfile] = None

    @property
    def within_bound(self) -> Optional[bool]:
        if self.escape.mean_hit_time is None:
            return None
        return self.escape.mean_hit_time <= self.bound

    def to_dict(self) -> Dict:
        record = asdict(self)
        record["within_bound"] = self.within_bound
        return record


def _harmonic_preconditions(game: Game, structure: HarmonicStructure, regularizers: RegularizerSet, noise: NoiseModel):
    require_harmonic(game, structure)
    regularizers.check_players(game.num_players)
    if noise.sigma_min_sq <= 0:
        raise AssumptionError("Energy statistics need sigma_min^2 > 0")


def energy_growth_profile(
    game: Game,
    structure: HarmonicStructure,
    regularizers: RegularizerSet,
    noise: NoiseModel,
    x0,
    n_runs: int,
    cfg: SimConfig,
    runner: Optional[MonteCarloRunner] = None
) -> EnergyProfile:
    """Mean and spread of E(X(t)) at every recorded sample, without stopping."""
    require_harmonic(game, structure)
    result = _simulate_scores(game, regularizers, noise, x0, cfg, n_runs, None, True, runner, "energy runs")
    energies = harmonic_energy_batch(structure, regularizers, result.strategies)
    std = energies.std(axis=1, ddof=1) if n_runs > 1 else np.zeros(energies.shape[0])
    return EnergyProfile(
        times=[float(t) for t in result.times],
        mean=[float(v) for v in energies.mean(axis=1)],
        std=[float(v) for v in std],
        stderr=[float(v) for v in std / math.sqrt(n_runs)],
        n_runs=n_runs,
    )


def energy_escape_stats(
    game: Game,
    structure: HarmonicStructure,
    regularizers: RegularizerSet,
    noise: NoiseModel,
    x0,
    level: float,
    n_runs: int,
    cfg: SimConfig,
    runner: Optional[MonteCarloRunner] = None,
    n_samples: int = DEFAULT_SUBLEVEL_SAMPLES
) -> EnergyStats:
    """
    Escape times tau_c = inf{t : E(X(t)) > c} and the bound 2 (c - E(x0)) / (sigma_min^2 eps(c)).

    Raises:
        NotHarmonicError: If the game is not harmonic for the structure
        AssumptionError: If sigma_min^2 is zero
    """
    _harmonic_preconditions(game, structure, regularizers, noise)

    def escaped(strategies: np.ndarray, _scores) -> np.ndarray:
        return harmonic_energy_batch(structure, regularizers, strategies) > level

    result = _simulate_scores(game, regularizers, noise, x0, cfg, n_runs, escaped, False, runner, "escape runs")
    bound, floor, accepted = escape_time_bound(structure, regularizers, noise, x0, level, n_samples, cfg.seed)
    return EnergyStats(
        level=float(level),
        initial_energy=harmonic_energy(structure, regularizers, x0),
        escape=summarize_hitting_times(result.stop_times, cfg.horizon),
        eps_c=floor,
        sublevel_samples=accepted,
        bound=bound,
    )


# =============================================================================
# Generator estimates
# =============================================================================

@dataclass
class GeneratorEstimate:
    """One-step ensemble estimate of the generator of the Fenchel energy at a probe state."""
    estimate: float
    stderr: float
    drift_term: float
    lower: float
    upper: float
    within_bounds: bool
    inconclusive: bool

    def to_dict(self) -> Dict:
        return asdict(self)


def generator_estimate(
    game: Game,
    structure: HarmonicStructure,
    regularizers: RegularizerSet,
    noise: NoiseModel,
    probe_scores: Sequence[Sequence[float]],
    n_draws: int = DEFAULT_GENERATOR_DRAWS,
    step: float = DEFAULT_GENERATOR_STEP,
    seed: int = 0
) -> List[GeneratorEstimate]:
    """
    Estimate the generator of F(y) = sum_i m_i F_i(p_i, y_i) at each probe state.

    The drift part <grad F(y), v(Q(y))> is evaluated exactly. The diffusion part
    is the ensemble mean of F(y + dM) - F(y) - <grad F(y), dM> over n_draws
    one-step martingale increments dM = Sigma xi sqrt(step), divided by step;
    subtracting the linear term is a zero-mean control variate.

    Each estimate is compared with (sigma_min^2 / 2) T and (sigma_max^2 / 2) T
    where T = sum_i m_i tr Jac Q_i(y_i); it is inconclusive when its standard
    error exceeds half of max(upper - lower, lower).
    """
    require_harmonic(game, structure)
    if n_draws < 2:
        raise ValueError(f"n_draws must be at least 2, got {n_draws}")
    offsets = game.offsets
    center = structure.center_flat()
    masses = np.concatenate([np.full(count, m) for count, m in zip(game.action_counts, structure.mass)])
    estimates = []

    for index, y in enumerate(probe_scores):
        y = np.asarray(y, dtype=float).ravel()
        if y.size != game.num_coordinates:
            raise ValueError(f"Probe state has {y.size} coordinates, expected {game.num_coordinates}")
        x = regularizers.mirror_flat(y[None, :], offsets)
        gradient = masses * (x[0] - center)
        drift_term = float(gradient @ game.field_batch(x)[0])

        generator = philox_generator(seed, NOISE_NAMESPACE, 10 ** 6 + index, 0)
        draws = generator.standard_normal((n_draws, noise.driver_dim))
        shocks = noise.increment(np.repeat(x, n_draws, axis=0), draws, step)
        base = harmonic_fenchel_batch(structure, regularizers, y[None, :])[0]
        moved = harmonic_fenchel_batch(structure, regularizers, y[None, :] + shocks)
        samples = (moved - base - shocks @ gradient) / step

        estimate = drift_term + float(samples.mean())
        stderr = float(samples.std(ddof=1) / math.sqrt(n_draws))
        trace = float(weighted_trace_batch(structure, regularizers, x)[0])
        lower = 0.5 * noise.sigma_min_sq * trace
        upper = 0.5 * noise.sigma_max_sq * trace
        slack = 3.0 * stderr + 1e-12
        estimates.append(GeneratorEstimate(
            estimate=estimate,
            stderr=stderr,
            drift_term=drift_term,
            lower=lower,
            upper=upper,
            within_bounds=bool(lower - slack <= estimate <= upper + slack),
            inconclusive=bool(stderr > 0.5 * max(upper - lower, lower)),
        ))
    return estimates


# =============================================================================
# Recurrence
# =============================================================================

@dataclass
class RecurrenceStats:
    """Escape from or return to an energy sublevel set, with a censoring curve."""
    mode: str
    level: float
    initial_energy: float
    times: HittingStats
    checkpoints: List[float]
    censored_fraction: List[float]

    def to_dict(self) -> Dict:
        return asdict(self)


RECURRENCE_MODES = ("escape", "return")


def recurrence_probe(
    game: Game,
    structure: HarmonicStructure,
    regularizers: RegularizerSet,
    noise: NoiseModel,
    x0,
    level: float,
    mode: str,
    n_runs: int,
    cfg: SimConfig,
    checkpoints: Optional[Sequence[float]] = None,
    runner: Optional[MonteCarloRunner] = None
) -> RecurrenceStats:
    """
    Time to leave {E <= level} ("escape") or to enter it ("return").

    The censoring curve reports, at each checkpoint t, the share of runs that
    have not reached the target by time t; it is nonincreasing in t.
    """
    if mode not in RECURRENCE_MODES:
        raise ValueError(f"Unknown recurrence mode: {mode}. Supported modes: {list(RECURRENCE_MODES)}")
    require_harmonic(game, structure)

    def reached(strategies: np.ndarray, _scores) -> np.ndarray:
        energy = harmonic_energy_batch(structure, regularizers, strategies)
        return energy > level if mode == "escape" else energy <= level

    result = _simulate_scores(game, regularizers, noise, x0, cfg, n_runs, reached, False, runner, f"{mode} runs")
    if checkpoints is None:
        checkpoints = list(np.linspace(0.0, cfg.horizon, 11)[1:])
    stop_times = result.stop_times
    curve = [float(np.mean(np.isnan(stop_times) | (stop_times > t))) for t in checkpoints]
    return RecurrenceStats(
        mode=mode,
        level=float(level),
        initial_energy=harmonic_energy(structure, regularizers, x0),
        times=summarize_hitting_times(stop_times, cfg.horizon),
        checkpoints=[float(t) for t in checkpoints],
        censored_fraction=curve,
    )


# =============================================================================
# Pure-noise predictions
# =============================================================================

@dataclass
class PureNoisePrediction:
    """Drift and variance rate of z_ia = log(x_ia / x_ib) in the pure-noise regime."""
    variant: str
    drift: List[List[float]]
    variance_rate: List[List[float]]

    def to_dict(self) -> Dict:
        return asdict(self)


def pure_noise_drift(noise: NoiseModel, variant: str, benchmarks: Sequence[int]) -> PureNoisePrediction:
    """
    Payoff-difference drift and variance rate for zero payoffs.

    EW: z is a driftless Brownian motion. AS: drift -(sigma_a^2 - sigma_b^2)/2.
    Both have variance rate sigma_a^2 + sigma_b^2 per unit time.
    PI has a state-dependent drift and is not covered.
    """
    if not noise.is_diagonal:
        raise ConfigError("Pure-noise predictions need an uncorrelated noise model")
    if variant not in ("EW", "AS"):
        raise ValueError(f"Pure-noise drift is state independent only for EW and AS, got {variant}")
    if len(benchmarks) != len(noise.action_counts):
        raise ValueError(f"Expected {len(noise.action_counts)} benchmark actions, got {len(benchmarks)}")
    drift = []
    variance = []
    for (start, stop), b in zip(noise.offsets, benchmarks):
        s2 = np.asarray(noise.sigma[start:stop]) ** 2
        others = np.delete(s2, b)
        variance.append([float(v) for v in others + s2[b]])
        if variant == "EW":
            drift.append([0.0] * others.size)
        else:
            drift.append([float(v) for v in -0.5 * (others - s2[b])])
    return PureNoisePrediction(variant, drift, variance)
