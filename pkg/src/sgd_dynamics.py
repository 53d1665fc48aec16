#!/usr/bin/env python3
"""
SGD Lab Dynamics Module

Time integration of learning dynamics on finite games:
- deterministic FTRL in score space (RK4 or Euler)
- stochastic FTRL in score space (Euler-Maruyama), the reference integrator
- the equivalent strategy-space SDE with its drift, martingale and Ito terms
- the three stochastic replicator variants (EW, AS, PI)
- projection of trajectories to payoff-difference coordinates
- CSV/JSON export of trajectories

Every integrator works on a batch of runs at once (state shape (runs, sum A_i))
and has a single-run wrapper returning a Trajectory.
"""

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

# Handle both relative and absolute imports
try:
    from .sgd_game_core import Game, flatten_profile, split_profile, validate_mixed_profile
    from .sgd_regularization import RegularizerSet, kernel_gradient
    from .sgd_noise import NoiseModel, NoiseStream
except ImportError:
    from sgd_game_core import Game, flatten_profile, split_profile, validate_mixed_profile
    from sgd_regularization import RegularizerSet, kernel_gradient
    from sgd_noise import NoiseModel, NoiseStream


RENORMALIZATION_FLOOR = 1e-14
SRD_VARIANTS = ("EW", "AS", "PI")

# stop(strategies, scores_or_None) -> bool per row
StopPredicate = Callable[[np.ndarray, Optional[np.ndarray]], np.ndarray]


class ConfigError(ValueError):
    """Invalid simulation or experiment configuration."""


class NumericalFailureError(RuntimeError):
    """One or more runs hit a non-finite state."""

    def __init__(self, message: str, run_ids: Sequence[int] = (), last_good_times: Sequence[float] = ()):
        self.run_ids = list(run_ids)
        self.last_good_times = list(last_good_times)
        super().__init__(message)


# =============================================================================
# Configuration and results
# =============================================================================

@dataclass(frozen=True)
class SimConfig:
    """
    Time discretization and seeding for one simulation.

    scheme None selects the integrator default: rk4 for the deterministic
    flow, euler_maruyama for every SDE.
    """
    step: float
    horizon: float
    sample_stride: int = 1
    seed: int = 0
    scheme: Optional[str] = None

    SUPPORTED_SCHEMES = ("euler_maruyama", "rk4", "euler")

    def __post_init__(self):
        if not np.isfinite(self.step) or self.step <= 0:
            raise ConfigError(f"Step must be a positive number, got {self.step}")
        if not np.isfinite(self.horizon) or self.horizon < 0:
            raise ConfigError(f"Horizon must be nonnegative, got {self.horizon}")
        if self.horizon > 0 and self.step > self.horizon:
            raise ConfigError(f"Step {self.step} exceeds horizon {self.horizon}")
        if int(self.sample_stride) != self.sample_stride or self.sample_stride < 1:
            raise ConfigError(f"Sample stride must be an integer >= 1, got {self.sample_stride}")
        if int(self.seed) != self.seed or not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError(f"Seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.scheme is not None and self.scheme not in self.SUPPORTED_SCHEMES:
            raise ConfigError(
                f"Unsupported scheme: {self.scheme}. Supported schemes: {list(self.SUPPORTED_SCHEMES)}"
            )
        object.__setattr__(self, "sample_stride", int(self.sample_stride))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def n_steps(self) -> int:
        return int(np.floor(self.horizon / self.step + 1e-9))

    def with_seed(self, seed: int) -> "SimConfig":
        return SimConfig(self.step, self.horizon, self.sample_stride, seed, self.scheme)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class Trajectory:
    """
    One recorded run.

    strategies and scores are (samples, sum A_i); scores is None for
    strategy-space integrators. The final_* fields hold the state at the
    terminal time, which may fall between recorded samples.
    """
    times: np.ndarray
    strategies: np.ndarray
    scores: Optional[np.ndarray]
    action_counts: Tuple[int, ...]
    config: SimConfig
    integrator: str
    run_id: int
    terminal_reason: str
    stop_time: Optional[float]
    final_time: float
    final_strategies: np.ndarray
    final_scores: Optional[np.ndarray] = None

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def num_samples(self) -> int:
        return int(self.times.size)

    def profile_at(self, sample: int) -> List[np.ndarray]:
        return split_profile(self.strategies[sample], self.action_counts)

    def final_profile(self) -> List[np.ndarray]:
        return split_profile(self.final_strategies, self.action_counts)

    def metadata(self) -> Dict:
        return {
            "integrator": self.integrator,
            "run_id": self.run_id,
            "seed": self.seed,
            "config": self.config.to_dict(),
            "action_counts": list(self.action_counts),
            "terminal_reason": self.terminal_reason,
            "stop_time": self.stop_time,
            "final_time": self.final_time,
            "num_samples": self.num_samples,
            "stop_granularity": self.config.sample_stride * self.config.step,
        }


@dataclass
class BatchResult:
    """
    Outcome of a batch of runs sharing one configuration.

    strategies/scores hold (samples, runs, sum A_i) when recording was on;
    run r is valid for its first samples_recorded[r] samples and frozen after.
    """
    integrator: str
    config: SimConfig
    action_counts: Tuple[int, ...]
    run_ids: Tuple[int, ...]
    times: np.ndarray
    strategies: Optional[np.ndarray]
    scores: Optional[np.ndarray]
    samples_recorded: np.ndarray
    terminal_reasons: List[str]
    stop_times: np.ndarray
    final_times: np.ndarray
    final_strategies: np.ndarray
    final_scores: Optional[np.ndarray]

    @property
    def n_runs(self) -> int:
        return len(self.run_ids)

    @property
    def failed_runs(self) -> List[int]:
        return [run_id for run_id, reason in zip(self.run_ids, self.terminal_reasons) if reason == "numerical_failure"]

    def trajectory(self, index: int) -> Trajectory:
        if self.strategies is None:
            raise ValueError("Batch was simulated without recording; no trajectory available")
        count = int(self.samples_recorded[index])
        stop_time = self.stop_times[index]
        return Trajectory(
            times=self.times[:count].copy(),
            strategies=self.strategies[:count, index, :].copy(),
            scores=None if self.scores is None else self.scores[:count, index, :].copy(),
            action_counts=self.action_counts,
            config=self.config,
            integrator=self.integrator,
            run_id=self.run_ids[index],
            terminal_reason=self.terminal_reasons[index],
            stop_time=None if np.isnan(stop_time) else float(stop_time),
            final_time=float(self.final_times[index]),
            final_strategies=self.final_strategies[index].copy(),
            final_scores=None if self.final_scores is None else self.final_scores[index].copy(),
        )


# =============================================================================
# Shared helpers
# =============================================================================

def initial_strategies(game: Game, x0, n_runs: int = 1) -> np.ndarray:
    """
    Broadcast initial conditions to a (runs, sum A_i) array of interior profiles.

    x0 may be a mixed profile (list of per-player vectors), a flat vector, or
    an array with one flat profile per run.
    """
    if isinstance(x0, np.ndarray) and x0.ndim == 2:
        states = np.array(x0, dtype=float)
        if states.shape != (n_runs, game.num_coordinates):
            raise ValueError(f"Initial states must have shape ({n_runs}, {game.num_coordinates}), got {states.shape}")
        for row in states:
            validate_mixed_profile(game, split_profile(row, game.action_counts), tolerance=1e-9)
    else:
        if isinstance(x0, np.ndarray) and x0.ndim == 1:
            x0 = split_profile(x0, game.action_counts)
        flat = flatten_profile(validate_mixed_profile(game, x0, tolerance=1e-9))
        states = np.tile(flat, (n_runs, 1))
    if np.any(states <= 0):
        raise ValueError("Initial profile must be strictly interior")
    return states


def _check_inputs(game: Game, regularizers: Optional[RegularizerSet], noise: Optional[NoiseModel]):
    if regularizers is not None:
        regularizers.check_players(game.num_players)
    if noise is not None and tuple(noise.action_counts) != game.action_counts:
        raise ConfigError(
            f"Noise model action counts {noise.action_counts} do not match game {game.action_counts}"
        )


def _scheme(cfg: SimConfig, allowed: Sequence[str], default: str) -> str:
    scheme = cfg.scheme or default
    if scheme not in allowed:
        raise ConfigError(f"Scheme '{scheme}' is not available here; use one of {list(allowed)}")
    return scheme


def _stream_for(noise: NoiseModel, cfg: SimConfig, run_ids: Sequence[int], shared: Optional[NoiseStream]) -> NoiseStream:
    if shared is None:
        return NoiseStream(cfg.seed, run_ids, noise.driver_dim)
    if not shared.matches(run_ids, noise.driver_dim):
        raise ConfigError("Shared noise stream does not match the runs or driver dimension of this simulation")
    if shared.steps_drawn:
        raise ConfigError("Shared noise stream was already consumed; pass stream.fork()")
    return shared


def renormalize(strategies: np.ndarray, offsets: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Clamp coordinates to at least 1e-14 and rescale each player block to sum 1."""
    clamped = np.maximum(strategies, RENORMALIZATION_FLOOR)
    for start, stop in offsets:
        block = clamped[..., start:stop]
        block /= block.sum(axis=-1, keepdims=True)
    return clamped


def _run_batch(
    integrator: str,
    game: Game,
    cfg: SimConfig,
    state: np.ndarray,
    width: int,
    advance: Callable[[np.ndarray, Optional[np.ndarray]], np.ndarray],
    stream: Optional[NoiseStream],
    stop: Optional[StopPredicate],
    record: bool,
    run_ids: Sequence[int],
    has_scores: bool
) -> BatchResult:
    """
    Shared time loop.

    state rows are [strategies | scores] when has_scores, else [strategies].
    Runs that stop or fail are frozen; noise is still drawn for them so every
    run keeps its own stream position.
    """
    n_runs = state.shape[0]
    n = width
    n_steps = cfg.n_steps
    stride = cfg.sample_stride

    active = np.ones(n_runs, dtype=bool)
    reasons = ["horizon"] * n_runs
    stop_times = np.full(n_runs, np.nan)
    final_times = np.full(n_runs, n_steps * cfg.step)
    recorded = np.zeros(n_runs, dtype=int)
    times: List[float] = []
    samples: List[np.ndarray] = []

    def split(rows: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        return rows[:, :n], (rows[:, n:] if has_scores else None)

    def take_sample(k: int):
        times.append(k * cfg.step)
        if record:
            samples.append(state.copy())
        recorded[active] += 1

    def check_stop(k: int):
        if stop is None:
            return
        idx = np.flatnonzero(active)
        if idx.size == 0:
            return
        strategies, scores = split(state[idx])
        hit = np.asarray(stop(strategies, scores), dtype=bool)
        if hit.shape != (idx.size,):
            raise ValueError(f"Stop predicate returned shape {hit.shape}, expected ({idx.size},)")
        for r in idx[hit]:
            active[r] = False
            reasons[r] = "stop_predicate"
            stop_times[r] = k * cfg.step
            final_times[r] = k * cfg.step

    take_sample(0)
    check_stop(0)
    for k in range(1, n_steps + 1):
        if not active.any():
            break
        draws = stream.next() if stream is not None else None
        idx = np.flatnonzero(active)
        updated = advance(state[idx], None if draws is None else draws[idx])
        finite = np.all(np.isfinite(updated), axis=1)
        if not finite.all():
            for r in idx[~finite]:
                active[r] = False
                reasons[r] = "numerical_failure"
                final_times[r] = (k - 1) * cfg.step
        state[idx[finite]] = updated[finite]
        if k % stride == 0:
            take_sample(k)
            check_stop(k)

    final_strategies, final_scores = split(state)
    stacked = np.stack(samples) if record else None
    return BatchResult(
        integrator=integrator,
        config=cfg,
        action_counts=game.action_counts,
        run_ids=tuple(int(r) for r in run_ids),
        times=np.asarray(times),
        strategies=None if stacked is None else stacked[:, :, :n],
        scores=None if stacked is None or not has_scores else stacked[:, :, n:],
        samples_recorded=recorded,
        terminal_reasons=reasons,
        stop_times=stop_times,
        final_times=final_times,
        final_strategies=final_strategies.copy(),
        final_scores=None if final_scores is None else final_scores.copy(),
    )


def _run_ids(n_runs: int, run_ids: Optional[Sequence[int]]) -> Tuple[int, ...]:
    if run_ids is None:
        return tuple(range(n_runs))
    run_ids = tuple(int(r) for r in run_ids)
    if len(run_ids) != n_runs:
        raise ValueError(f"Got {len(run_ids)} run ids for {n_runs} runs")
    return run_ids


# =============================================================================
# Deterministic fields
# =============================================================================

def strategy_drift(kernel, strategies: np.ndarray, payoffs: np.ndarray) -> np.ndarray:
    """g_a (v_a - sum_b h_b v_b) with g = 1/theta'' and h = g / sum g, for rows of one player block."""
    g = kernel.inverse_curvature(strategies)
    weights = g / g.sum(axis=-1, keepdims=True)
    return g * (payoffs - (weights * payoffs).sum(axis=-1, keepdims=True))


def strategy_field(game: Game, regularizers: RegularizerSet, strategies: np.ndarray) -> np.ndarray:
    """Noiseless strategy-space FTRL field on flat profiles of shape (..., sum A_i)."""
    strategies = np.atleast_2d(np.asarray(strategies, dtype=float))
    payoffs = game.field_batch(strategies)
    out = np.empty_like(strategies)
    for kernel, (start, stop) in zip(regularizers.kernels, game.offsets):
        out[:, start:stop] = strategy_drift(kernel, strategies[:, start:stop], payoffs[:, start:stop])
    return out


def replicator_field(game: Game, strategies: np.ndarray) -> np.ndarray:
    """x_a (v_a - <x, v>) per player."""
    strategies = np.atleast_2d(np.asarray(strategies, dtype=float))
    payoffs = game.field_batch(strategies)
    out = np.empty_like(strategies)
    for start, stop in game.offsets:
        x, v = strategies[:, start:stop], payoffs[:, start:stop]
        out[:, start:stop] = x * (v - (x * v).sum(axis=-1, keepdims=True))
    return out


def affine_scaling_field(game: Game, strategies: np.ndarray) -> np.ndarray:
    """x_a^2 (v_a - sum_b x_b^2 v_b / sum_b x_b^2) per player."""
    strategies = np.atleast_2d(np.asarray(strategies, dtype=float))
    payoffs = game.field_batch(strategies)
    out = np.empty_like(strategies)
    for start, stop in game.offsets:
        x2, v = strategies[:, start:stop] ** 2, payoffs[:, start:stop]
        out[:, start:stop] = x2 * (v - (x2 * v).sum(axis=-1, keepdims=True) / x2.sum(axis=-1, keepdims=True))
    return out


# =============================================================================
# Deterministic FTRL
# =============================================================================

def simulate_deterministic_ftrl_batch(
    game: Game,
    regularizers: RegularizerSet,
    x0,
    cfg: SimConfig,
    n_runs: int = 1,
    stop: Optional[StopPredicate] = None,
    record: bool = True,
    run_ids: Optional[Sequence[int]] = None
) -> BatchResult:
    """
    dy = v(Q(y)) dt from y(0) = grad h(x0), integrated in score space.

    The scheme is rk4 by default; "euler" gives the first-order reference used
    to check the noiseless limit of the stochastic integrators.
    """
    _check_inputs(game, regularizers, None)
    scheme = _scheme(cfg, ("rk4", "euler"), "rk4")
    strategies = initial_strategies(game, x0, n_runs)
    scores = regularizers.gradient_flat(strategies, game.offsets)
    n = game.num_coordinates
    step = cfg.step

    def velocity(y: np.ndarray) -> np.ndarray:
        # rows with non-finite scores propagate NaN
        return game.field_batch(_with_mirror(regularizers, game, y)[:, :n])

    def advance(rows: np.ndarray, _draws) -> np.ndarray:
        x, y = rows[:, :n], rows[:, n:]
        if not np.all(np.isfinite(y)):
            return np.full_like(rows, np.nan)
        if scheme == "euler":
            y_next = y + step * game.field_batch(x)
        else:
            k1 = game.field_batch(x)
            k2 = velocity(y + 0.5 * step * k1)
            k3 = velocity(y + 0.5 * step * k2)
            k4 = velocity(y + step * k3)
            y_next = y + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return _with_mirror(regularizers, game, y_next)

    state = np.hstack([strategies, scores])
    return _run_batch(
        f"deterministic_ftrl_{scheme}", game, cfg, state, n, advance,
        None, stop, record, _run_ids(n_runs, run_ids), has_scores=True
    )


def _with_mirror(regularizers: RegularizerSet, game: Game, scores: np.ndarray) -> np.ndarray:
    """[Q(y) | y] rows; rows with non-finite scores come back as NaN."""
    out = np.full((scores.shape[0], 2 * game.num_coordinates), np.nan)
    finite = np.all(np.isfinite(scores), axis=1)
    if finite.any():
        out[finite, :game.num_coordinates] = regularizers.mirror_flat(scores[finite], game.offsets)
        out[finite, game.num_coordinates:] = scores[finite]
    return out


def simulate_deterministic_ftrl(
    game: Game,
    regularizers: RegularizerSet,
    x0,
    cfg: SimConfig,
    stop: Optional[StopPredicate] = None
) -> Trajectory:
    return simulate_deterministic_ftrl_batch(game, regularizers, x0, cfg, 1, stop).trajectory(0)


# =============================================================================
# Stochastic FTRL in score space
# =============================================================================

def simulate_sftrl_scores_batch(
    game: Game,
    regularizers: RegularizerSet,
    noise: NoiseModel,
    x0,
    cfg: SimConfig,
    n_runs: int = 1,
    stop: Optional[StopPredicate] = None,
    record: bool = True,
    run_ids: Optional[Sequence[int]] = None,
    shared_noise: Optional[NoiseStream] = None
) -> BatchResult:
    """
    Euler-Maruyama for dY = v(X) dt + Sigma(X) dW with X = Q(Y).

    Y(0) = grad h(x0); each run draws from its own (seed, run_id) substream.
    """
    _check_inputs(game, regularizers, noise)
    _scheme(cfg, ("euler_maruyama",), "euler_maruyama")
    ids = _run_ids(n_runs, run_ids)
    strategies = initial_strategies(game, x0, n_runs)
    scores = regularizers.gradient_flat(strategies, game.offsets)
    stream = _stream_for(noise, cfg, ids, shared_noise)
    n = game.num_coordinates
    step = cfg.step

    def advance(rows: np.ndarray, draws: np.ndarray) -> np.ndarray:
        x, y = rows[:, :n], rows[:, n:]
        y_next = y + step * game.field_batch(x) + noise.increment(x, draws, step)
        return _with_mirror(regularizers, game, y_next)

    state = np.hstack([strategies, scores])
    return _run_batch("sftrl_scores", game, cfg, state, n, advance, stream, stop, record, ids, has_scores=True)


def simulate_sftrl_scores(
    game: Game,
    regularizers: RegularizerSet,
    noise: NoiseModel,
    x0,
    cfg: SimConfig,
    stop: Optional[StopPredicate] = None,
    run_id: int = 0,
    shared_noise: Optional[NoiseStream] = None
) -> Trajectory:
    return simulate_sftrl_scores_batch(
        game, regularizers, noise, x0, cfg, 1, stop, True, (run_id,), shared_noise
    ).trajectory(0)


# =============================================================================
# Stochastic FTRL in strategy space
# =============================================================================

def strategy_increment(
    kernel,
    strategies: np.ndarray,
    payoffs: np.ndarray,
    diffusion: Optional[np.ndarray],
    draws: Optional[np.ndarray],
    step: float
) -> np.ndarray:
    """
    One Euler-Maruyama increment of the strategy-space SDE for one player block.

    Args:
        kernel: the player's kernel (theta''' < 0 required)
        strategies: (R, A) current strategies
        payoffs: (R, A) payoff vectors
        diffusion: (R, A, k) rows of Sigma(x) for this player, or None
        draws: (R, k) standard normals, or None
        step: time step

    Returns:
        (R, A) increment: drift dt + martingale term + Ito correction dt
    """
    g = kernel.inverse_curvature(strategies)
    weights = g / g.sum(axis=-1, keepdims=True)
    increment = step * g * (payoffs - (weights * payoffs).sum(axis=-1, keepdims=True))
    if diffusion is None:
        return increment

    shock = np.einsum("rak,rk->ra", diffusion, draws) * np.sqrt(step)
    increment += g * (shock - (weights * shock).sum(axis=-1, keepdims=True))

    centered = diffusion - np.einsum("rb,rbk->rk", weights, diffusion)[:, None, :]
    curvature = -0.5 * kernel.d3(strategies) * g ** 2
    q2 = curvature[:, :, None] * centered ** 2
    correction = (q2 - (weights[:, :, None] * q2).sum(axis=1, keepdims=True)).sum(axis=-1)
    increment += step * g * correction
    return increment


def simulate_sftrl_strategies_batch(
    game: Game,
    regularizers: RegularizerSet,
    noise: NoiseModel,
    x0,
    cfg: SimConfig,
    n_runs: int = 1,
    stop: Optional[StopPredicate] = None,
    record: bool = True,
    run_ids: Optional[Sequence[int]] = None,
    shared_noise: Optional[NoiseStream] = None
) -> BatchResult:
    """
    Euler-Maruyama directly on X, followed by per-player renormalization.

    With shared_noise the run consumes exactly the Gaussian draws of a paired
    score-space run (pass stream.fork() of the same seed and run ids).
    """
    _check_inputs(game, regularizers, noise)
    _scheme(cfg, ("euler_maruyama",), "euler_maruyama")
    ids = _run_ids(n_runs, run_ids)
    strategies = initial_strategies(game, x0, n_runs)
    stream = _stream_for(noise, cfg, ids, shared_noise)
    step = cfg.step

    def advance(x: np.ndarray, draws: np.ndarray) -> np.ndarray:
        payoffs = game.field_batch(x)
        sigma = noise.diffusion_batch(x)
        out = np.empty_like(x)
        for kernel, (start, stop_) in zip(regularizers.kernels, game.offsets):
            out[:, start:stop_] = x[:, start:stop_] + strategy_increment(
                kernel, x[:, start:stop_], payoffs[:, start:stop_], sigma[:, start:stop_, :], draws, step
            )
        if not np.all(np.isfinite(out)):
            return out
        return renormalize(out, game.offsets)

    return _run_batch("sftrl_strategies", game, cfg, strategies, game.num_coordinates, advance,
                      stream, stop, record, ids, has_scores=False)


def simulate_sftrl_strategies(
    game: Game,
    regularizers: RegularizerSet,
    noise: NoiseModel,
    x0,
    cfg: SimConfig,
    stop: Optional[StopPredicate] = None,
    run_id: int = 0,
    shared_noise: Optional[NoiseStream] = None
) -> Trajectory:
    return simulate_sftrl_strategies_batch(
        game, regularizers, noise, x0, cfg, 1, stop, True, (run_id,), shared_noise
    ).trajectory(0)


# =============================================================================
# Stochastic replicator dynamics
# =============================================================================

def srd_increment(
    variant: str,
    strategies: np.ndarray,
    payoffs: np.ndarray,
    sigma: np.ndarray,
    draws: np.ndarray,
    step: float
) -> np.ndarray:
    """
    One increment of a stochastic replicator variant for one player block.

    Args:
        variant: "EW", "AS" or "PI"
        strategies, payoffs: (R, A)
        sigma: (A,) per-action noise levels
        draws: (R, A) standard normals for this player's actions
        step: time step
    """
    x = strategies
    increment = step * x * (payoffs - (x * payoffs).sum(axis=-1, keepdims=True))
    shock = sigma * draws * np.sqrt(step)
    increment += x * (shock - (x * shock).sum(axis=-1, keepdims=True))
    s2 = sigma ** 2
    if variant == "EW":
        spread = s2 * (1.0 - 2.0 * x)
        increment += step * 0.5 * x * (spread - (x * spread).sum(axis=-1, keepdims=True))
    elif variant == "AS":
        increment -= step * x * (s2 * x - (s2 * x ** 2).sum(axis=-1, keepdims=True))
    elif variant != "PI":
        raise ConfigError(f"Unknown replicator variant: {variant}. Supported variants: {list(SRD_VARIANTS)}")
    return increment


def simulate_srd_batch(
    game: Game,
    noise: NoiseModel,
    x0,
    cfg: SimConfig,
    variant: str,
    n_runs: int = 1,
    stop: Optional[StopPredicate] = None,
    record: bool = True,
    run_ids: Optional[Sequence[int]] = None,
    shared_noise: Optional[NoiseStream] = None
) -> BatchResult:
    """Stochastic replicator dynamics (EW, AS or PI) under uncorrelated noise."""
    if variant not in SRD_VARIANTS:
        raise ConfigError(f"Unknown replicator variant: {variant}. Supported variants: {list(SRD_VARIANTS)}")
    _check_inputs(game, None, noise)
    if not noise.is_diagonal:
        raise ConfigError("Stochastic replicator dynamics need an uncorrelated (diagonal) noise model")
    _scheme(cfg, ("euler_maruyama",), "euler_maruyama")
    ids = _run_ids(n_runs, run_ids)
    strategies = initial_strategies(game, x0, n_runs)
    stream = _stream_for(noise, cfg, ids, shared_noise)
    step = cfg.step

    def advance(x: np.ndarray, draws: np.ndarray) -> np.ndarray:
        payoffs = game.field_batch(x)
        out = np.empty_like(x)
        for start, stop_ in game.offsets:
            out[:, start:stop_] = x[:, start:stop_] + srd_increment(
                variant, x[:, start:stop_], payoffs[:, start:stop_],
                noise.sigma[start:stop_], draws[:, start:stop_], step
            )
        if not np.all(np.isfinite(out)):
            return out
        return renormalize(out, game.offsets)

    return _run_batch(f"srd_{variant.lower()}", game, cfg, strategies, game.num_coordinates, advance,
                      stream, stop, record, ids, has_scores=False)


def simulate_srd(
    game: Game,
    noise: NoiseModel,
    x0,
    cfg: SimConfig,
    variant: str,
    stop: Optional[StopPredicate] = None,
    run_id: int = 0,
    shared_noise: Optional[NoiseStream] = None
) -> Trajectory:
    return simulate_srd_batch(game, noise, x0, cfg, variant, 1, stop, True, (run_id,), shared_noise).trajectory(0)


# =============================================================================
# Payoff differences
# =============================================================================

def project_payoff_differences(
    trajectory: Trajectory,
    benchmarks: Sequence[int],
    regularizers: Optional[RegularizerSet] = None
) -> List[np.ndarray]:
    """
    Payoff-difference coordinates z_ia = y_ia - y_i,benchmark per player.

    Strategy-only trajectories go through z_ia = theta'(x_ia) - theta'(x_i,benchmark),
    which needs the regularizers and strictly positive strategies.

    Returns:
        One (samples, A_i - 1) array per player
    """
    counts = trajectory.action_counts
    if len(benchmarks) != len(counts):
        raise ValueError(f"Expected {len(counts)} benchmark actions, got {len(benchmarks)}")
    for i, (b, count) in enumerate(zip(benchmarks, counts)):
        if not 0 <= int(b) < count:
            raise ValueError(f"Benchmark action {b} out of range for player {i}")

    if trajectory.scores is not None:
        blocks = split_profile(trajectory.scores, counts)
    else:
        if regularizers is None:
            raise ValueError("Strategy-only trajectories need the regularizers to map to payoff differences")
        blocks = [
            kernel_gradient(kernel, x)
            for kernel, x in zip(regularizers.kernels, split_profile(trajectory.strategies, counts))
        ]
    return [np.delete(y - y[:, [b]], b, axis=1) for y, b in zip(blocks, benchmarks)]


# =============================================================================
# Export
# =============================================================================

def write_trajectory_csv(trajectory: Trajectory, path: Union[str, Path], comment: Optional[str] = None) -> Path:
    """
    Long-format CSV with header t,player,action,x,y (y empty for strategy-only runs).

    A comment, if given, goes on a first line starting with "# ".
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    offsets = np.concatenate([[0], np.cumsum(trajectory.action_counts)])
    with open(path, "w", encoding="utf-8", newline="") as f:
        if comment:
            f.write(f"# {comment}\n")
        writer = csv.writer(f)
        writer.writerow(["t", "player", "action", "x", "y"])
        for s, t in enumerate(trajectory.times):
            for i, count in enumerate(trajectory.action_counts):
                for a in range(count):
                    column = offsets[i] + a
                    y = "" if trajectory.scores is None else repr(float(trajectory.scores[s, column]))
                    writer.writerow([repr(float(t)), i, a, repr(float(trajectory.strategies[s, column])), y])
    return path


def write_trajectory_json(trajectory: Trajectory, path: Union[str, Path], extra: Optional[Dict] = None) -> Path:
    """JSON sidecar with the config echo, seed and terminal reason."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = trajectory.metadata()
    record["final_strategies"] = trajectory.final_strategies.tolist()
    if extra:
        record.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True)
    return path
