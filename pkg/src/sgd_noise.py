#!/usr/bin/env python3
"""
SGD Lab Noise Module

Diffusion models for the stochastic dynamics and the seeded Gaussian streams
that drive them.

Every (run, driver) pair owns a counter-based Philox generator keyed by
(seed, run_id, driver), so a run draws the same increments whether it is
simulated alone, inside a batch, or on another worker thread.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np


DEFAULT_CHUNK_SIZE = 1024
DEFAULT_PROBE_POINTS = 256

# spawn-key namespaces under one seed
NOISE_NAMESPACE = 0
SAMPLING_NAMESPACE = 1


def philox_generator(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for one (namespace, run, stream) key under a seed."""
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(sequence))


def sampling_generator(seed: int, run_id: int = 0, purpose: int = 0) -> np.random.Generator:
    """Generator for non-noise randomness (initial points, Dirichlet probes)."""
    return philox_generator(seed, SAMPLING_NAMESPACE, run_id, purpose)


# =============================================================================
# Gaussian streams
# =============================================================================

class NoiseStream:
    """
    Standard normal draws of shape (runs, drivers), one row per step.

    Draws are generated in chunks per (run, driver) generator; the sequence a
    run sees depends only on (seed, run_id), never on batch composition.
    """

    def __init__(
        self,
        seed: int,
        run_ids: Sequence[int],
        driver_dim: int,
        chunk_size: int = DEFAULT_CHUNK_SIZE
    ):
        if driver_dim < 1:
            raise ValueError(f"Driver dimension must be at least 1, got {driver_dim}")
        if chunk_size < 1:
            raise ValueError(f"Chunk size must be at least 1, got {chunk_size}")
        self.seed = int(seed)
        self.run_ids = tuple(int(r) for r in run_ids)
        self.driver_dim = int(driver_dim)
        self.chunk_size = int(chunk_size)
        self._generators = [
            [philox_generator(self.seed, NOISE_NAMESPACE, run_id, driver) for driver in range(self.driver_dim)]
            for run_id in self.run_ids
        ]
        self._buffer = np.empty((len(self.run_ids), self.chunk_size, self.driver_dim))
        self._position = self.chunk_size
        self.steps_drawn = 0

    def _refill(self):
        for r, generators in enumerate(self._generators):
            for d, generator in enumerate(generators):
                self._buffer[r, :, d] = generator.standard_normal(self.chunk_size)
        self._position = 0

    def next(self) -> np.ndarray:
        """Next standard normal draw for every run, shape (runs, drivers)."""
        if self._position >= self.chunk_size:
            self._refill()
        draw = self._buffer[:, self._position, :].copy()
        self._position += 1
        self.steps_drawn += 1
        return draw

    def fork(self) -> "NoiseStream":
        """Fresh stream replaying the same draws from the start."""
        return NoiseStream(self.seed, self.run_ids, self.driver_dim, self.chunk_size)

    def matches(self, run_ids: Sequence[int], driver_dim: int) -> bool:
        return self.run_ids == tuple(int(r) for r in run_ids) and self.driver_dim == driver_dim


# =============================================================================
# Noise models
# =============================================================================

def _block_eigen_ranges(matrices: np.ndarray, offsets: Sequence[Tuple[int, int]]) -> Tuple[Tuple[float, float], ...]:
    """Per-player min/max eigenvalue of the blocks of Sigma Sigma^T over a stack of diffusions."""
    ranges = []
    for start, stop in offsets:
        block = matrices[:, start:stop, :]
        covariance = block @ np.swapaxes(block, -1, -2)
        eigenvalues = np.linalg.eigvalsh(covariance)
        ranges.append((max(float(eigenvalues.min()), 0.0), float(eigenvalues.max())))
    return tuple(ranges)


def _player_offsets(action_counts: Sequence[int]) -> Tuple[Tuple[int, int], ...]:
    bounds = np.concatenate([[0], np.cumsum(action_counts)])
    return tuple((int(bounds[i]), int(bounds[i + 1])) for i in range(len(action_counts)))


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """
    Diffusion x -> Sigma(x), a (sum A_i) x k matrix stacked over action coordinates.

    Variants:
        uncorrelated_constant: one independent driver per action, Sigma = diag(sigma)
        full_constant: a fixed matrix
        callback: a user function of the flat strategy profile
    """
    variant: str
    action_counts: Tuple[int, ...]
    driver_dim: int
    sigma: Optional[np.ndarray] = None
    matrix: Optional[np.ndarray] = None
    callback: Optional[Callable[[np.ndarray], np.ndarray]] = None
    probe_seed: int = 0
    sigma_min_sq: float = field(init=False, default=0.0)
    sigma_max_sq: float = field(init=False, default=0.0)
    player_bounds: Tuple[Tuple[float, float], ...] = field(init=False, default=())

    SUPPORTED_VARIANTS = ("uncorrelated_constant", "full_constant", "callback")

    def __post_init__(self):
        if self.variant not in self.SUPPORTED_VARIANTS:
            raise ValueError(
                f"Unsupported noise model: {self.variant}. "
                f"Supported models: {list(self.SUPPORTED_VARIANTS)}"
            )
        counts = tuple(int(a) for a in self.action_counts)
        object.__setattr__(self, "action_counts", counts)
        offsets = _player_offsets(counts)
        size = sum(counts)

        if self.variant == "uncorrelated_constant":
            sigma = np.array(self.sigma, dtype=float).ravel()
            if sigma.size != size or np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
                raise ValueError(f"Uncorrelated noise needs {size} finite nonnegative sigmas, got {sigma}")
            if self.driver_dim != size:
                raise ValueError(f"Uncorrelated noise has one driver per action ({size}), got {self.driver_dim}")
            sigma.setflags(write=False)
            object.__setattr__(self, "sigma", sigma)
            squares = [sigma[start:stop] ** 2 for start, stop in offsets]
            ranges = tuple((float(s.min()), float(s.max())) for s in squares)
        elif self.variant == "full_constant":
            matrix = np.array(self.matrix, dtype=float)
            if matrix.shape != (size, self.driver_dim) or not np.all(np.isfinite(matrix)):
                raise ValueError(f"Noise matrix must be finite with shape ({size}, {self.driver_dim}), got {matrix.shape}")
            matrix.setflags(write=False)
            object.__setattr__(self, "matrix", matrix)
            ranges = _block_eigen_ranges(matrix[None, :, :], offsets)
        else:
            if self.callback is None:
                raise ValueError("Callback noise needs a callable diffusion")
            if self.driver_dim < 1:
                raise ValueError(f"Driver dimension must be at least 1, got {self.driver_dim}")
            probes = self._probe_points(counts)
            matrices = np.stack([self._call(point) for point in probes])
            ranges = _block_eigen_ranges(matrices, offsets)

        object.__setattr__(self, "player_bounds", ranges)
        object.__setattr__(self, "sigma_min_sq", min(low for low, _ in ranges))
        object.__setattr__(self, "sigma_max_sq", max(high for _, high in ranges))

    def _probe_points(self, counts: Tuple[int, ...]) -> np.ndarray:
        generator = sampling_generator(self.probe_seed, 0, 0)
        blocks = [generator.dirichlet(np.ones(a), size=DEFAULT_PROBE_POINTS) for a in counts]
        center = np.concatenate([np.full(a, 1.0 / a) for a in counts])
        return np.vstack([center[None, :], np.concatenate(blocks, axis=1)])

    def _call(self, point: np.ndarray) -> np.ndarray:
        value = np.asarray(self.callback(point), dtype=float)
        expected = (sum(self.action_counts), self.driver_dim)
        if value.shape != expected:
            raise ValueError(f"Diffusion callback returned shape {value.shape}, expected {expected}")
        return value

    @property
    def num_coordinates(self) -> int:
        return sum(self.action_counts)

    @property
    def offsets(self) -> Tuple[Tuple[int, int], ...]:
        return _player_offsets(self.action_counts)

    def driver_count(self, player: int) -> int:
        """Number of drivers that move the player's coordinates."""
        start, stop = self.offsets[player]
        if self.variant == "uncorrelated_constant":
            return int(np.count_nonzero(self.sigma[start:stop]))
        if self.variant == "full_constant":
            return int(np.count_nonzero(np.any(self.matrix[start:stop] != 0, axis=0)))
        return self.driver_dim

    @property
    def is_diagonal(self) -> bool:
        return self.variant == "uncorrelated_constant"

    @property
    def is_zero(self) -> bool:
        if self.variant == "uncorrelated_constant":
            return not np.any(self.sigma)
        if self.variant == "full_constant":
            return not np.any(self.matrix)
        return False

    def diffusion(self, strategy: np.ndarray) -> np.ndarray:
        """Sigma(x) for one flat profile."""
        if self.variant == "uncorrelated_constant":
            return np.diag(self.sigma)
        if self.variant == "full_constant":
            return np.array(self.matrix)
        return self._call(np.asarray(strategy, dtype=float))

    def increment(self, strategies: np.ndarray, draws: np.ndarray, step: float) -> np.ndarray:
        """
        Martingale increment Sigma(x) xi sqrt(step) for a batch.

        Args:
            strategies: (R, n) flat profiles
            draws: (R, k) standard normals
            step: time step

        Returns:
            (R, n) increments
        """
        scale = np.sqrt(step)
        if self.variant == "uncorrelated_constant":
            return self.sigma * draws * scale
        if self.variant == "full_constant":
            return draws @ self.matrix.T * scale
        matrices = np.stack([self._call(x) for x in strategies])
        return np.einsum("rnk,rk->rn", matrices, draws) * scale

    def diffusion_batch(self, strategies: np.ndarray) -> np.ndarray:
        """Sigma(x) for a batch, shape (R, n, k)."""
        strategies = np.atleast_2d(strategies)
        if self.variant == "callback":
            return np.stack([self._call(x) for x in strategies])
        return np.broadcast_to(self.diffusion(strategies[0]), (strategies.shape[0],) + (self.num_coordinates, self.driver_dim))

    def describe(self) -> dict:
        record = {
            "model": self.variant,
            "driver_dim": self.driver_dim,
            "sigma_min_sq": self.sigma_min_sq,
            "sigma_max_sq": self.sigma_max_sq,
        }
        if self.sigma is not None:
            record["sigma"] = self.sigma.tolist()
        if self.matrix is not None:
            record["matrix"] = self.matrix.tolist()
        return record


def uncorrelated_noise(action_counts: Sequence[int], sigma) -> NoiseModel:
    """
    Independent per-action Brownian drivers.

    Args:
        action_counts: Actions per player
        sigma: one of
            - a scalar shared by every action,
            - a flat vector over all action coordinates,
            - a vector of length A applied to every player (all players need A actions),
            - a list of per-player entries, each a scalar or a length-A_i vector
    """
    counts = tuple(int(a) for a in action_counts)
    size = sum(counts)
    if np.isscalar(sigma):
        flat = np.full(size, float(sigma))
    elif all(np.isscalar(s) for s in sigma):
        values = np.asarray(sigma, dtype=float)
        if values.size == size:
            flat = values
        elif len(set(counts)) == 1 and values.size == counts[0]:
            flat = np.tile(values, len(counts))
        else:
            raise ValueError(f"Cannot match {values.size} sigmas to action counts {counts}")
    else:
        if len(sigma) != len(counts):
            raise ValueError(f"Expected sigma entries for {len(counts)} players, got {len(sigma)}")
        flat = np.concatenate([
            np.broadcast_to(np.asarray(s, dtype=float).ravel(), (a,)) for s, a in zip(sigma, counts)
        ])
    return NoiseModel("uncorrelated_constant", counts, size, sigma=flat)


def full_noise(action_counts: Sequence[int], matrix) -> NoiseModel:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2:
        raise ValueError(f"Noise matrix must be 2-D, got shape {matrix.shape}")
    return NoiseModel("full_constant", tuple(action_counts), matrix.shape[1], matrix=matrix)


def callback_noise(
    action_counts: Sequence[int],
    callback: Callable[[np.ndarray], np.ndarray],
    driver_dim: int,
    probe_seed: int = 0
) -> NoiseModel:
    return NoiseModel("callback", tuple(action_counts), int(driver_dim), callback=callback, probe_seed=probe_seed)


def zero_noise(action_counts: Sequence[int]) -> NoiseModel:
    return uncorrelated_noise(action_counts, 0.0)
