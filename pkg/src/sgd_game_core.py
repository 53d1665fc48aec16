#!/usr/bin/env python3
"""
SGD Lab Game Core Module

Finite normal-form games and every exact, deterministic check performed on
them: mixed payoffs, the payoff field, Nash classification, better replies,
club faces, harmonic residuals, and the two harmonic game constructors.

All objects here are immutable after construction and all functions are pure.
"""

import itertools
import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np


DEFAULT_TOLERANCE = 1e-9
DEFAULT_FACE_CAP = 10 ** 6
PROFILE_SUM_TOLERANCE = 1e-12

# einsum letters for the action axes; the batch axis uses 'Z'
_AXIS_LETTERS = "abcdefghijklmnopqrstuvwxy"

MixedProfile = List[np.ndarray]
PureProfile = Tuple[int, ...]


class ClubEnumerationError(ValueError):
    """Raised when the number of product faces exceeds the enumeration cap."""

    def __init__(self, required_cap: int, cap: int):
        self.required_cap = required_cap
        self.cap = cap
        super().__init__(
            f"Refusing to enumerate {required_cap} faces (cap is {cap}). "
            f"Raise the cap to at least {required_cap} to proceed."
        )


class NotHarmonicError(ValueError):
    """Raised when an operation needs a harmonic game and the residuals say otherwise."""


class NashType(str, Enum):
    """Nash taxonomy of a mixed profile."""
    NOT_NASH = "not_nash"
    NASH_MIXED = "nash_mixed"
    NASH_PURE = "nash_pure"
    NASH_STRICT = "nash_strict"


# =============================================================================
# Game
# =============================================================================

@dataclass(frozen=True, eq=False)
class Game:
    """
    Finite normal-form game stored as a dense payoff tensor.

    payoffs[i][a] is u_i(a) for player i and pure profile a, so the tensor
    has shape (N, A_1, ..., A_N).
    """
    payoffs: np.ndarray
    name: str = "custom"
    action_labels: Optional[Tuple[Tuple[str, ...], ...]] = None

    def __post_init__(self):
        payoffs = np.array(self.payoffs, dtype=float)
        if payoffs.ndim < 3:
            raise ValueError(
                f"Payoff tensor must have shape (N, A_1, ..., A_N) with N >= 2, got {payoffs.shape}"
            )
        num_players = payoffs.shape[0]
        if payoffs.ndim != num_players + 1:
            raise ValueError(
                f"Payoff tensor for {num_players} players needs {num_players + 1} axes, got {payoffs.ndim}"
            )
        if num_players > len(_AXIS_LETTERS):
            raise ValueError(f"Too many players: {num_players}")
        if any(count < 2 for count in payoffs.shape[1:]):
            raise ValueError(f"Every player needs at least 2 actions, got {payoffs.shape[1:]}")
        if not np.all(np.isfinite(payoffs)):
            raise ValueError("Payoff tensor contains non-finite entries")
        payoffs.setflags(write=False)
        object.__setattr__(self, "payoffs", payoffs)

        if self.action_labels is not None:
            labels = tuple(tuple(str(label) for label in player) for player in self.action_labels)
            if len(labels) != num_players or any(
                len(player) != count for player, count in zip(labels, payoffs.shape[1:])
            ):
                raise ValueError(f"Action labels {labels} do not match action counts {payoffs.shape[1:]}")
            object.__setattr__(self, "action_labels", labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Game):
            return NotImplemented
        return (
            self.name == other.name
            and self.action_labels == other.action_labels
            and self.payoffs.shape == other.payoffs.shape
            and bool(np.array_equal(self.payoffs, other.payoffs))
        )

    __hash__ = None

    @property
    def num_players(self) -> int:
        return self.payoffs.shape[0]

    @property
    def action_counts(self) -> Tuple[int, ...]:
        return tuple(int(count) for count in self.payoffs.shape[1:])

    @property
    def num_coordinates(self) -> int:
        """Total number of strategy coordinates, sum of A_i."""
        return int(sum(self.action_counts))

    @cached_property
    def offsets(self) -> Tuple[Tuple[int, int], ...]:
        """(start, stop) of each player's block in the flat coordinate vector."""
        bounds = np.concatenate([[0], np.cumsum(self.action_counts)])
        return tuple((int(bounds[i]), int(bounds[i + 1])) for i in range(self.num_players))

    def labels_for(self, player: int) -> Tuple[str, ...]:
        if self.action_labels is not None:
            return self.action_labels[player]
        return tuple(str(a) for a in range(self.action_counts[player]))

    @cached_property
    def _field_subscripts(self) -> Tuple[str, ...]:
        letters = _AXIS_LETTERS[:self.num_players]
        subscripts = []
        for i in range(self.num_players):
            others = ",".join("Z" + letters[j] for j in range(self.num_players) if j != i)
            subscripts.append(f"{letters},{others}->Z{letters[i]}")
        return tuple(subscripts)

    @cached_property
    def _payoff_subscript(self) -> str:
        letters = _AXIS_LETTERS[:self.num_players]
        return f"{letters}," + ",".join(letters) + "->"

    def field_batch(self, strategies: np.ndarray) -> np.ndarray:
        """
        Payoff field for a batch of flat profiles.

        Args:
            strategies: Array of shape (R, sum A_i), one flat profile per row

        Returns:
            Array of the same shape holding v_{i a_i}(x) per row
        """
        strategies = np.atleast_2d(strategies)
        blocks = [strategies[:, start:stop] for start, stop in self.offsets]
        parts = []
        for i in range(self.num_players):
            operands = [blocks[j] for j in range(self.num_players) if j != i]
            parts.append(np.einsum(self._field_subscripts[i], self.payoffs[i], *operands))
        return np.concatenate(parts, axis=1)


# =============================================================================
# Profiles
# =============================================================================

def split_profile(flat: np.ndarray, action_counts: Sequence[int]) -> MixedProfile:
    """Split a flat coordinate vector (last axis) into per-player blocks."""
    flat = np.asarray(flat, dtype=float)
    cuts = np.cumsum(action_counts)[:-1]
    return list(np.split(flat, cuts, axis=-1))


def flatten_profile(profile: Sequence[Sequence[float]]) -> np.ndarray:
    return np.concatenate([np.asarray(block, dtype=float).ravel() for block in profile])


def validate_mixed_profile(
    game: Game,
    profile: Sequence[Sequence[float]],
    tolerance: float = PROFILE_SUM_TOLERANCE
) -> MixedProfile:
    """
    Check that a profile is a valid mixed profile for the game.

    Returns:
        List of float arrays, one per player

    Raises:
        ValueError: If shapes, signs or sums are wrong
    """
    if len(profile) != game.num_players:
        raise ValueError(f"Profile has {len(profile)} players, game has {game.num_players}")
    blocks = []
    for i, (block, count) in enumerate(zip(profile, game.action_counts)):
        block = np.asarray(block, dtype=float).ravel()
        if block.size != count:
            raise ValueError(f"Player {i} strategy has {block.size} entries, expected {count}")
        if not np.all(np.isfinite(block)) or np.any(block < 0):
            raise ValueError(f"Player {i} strategy must be finite and nonnegative: {block}")
        if abs(block.sum() - 1.0) > tolerance:
            raise ValueError(f"Player {i} strategy sums to {block.sum():.15g}, not 1")
        blocks.append(block)
    return blocks


def validate_pure_profile(game: Game, profile: Sequence[int]) -> PureProfile:
    profile = tuple(int(a) for a in profile)
    if len(profile) != game.num_players:
        raise ValueError(f"Pure profile {profile} has wrong length for {game.num_players} players")
    for i, (a, count) in enumerate(zip(profile, game.action_counts)):
        if not 0 <= a < count:
            raise ValueError(f"Action {a} out of range for player {i} ({count} actions)")
    return profile


def uniform_profile(game: Game) -> MixedProfile:
    return [np.full(count, 1.0 / count) for count in game.action_counts]


def vertex_profile(game: Game, profile: Sequence[int]) -> MixedProfile:
    """Embed a pure profile as a vertex of the mixed strategy space."""
    profile = validate_pure_profile(game, profile)
    vertex = []
    for a, count in zip(profile, game.action_counts):
        block = np.zeros(count)
        block[a] = 1.0
        vertex.append(block)
    return vertex


# =============================================================================
# Payoffs
# =============================================================================

def _check_player(game: Game, player: int) -> int:
    if not 0 <= int(player) < game.num_players:
        raise ValueError(f"Player index {player} out of range for a {game.num_players}-player game")
    return int(player)


def mixed_payoff(game: Game, player: int, profile: Sequence[Sequence[float]]) -> float:
    """Expected payoff u_i(x), the full multilinear expansion over pure profiles."""
    player = _check_player(game, player)
    blocks = validate_mixed_profile(game, profile)
    return float(np.einsum(game._payoff_subscript, game.payoffs[player], *blocks))


def payoff_field(game: Game, profile: Sequence[Sequence[float]]) -> MixedProfile:
    """Mixed payoff vectors v_i(x): entry a_i is u_i(a_i; x_{-i})."""
    blocks = validate_mixed_profile(game, profile)
    field = game.field_batch(flatten_profile(blocks)[None, :])[0]
    return split_profile(field, game.action_counts)


def unilateral_payoffs(game: Game, player: int, profile: Sequence[int]) -> np.ndarray:
    """u_i(b_i; a_{-i}) for every action b_i of the player."""
    player = _check_player(game, player)
    profile = validate_pure_profile(game, profile)
    index = profile[:player] + (slice(None),) + profile[player + 1:]
    return np.array(game.payoffs[player][index])


def payoff_bound(game: Game, player: int) -> float:
    """max |v_{ia}(x)| over the strategy space; by multilinearity a vertex scan suffices."""
    player = _check_player(game, player)
    return float(np.max(np.abs(game.payoffs[player])))


# =============================================================================
# Nash classification and better replies
# =============================================================================

def classify_profile(
    game: Game,
    profile: Sequence[Sequence[float]],
    tol: float = DEFAULT_TOLERANCE
) -> NashType:
    """
    Classify a mixed profile in the Nash taxonomy.

    Coordinates at most tol are treated as outside the support. A profile is
    Nash when every supported action is within tol of the best payoff; it is
    strict when it is pure and every deviation loses by more than tol.
    """
    if tol <= 0:
        raise ValueError(f"Tolerance must be positive, got {tol}")
    blocks = validate_mixed_profile(game, profile)
    field = payoff_field(game, blocks)

    pure = True
    strict = True
    for block, values in zip(blocks, field):
        support = np.flatnonzero(block > tol)
        if np.any(values[support] < values.max() - tol):
            return NashType.NOT_NASH
        if support.size > 1:
            pure = False
            continue
        played = support[0]
        others = np.delete(values, played)
        if not np.all(values[played] - others > tol):
            strict = False

    if not pure:
        return NashType.NASH_MIXED
    return NashType.NASH_STRICT if strict else NashType.NASH_PURE


def better_replies(game: Game, profile: Sequence[int]) -> Set[PureProfile]:
    """
    Product of each player's weakly better replies to a pure profile.

    The set always contains the profile itself.
    """
    profile = validate_pure_profile(game, profile)
    choices = []
    for i in range(game.num_players):
        row = unilateral_payoffs(game, i, profile)
        current = game.payoffs[i][profile]
        choices.append(tuple(int(b) for b in np.flatnonzero(row >= current)))
    return set(itertools.product(*choices))


# =============================================================================
# Faces and club sets
# =============================================================================

@dataclass(frozen=True)
class Face:
    """Product face: one nonempty action subset per player."""
    supports: Tuple[Tuple[int, ...], ...]

    def __post_init__(self):
        supports = tuple(tuple(sorted({int(a) for a in support})) for support in self.supports)
        if not supports or any(len(support) == 0 for support in supports):
            raise ValueError(f"Every player needs a nonempty support, got {self.supports}")
        object.__setattr__(self, "supports", supports)

    @classmethod
    def full(cls, game: Game) -> "Face":
        return cls(tuple(tuple(range(count)) for count in game.action_counts))

    @classmethod
    def vertex(cls, profile: Sequence[int]) -> "Face":
        return cls(tuple((int(a),) for a in profile))

    @property
    def size(self) -> int:
        """Total support size across players."""
        return sum(len(support) for support in self.supports)

    def validate(self, game: Game) -> "Face":
        if len(self.supports) != game.num_players:
            raise ValueError(f"Face has {len(self.supports)} supports, game has {game.num_players} players")
        for i, (support, count) in enumerate(zip(self.supports, game.action_counts)):
            if support[0] < 0 or support[-1] >= count:
                raise ValueError(f"Face support {support} out of range for player {i}")
        return self

    def is_proper(self, game: Game) -> bool:
        return any(len(support) < count for support, count in zip(self.supports, game.action_counts))

    def out_actions(self, game: Game) -> List[Tuple[int, int]]:
        """(player, action) pairs lying outside the face."""
        return [
            (i, a)
            for i, (support, count) in enumerate(zip(self.supports, game.action_counts))
            for a in range(count)
            if a not in support
        ]

    def contains(self, profile: Sequence[int]) -> bool:
        return all(int(a) in support for a, support in zip(profile, self.supports))

    def describe(self, game: Game) -> str:
        """Readable form such as {D}×{D}."""
        parts = []
        for i, support in enumerate(self.supports):
            labels = game.labels_for(i)
            parts.append("{" + ",".join(labels[a] for a in support) + "}")
        return "×".join(parts)


def club_margin(game: Game, face: Face) -> float:
    """
    Smallest payoff loss over all deviations leaving the face.

    For every in-face profile a and every deviation b_i outside S_i this is
    the minimum of u_i(a) - u_i(b_i; a_{-i}). The full face has no outward
    deviations and returns +inf.
    """
    face.validate(game)
    margin = math.inf
    for i, count in enumerate(game.action_counts):
        out = [b for b in range(count) if b not in face.supports[i]]
        if not out:
            continue
        axes = [face.supports[j] if j != i else range(count) for j in range(game.num_players)]
        block = game.payoffs[i][np.ix_(*axes)]
        inside = np.take(block, face.supports[i], axis=i).min(axis=i)
        outside = np.take(block, out, axis=i).max(axis=i)
        margin = min(margin, float((inside - outside).min()))
    return margin


def is_club_face(game: Game, face: Face, tol: float = DEFAULT_TOLERANCE) -> bool:
    """True iff every deviation leaving the face is strictly unprofitable (by more than tol)."""
    return club_margin(game, face) > tol


def enumerate_club_faces(
    game: Game,
    cap: int = DEFAULT_FACE_CAP,
    tol: float = DEFAULT_TOLERANCE
) -> List[Face]:
    """
    All product faces that are closed under better replies.

    Sorted by total support size, so the full face always comes last.

    Raises:
        ClubEnumerationError: If prod(2^A_i - 1) exceeds the cap
    """
    required = math.prod(2 ** count - 1 for count in game.action_counts)
    if required > cap:
        raise ClubEnumerationError(required, cap)

    subsets = [
        [tuple(a for a in range(count) if mask >> a & 1) for mask in range(1, 2 ** count)]
        for count in game.action_counts
    ]
    faces = [Face(supports) for supports in itertools.product(*subsets)]
    club = [face for face in faces if is_club_face(game, face, tol)]
    club.sort(key=lambda face: (face.size, face.supports))
    return club


# =============================================================================
# Harmonic games
# =============================================================================

@dataclass(frozen=True, eq=False)
class HarmonicStructure:
    """Harmonic weights m_{ia} with per-player mass m_i and strategic center."""
    weights: Tuple[np.ndarray, ...]
    mass: np.ndarray
    center: Tuple[np.ndarray, ...]

    @property
    def action_counts(self) -> Tuple[int, ...]:
        return tuple(block.size for block in self.weights)

    def center_flat(self) -> np.ndarray:
        return flatten_profile(self.center)


def _validate_weights(game: Game, weights: Sequence[Sequence[float]]) -> List[np.ndarray]:
    if len(weights) != game.num_players:
        raise ValueError(f"Expected weights for {game.num_players} players, got {len(weights)}")
    blocks = []
    for i, (block, count) in enumerate(zip(weights, game.action_counts)):
        block = np.asarray(block, dtype=float).ravel()
        if block.size != count:
            raise ValueError(f"Player {i} has {count} actions but {block.size} weights")
        if not np.all(np.isfinite(block)) or np.any(block <= 0):
            raise ValueError(f"Harmonic weights must be positive, player {i} has {block}")
        blocks.append(block)
    return blocks


def unit_weights(game: Game) -> List[np.ndarray]:
    return [np.ones(count) for count in game.action_counts]


def harmonic_residuals(game: Game, weights: Sequence[Sequence[float]]) -> np.ndarray:
    """
    Weighted deviation sums at every pure profile.

    residual[a] = sum_i sum_{b_i} m_{i b_i} [u_i(a) - u_i(b_i; a_{-i})];
    the game is harmonic for these weights iff all residuals vanish.
    """
    blocks = _validate_weights(game, weights)
    residuals = np.zeros(game.action_counts)
    for i, weight in enumerate(blocks):
        payoffs = game.payoffs[i]
        averaged = np.tensordot(payoffs, weight, axes=([i], [0]))
        residuals += weight.sum() * payoffs - np.expand_dims(averaged, axis=i)
    return residuals


def is_harmonic(game: Game, weights: Sequence[Sequence[float]], tol: float = DEFAULT_TOLERANCE) -> bool:
    return float(np.max(np.abs(harmonic_residuals(game, weights)))) <= tol


def require_harmonic(game: Game, structure: HarmonicStructure, tol: float = DEFAULT_TOLERANCE) -> float:
    """Return the largest residual, raising NotHarmonicError above tol."""
    worst = float(np.max(np.abs(harmonic_residuals(game, structure.weights))))
    if worst > tol:
        raise NotHarmonicError(
            f"Game '{game.name}' is not harmonic for the given weights (max residual {worst:.3e} > {tol:.1e})"
        )
    return worst


def deviation_flux(
    game: Game,
    weights: Sequence[Sequence[float]],
    subset: Iterable[Sequence[int]]
) -> Tuple[float, float]:
    """
    Product-weighted deviation sums over a set of pure profiles.

    Each term is prod_j m_{j a_j} * m_{i b_i} * [u_i(a) - u_i(b_i; a_{-i})]
    for a in the subset and b a unilateral deviation of player i. Terms are
    split by whether b stays in the subset.

    Returns:
        (inward, outward). inward is zero for every game by antisymmetry;
        outward is zero too when the game is harmonic for the weights.
    """
    blocks = _validate_weights(game, weights)
    members = {validate_pure_profile(game, a) for a in subset}
    inward = 0.0
    outward = 0.0
    for a in members:
        profile_weight = math.prod(float(blocks[j][a[j]]) for j in range(game.num_players))
        for i, count in enumerate(game.action_counts):
            here = game.payoffs[i][a]
            for b_i in range(count):
                if b_i == a[i]:
                    continue
                b = a[:i] + (b_i,) + a[i + 1:]
                term = profile_weight * blocks[i][b_i] * (here - game.payoffs[i][b])
                if b in members:
                    inward += term
                else:
                    outward += term
    return inward, outward


def harmonic_structure(weights: Sequence[Sequence[float]]) -> HarmonicStructure:
    """Mass m_i = sum_a m_{ia} and center p_{ia} = m_{ia} / m_i."""
    blocks = []
    for i, block in enumerate(weights):
        block = np.asarray(block, dtype=float).ravel()
        if block.size == 0 or not np.all(np.isfinite(block)) or np.any(block <= 0):
            raise ValueError(f"Harmonic weights must be positive, player {i} has {block}")
        block.setflags(write=False)
        blocks.append(block)
    mass = np.array([block.sum() for block in blocks])
    center = []
    for block, total in zip(blocks, mass):
        point = block / total
        point.setflags(write=False)
        center.append(point)
    mass.setflags(write=False)
    return HarmonicStructure(weights=tuple(blocks), mass=mass, center=tuple(center))


def make_harmonic_2x2x2(a: float, b: float, c: float, d: float, delta: float) -> Game:
    """
    Uniform harmonic 2x2x2 game from its five free response-graph deviations.

    Payoff levels are anchored by setting u_i = 0 whenever player i plays its
    first action; the remaining entries are the deviation gains along the
    response graph, which sum to zero at every profile with unit weights.
    """
    u = np.zeros((3, 2, 2, 2))
    # a, b, c, d: deviation gains around the cycle (1,1,0)->(1,1,1)->(1,0,1)->(1,0,0)->(1,1,0); delta: (0,0,0)->(0,1,0)
    # player 1 deviations (first action -> second action)
    u[0, 1, 0, 0] = d - c
    u[0, 1, 1, 0] = a - d
    u[0, 1, 1, 1] = b - a
    u[0, 1, 0, 1] = c - b
    # player 2
    u[1, 0, 1, 0] = delta
    u[1, 0, 1, 1] = b - d - delta
    u[1, 1, 1, 0] = d
    u[1, 1, 1, 1] = -b
    # player 3
    u[2, 0, 0, 1] = c - d - delta
    u[2, 0, 1, 1] = -a + d + delta
    u[2, 1, 0, 1] = -c
    u[2, 1, 1, 1] = a
    return Game(u, name="harmonic_2x2x2")


def _indifferent_mix(matrix: np.ndarray) -> Optional[np.ndarray]:
    """Full-support mix y with matrix @ y constant, or None if no unique one exists."""
    rows, cols = matrix.shape
    system = np.zeros((rows + 1, cols + 1))
    system[:rows, :cols] = matrix
    system[:rows, cols] = -1.0
    system[rows, :cols] = 1.0
    target = np.zeros(rows + 1)
    target[rows] = 1.0
    solution, _, rank, _ = np.linalg.lstsq(system, target, rcond=None)
    if rank < cols + 1:
        return None
    if np.max(np.abs(system @ solution - target)) > 1e-9:
        return None
    return solution[:cols]


def interior_equilibrium(matrix: Sequence[Sequence[float]]) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """
    Fully mixed equilibrium (row, column) of the zero-sum game with row payoff matrix.

    Closed form for 2x2; otherwise the full-support indifference system is
    solved and accepted only if both mixes are strictly positive.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape == (2, 2):
        denominator = matrix[0, 0] - matrix[0, 1] - matrix[1, 0] + matrix[1, 1]
        if denominator == 0:
            return None
        p = (matrix[1, 1] - matrix[1, 0]) / denominator
        q = (matrix[1, 1] - matrix[0, 1]) / denominator
        if not (0 < p < 1 and 0 < q < 1):
            return None
        return np.array([p, 1 - p]), np.array([q, 1 - q])

    row = _indifferent_mix(matrix.T)
    column = _indifferent_mix(matrix)
    if row is None or column is None:
        return None
    if np.any(row <= 1e-12) or np.any(column <= 1e-12):
        return None
    return row, column


def make_zero_sum(
    matrix: Sequence[Sequence[float]],
    name: str = "zero_sum"
) -> Tuple[Game, Optional[HarmonicStructure]]:
    """
    Two-player zero-sum game u_1 = matrix, u_2 = -matrix.

    Returns:
        (game, structure) where structure has weights x* and unit masses when a
        fully mixed equilibrium exists, else None
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or not np.all(np.isfinite(matrix)):
        raise ValueError(f"Zero-sum matrix must be a finite 2-D array, got shape {matrix.shape}")
    game = Game(np.stack([matrix, -matrix]), name=name)
    equilibrium = interior_equilibrium(matrix)
    if equilibrium is None:
        return game, None
    return game, harmonic_structure(equilibrium)
