#!/usr/bin/env python3
"""
SGD Lab Builtin Games Module

Catalog of named games used by experiment configs, with payoff tensors,
parameter notes and provenance, plus a plain-dict export format for games.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

# Handle both relative and absolute imports
try:
    from .sgd_game_core import (
        Game, HarmonicStructure, harmonic_structure, make_harmonic_2x2x2, make_zero_sum, unit_weights,
    )
except ImportError:
    from sgd_game_core import (
        Game, HarmonicStructure, harmonic_structure, make_harmonic_2x2x2, make_zero_sum, unit_weights,
    )


MATCHING_PENNIES = [[1.0, -1.0], [-1.0, 1.0]]

BuiltinResult = Tuple[Game, Optional[HarmonicStructure]]


def matching_pennies() -> BuiltinResult:
    game, structure = make_zero_sum(MATCHING_PENNIES, name="matching_pennies")
    return _relabel(game, (("H", "T"), ("H", "T"))), structure


def prisoners_dilemma() -> BuiltinResult:
    """Actions (C, D); u(C,C) = (3,3), u(C,D) = (0,5), u(D,C) = (5,0), u(D,D) = (1,1)."""
    row = np.array([[3.0, 0.0], [5.0, 1.0]])
    game = Game(np.stack([row, row.T]), name="prisoners_dilemma", action_labels=(("C", "D"), ("C", "D")))
    return game, None


def entry_deterrence() -> BuiltinResult:
    """
    Entrant (Out, In) against incumbent (Fight, Accommodate).

    Out pays (0, 2) whatever the incumbent does; In pays (-1, -1) against
    Fight and (1, 1) against Accommodate.
    """
    entrant = np.array([[0.0, 0.0], [-1.0, 1.0]])
    incumbent = np.array([[2.0, 2.0], [-1.0, 1.0]])
    game = Game(
        np.stack([entrant, incumbent]),
        name="entry_deterrence",
        action_labels=(("Out", "In"), ("Fight", "Accommodate")),
    )
    return game, None


def harmonic_2x2x2(a: float = 1.0, b: float = 2.0, c: float = 3.0, d: float = 4.0, delta: float = 5.0) -> BuiltinResult:
    game = make_harmonic_2x2x2(a, b, c, d, delta)
    return game, harmonic_structure(unit_weights(game))


def zero_sum(matrix) -> BuiltinResult:
    return make_zero_sum(matrix)


def zero_game(actions=(2, 2)) -> BuiltinResult:
    """All payoffs zero; every profile is a (non-strict) equilibrium."""
    actions = tuple(int(a) for a in actions)
    if len(actions) < 2:
        raise ValueError(f"zero_game needs at least 2 players, got actions={list(actions)}")
    game = Game(np.zeros((len(actions),) + actions), name="zero_game")
    return game, harmonic_structure(unit_weights(game))


def _relabel(game: Game, labels) -> Game:
    return Game(game.payoffs, name=game.name, action_labels=labels)


# =============================================================================
# Catalog
# =============================================================================

@dataclass(frozen=True)
class BuiltinEntry:
    """Catalog entry: how to build a game and where its payoffs come from."""
    name: str
    description: str
    provenance: str
    builder: Callable[..., BuiltinResult]
    params: Dict[str, str] = field(default_factory=dict)

    def build(self, params: Optional[Dict[str, Any]] = None) -> BuiltinResult:
        params = dict(params or {})
        unknown = set(params) - set(self.params)
        if unknown:
            raise ValueError(
                f"Unknown parameters for builtin '{self.name}': {sorted(unknown)}. "
                f"Supported parameters: {list(self.params.keys())}"
            )
        return self.builder(**params)


BUILTIN_GAMES: Dict[str, BuiltinEntry] = {
    "matching_pennies": BuiltinEntry(
        name="matching_pennies",
        description="Two-player zero-sum coin toss; unique fully mixed equilibrium at the uniform profile",
        provenance="Standard convention u1 = [[1, -1], [-1, 1]], u2 = -u1",
        builder=matching_pennies,
    ),
    "prisoners_dilemma": BuiltinEntry(
        name="prisoners_dilemma",
        description="Symmetric dilemma with strictly dominant D; (D, D) is the unique strict equilibrium",
        provenance="Standard payoffs (3,3), (0,5), (5,0), (1,1)",
        builder=prisoners_dilemma,
    ),
    "entry_deterrence": BuiltinEntry(
        name="entry_deterrence",
        description="Entrant (Out, In) vs incumbent (Fight, Accommodate); (In, Accommodate) is the strict equilibrium",
        provenance="Conventional textbook tensor, not transcribed from any particular figure",
        builder=entry_deterrence,
    ),
    "harmonic_2x2x2": BuiltinEntry(
        name="harmonic_2x2x2",
        description="Three-player binary-action harmonic game with unit weights",
        provenance="Five free response-graph deviations; u_i = 0 when player i plays its first action",
        builder=harmonic_2x2x2,
        params={
            "a": "response-graph parameter (default 1)",
            "b": "response-graph parameter (default 2)",
            "c": "response-graph parameter (default 3)",
            "d": "response-graph parameter (default 4)",
            "delta": "response-graph parameter (default 5)",
        },
    ),
    "zero_sum": BuiltinEntry(
        name="zero_sum",
        description="Two-player zero-sum game u1 = matrix, u2 = -matrix; harmonic when fully mixed equilibrium exists",
        provenance="User supplied matrix",
        builder=zero_sum,
        params={"matrix": "row player's payoff matrix (required)"},
    ),
    "zero_game": BuiltinEntry(
        name="zero_game",
        description="All payoffs zero; pure-noise regime",
        provenance="Trivial game",
        builder=zero_game,
        params={"actions": "list of action counts per player (default [2, 2])"},
    ),
}


def get_builtin(name: str, params: Optional[Dict[str, Any]] = None) -> BuiltinResult:
    """
    Build a builtin game by name.

    Returns:
        (game, harmonic structure or None)
    """
    if name not in BUILTIN_GAMES:
        raise ValueError(
            f"Unsupported builtin game: {name}. "
            f"Supported games: {list(BUILTIN_GAMES.keys())}"
        )
    return BUILTIN_GAMES[name].build(params)


def list_builtins() -> List[Dict[str, Any]]:
    """Catalog records with payoff tensors built from default parameters."""
    catalog = []
    for entry in BUILTIN_GAMES.values():
        record = {
            "name": entry.name,
            "description": entry.description,
            "provenance": entry.provenance,
            "params": dict(entry.params),
        }
        if entry.name == "zero_sum":
            record["example"] = game_to_dict(zero_sum(MATCHING_PENNIES)[0])
        else:
            record["game"] = game_to_dict(entry.build()[0])
        catalog.append(record)
    return catalog


def format_catalog(catalog: List[Dict[str, Any]]) -> str:
    lines = []
    for record in catalog:
        lines.append(f"{record['name']}")
        lines.append(f"  {record['description']}")
        lines.append(f"  Provenance: {record['provenance']}")
        for key, doc in record["params"].items():
            lines.append(f"  param {key}: {doc}")
        game = record.get("game") or record.get("example")
        if game:
            label = "payoffs" if "game" in record else "example payoffs"
            for player, tensor in enumerate(game["payoffs"]):
                lines.append(f"  {label} u{player + 1} = {tensor}")
        lines.append("")
    return "\n".join(lines)


# =============================================================================
# Export / import
# =============================================================================

def payoffs_from_flat(payoffs: Sequence[Sequence[float]], actions: Sequence[int]) -> np.ndarray:
    """
    Payoff tensor from one array per player in row-major profile order
    (the last player's action index varies fastest).

    Each player's entry may also be given already shaped (A_1, ..., A_N).
    """
    actions = tuple(int(a) for a in actions)
    if len(actions) < 2 or any(a < 1 for a in actions):
        raise ValueError(f"Invalid actions {list(actions)}: need at least 2 players with at least 1 action each")
    if len(payoffs) != len(actions):
        raise ValueError(f"Expected {len(actions)} per-player payoff arrays, got {len(payoffs)}")
    size = math.prod(actions)
    tensors = []
    for i, values in enumerate(payoffs):
        values = np.asarray(values, dtype=float)
        if values.shape == actions:
            tensors.append(values)
        elif values.ndim == 1 and values.size == size:
            tensors.append(values.reshape(actions, order="C"))
        else:
            raise ValueError(
                f"Player {i} payoffs have shape {values.shape}; expected {size} values "
                f"(prod of actions {list(actions)}) or shape {actions}"
            )
    return np.stack(tensors)


def game_to_dict(game: Game) -> Dict[str, Any]:
    return {
        "name": game.name,
        "actions": list(game.action_counts),
        "payoffs": game.payoffs.tolist(),
        "labels": None if game.action_labels is None else [list(labels) for labels in game.action_labels],
    }


def game_from_dict(data: Dict[str, Any]) -> Game:
    """
    Inverse of game_to_dict.

    With `actions` declared, each player's payoffs may be nested or flat in
    row-major profile order; `players`, if present, must match.
    """
    actions = data.get("actions")
    if actions is None:
        payoffs = np.asarray(data["payoffs"], dtype=float)
    else:
        payoffs = payoffs_from_flat(data["payoffs"], actions)
    players = data.get("players")
    if players is not None and players != payoffs.shape[0]:
        raise ValueError(f"Declared players {players} do not match {payoffs.shape[0]} payoff arrays")
    labels = data.get("labels")
    return Game(
        payoffs,
        name=data.get("name", "custom"),
        action_labels=None if labels is None else tuple(tuple(player) for player in labels),
    )
