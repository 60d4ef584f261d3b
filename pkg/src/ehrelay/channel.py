"""Channel alphabet, energy constraints and the battery-state transition rule.

The relay battery holds ``u`` energy units, ``0 <= u <= U``.  Receiving a
"1" from the transmitter deposits one unit (lost if the battery is full);
sending a "1" costs ``m`` units and is only allowed when ``u >= m``.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import InfeasibleTransmission

Symbol = int

# Atom order used everywhere a state pmf is flattened: (x1, x2).
ATOMS = ((0, 0), (0, 1), (1, 0), (1, 1))

SUM_TOL = 1e-12


@dataclass(frozen=True)
class ChannelConfig:
    battery_capacity: int
    energy_cost: int
    crossover: float = 0.0

    def __post_init__(self):
        U, m, p = self.battery_capacity, self.energy_cost, self.crossover
        if isinstance(U, bool) or not isinstance(U, (int, np.integer)) or U < 1:
            raise ValueError(f"battery_capacity must be an integer >= 1, got {U!r}")
        if isinstance(m, bool) or not isinstance(m, (int, np.integer)) or m < 1:
            raise ValueError(f"energy_cost must be an integer >= 1, got {m!r}")
        if m > U:
            raise ValueError(f"energy_cost {m} exceeds battery_capacity {U}: the relay could never send '1'")
        if not 0.0 <= float(p) <= 0.5:
            raise ValueError(f"crossover must lie in [0, 0.5], got {p!r}")
        object.__setattr__(self, "battery_capacity", int(U))
        object.__setattr__(self, "energy_cost", int(m))
        object.__setattr__(self, "crossover", float(p))

    @property
    def n_states(self) -> int:
        return self.battery_capacity + 1

    @property
    def noiseless(self) -> bool:
        return self.crossover == 0.0


@dataclass(frozen=True)
class StatePmf:
    """Joint pmf of ``(x1, x2)`` in one battery state, stored in :data:`ATOMS` order.

    A pmf whose entries are non-negative and sum to one within ``1e-12`` is
    renormalized once here.  Anything else is stored as given so that
    :func:`validate_policy` can report it.
    """

    probs: tuple

    def __post_init__(self):
        raw = self.probs
        if isinstance(raw, Mapping):
            raw = [raw.get(a, 0.0) for a in ATOMS]
        arr = np.asarray(raw, dtype=float).reshape(-1)
        if arr.shape != (4,):
            raise ValueError(f"a state pmf needs 4 entries, got {arr.size}")
        total = arr.sum()
        if np.all(arr >= 0) and abs(total - 1.0) <= SUM_TOL:
            arr = arr / total
        object.__setattr__(self, "probs", tuple(float(v) for v in arr))

    def __getitem__(self, atom: tuple) -> float:
        return self.probs[ATOMS.index(tuple(atom))]

    @property
    def joint(self) -> np.ndarray:
        """2x2 array indexed ``[x1, x2]``."""
        return np.array(self.probs).reshape(2, 2)

    @property
    def p_x2_one(self) -> float:
        return self.probs[1] + self.probs[3]

    @property
    def p_x1_one(self) -> float:
        return self.probs[2] + self.probs[3]

    @property
    def is_distribution(self) -> bool:
        arr = np.array(self.probs)
        return bool(np.all(arr >= 0) and abs(arr.sum() - 1.0) <= SUM_TOL)


PmfLike = Union[StatePmf, Sequence, Mapping]


@dataclass(frozen=True)
class PolicyPmf:
    """One :class:`StatePmf` per battery level ``u = 0..U``."""

    per_state: tuple

    def __post_init__(self):
        states = tuple(s if isinstance(s, StatePmf) else StatePmf(s) for s in self.per_state)
        object.__setattr__(self, "per_state", states)

    @classmethod
    def from_array(cls, joint) -> "PolicyPmf":
        """Build from an array of shape ``(U+1, 2, 2)`` indexed ``[u, x1, x2]`` or ``(U+1, 4)``."""
        arr = np.asarray(joint, dtype=float)
        return cls(tuple(StatePmf(row.reshape(4)) for row in arr))

    def __len__(self):
        return len(self.per_state)

    def __getitem__(self, u: int) -> StatePmf:
        return self.per_state[u]

    @property
    def joint(self) -> np.ndarray:
        return np.array([s.probs for s in self.per_state]).reshape(-1, 2, 2)

    def to_lists(self) -> list:
        return [list(s.probs) for s in self.per_state]


def _check_state(u, cfg: ChannelConfig):
    if isinstance(u, bool) or not isinstance(u, (int, np.integer)) or not 0 <= u <= cfg.battery_capacity:
        raise ValueError(f"state {u!r} outside [0, {cfg.battery_capacity}]")


def _check_symbol(x, name):
    if x not in (0, 1):
        raise ValueError(f"{name} must be 0 or 1, got {x!r}")


def feasible_relay_outputs(u: int, cfg: ChannelConfig) -> frozenset:
    _check_state(u, cfg)
    return frozenset({0, 1}) if u >= cfg.energy_cost else frozenset({0})


def next_state(u: int, x1: Symbol, x2: Symbol, cfg: ChannelConfig) -> int:
    """Battery level after one slot: ``min(u + x1 - m*x2, U)``.

    Sending ``x2 = 1`` requires ``u >= m`` even if a "1" arrives in the same
    slot.
    """
    _check_state(u, cfg)
    _check_symbol(x1, "x1")
    _check_symbol(x2, "x2")
    if x2 == 1 and u < cfg.energy_cost:
        raise InfeasibleTransmission(f"relay cannot send '1' from state {u} (cost {cfg.energy_cost})")
    return min(u + x1 - cfg.energy_cost * x2, cfg.battery_capacity)


def transition_table(cfg: ChannelConfig) -> np.ndarray:
    """Next-state lookup of shape ``(U+1, 2, 2)``; ``-1`` marks infeasible ``(u, x1, x2)``."""
    table = np.full((cfg.n_states, 2, 2), -1, dtype=np.int64)
    for u in range(cfg.n_states):
        for x1, x2 in ATOMS:
            if x2 in feasible_relay_outputs(u, cfg):
                table[u, x1, x2] = next_state(u, x1, x2, cfg)
    return table


def validate_policy(pmf: PolicyPmf, cfg: ChannelConfig) -> list:
    """Return a list of human-readable violations; empty means the policy is valid.

    Indecomposability of the induced chain is not checked here.
    """
    problems = []
    if len(pmf) != cfg.n_states:
        problems.append(f"policy defines {len(pmf)} states, channel has {cfg.n_states}")
    for u, state in enumerate(pmf.per_state[: cfg.n_states]):
        arr = np.array(state.probs)
        if np.any(arr < 0):
            problems.append(f"u={u}: negative probability")
        if abs(arr.sum() - 1.0) > SUM_TOL:
            problems.append(f"u={u}: probabilities sum to {arr.sum():.15g}")
        if u < cfg.energy_cost and (state[(0, 1)] != 0.0 or state[(1, 1)] != 0.0):
            problems.append(f"u={u}: x2=1 has positive probability below energy cost {cfg.energy_cost}")
    return problems
