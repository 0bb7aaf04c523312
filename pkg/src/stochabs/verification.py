"""Bounded-horizon safety and reach-avoid dynamic programming."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .abstraction import AbstractModel
from .partition import Partition, locate_state


@dataclass(frozen=True, eq=False)
class ValueFunction:
    """``values[k, z]``: probability of satisfying the property from z with k steps elapsed."""

    values: np.ndarray

    @property
    def horizon(self) -> int:
        return self.values.shape[0] - 1

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]


@dataclass(frozen=True, eq=False)
class Policy:
    """``choice[k, z]``: input index applied at step k in state z."""

    choice: np.ndarray


def _indicator(idx: Iterable[int], size: int, phi: int, name: str) -> np.ndarray:
    out = np.zeros(size)
    for i in idx:
        if i == phi:
            raise ValueError(f"{name} must not contain the absorbing state")
        out[i] = 1.0
    return out


def _check_horizon(N: int):
    if N < 0:
        raise ValueError("horizon must be non-negative")


def _recurse(mats: np.ndarray, keep: np.ndarray, win: np.ndarray, terminal: np.ndarray, N: int,
             objective: Optional[str]) -> tuple[ValueFunction, Optional[Policy]]:
    """Shared backward recursion V_k = win + keep * opt_u T_u V_{k+1}, V_N = terminal."""
    _check_horizon(N)
    size = mats.shape[-1]
    V = np.zeros((N + 1, size))
    V[N] = terminal
    choice = np.zeros((N, size), dtype=int)
    for k in range(N - 1, -1, -1):
        Q = mats @ V[k + 1]  # (q, size)
        if objective == "min":
            a = np.argmin(Q, axis=0)
        else:
            a = np.argmax(Q, axis=0)
        choice[k] = a
        V[k] = win + keep * Q[a, np.arange(size)]
    return ValueFunction(V), (None if objective is None else Policy(choice))


def safety_dp_mc(model: AbstractModel, safe_idx: Iterable[int], N: int) -> ValueFunction:
    """Probability of staying in ``safe_idx`` at every step 0..N."""
    if model.kind != "MC":
        raise ValueError("safety_dp_mc needs a Markov chain")
    safe = _indicator(safe_idx, model.num_states, model.phi, "safe set")
    return _recurse(model.matrices(), safe, np.zeros_like(safe), safe, N, None)[0]


def reach_avoid_dp_mc(model: AbstractModel, phi_idx: Iterable[int], psi_idx: Iterable[int], N: int) -> ValueFunction:
    """Probability of reaching ``psi_idx`` within N steps while staying in ``phi_idx``.

    States in both sets count as targets.
    """
    if model.kind != "MC":
        raise ValueError("reach_avoid_dp_mc needs a Markov chain")
    keep, win = _reach_sets(model, phi_idx, psi_idx)
    return _recurse(model.matrices(), keep, win, win, N, None)[0]


def _reach_sets(model, phi_idx, psi_idx):
    win = _indicator(psi_idx, model.num_states, model.phi, "target set")
    keep = _indicator(phi_idx, model.num_states, model.phi, "safe set") * (1 - win)
    return keep, win


def _check_objective(objective: str):
    if objective not in ("max", "min"):
        raise ValueError("objective must be 'max' or 'min'")


def safety_dp_mdp(model: AbstractModel, safe_idx: Iterable[int], N: int,
                  objective: str = "max") -> tuple[ValueFunction, Policy]:
    _check_objective(objective)
    safe = _indicator(safe_idx, model.num_states, model.phi, "safe set")
    return _recurse(model.matrices(), safe, np.zeros_like(safe), safe, N, objective)


def reach_avoid_dp_mdp(model: AbstractModel, phi_idx: Iterable[int], psi_idx: Iterable[int], N: int,
                       objective: str = "max") -> tuple[ValueFunction, Policy]:
    _check_objective(objective)
    keep, win = _reach_sets(model, phi_idx, psi_idx)
    return _recurse(model.matrices(), keep, win, win, N, objective)


def query_initial(values: ValueFunction, partition: Partition, s0, labels: Optional[dict] = None):
    """(V_0 at the cell holding s0, its index, its labels); outside the domain gives (0, phi, [])."""
    idx = locate_state(partition, s0)
    if idx == partition.phi:
        return 0.0, idx, []
    names = sorted(sym for sym, states in (labels or {}).items() if idx in states)
    return float(values.initial[idx]), idx, names
