"""Finite Markov chain / MDP abstractions of a continuous-state model."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .marginal import ROW_TOL, IntegrationAccuracyError, cell_probabilities
from .model import Box, Kernel, Model
from .partition import Cell, Partition, locate_state, uniform_partition  # noqa: F401  (re-exported)

SAMPLE_OVERSHOOT_WARN = 0.01


@dataclass(frozen=True)
class LabelDef:
    """Label ``symbol`` holds at representative z when ``A z <= B`` componentwise."""

    symbol: str
    A: tuple
    B: tuple

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_1d(np.asarray(self.B, dtype=float)).reshape(-1)
        if A.shape[0] != B.shape[0]:
            raise ValueError(f"label {self.symbol!r}: A has {A.shape[0]} rows but B has {B.shape[0]}")
        object.__setattr__(self, "A", tuple(map(tuple, A.tolist())))
        object.__setattr__(self, "B", tuple(B.tolist()))

    def holds(self, points: np.ndarray) -> np.ndarray:
        A, B = np.array(self.A), np.array(self.B)
        if A.shape[1] != points.shape[-1]:
            raise ValueError(f"label {self.symbol!r}: A has {A.shape[1]} columns, states have {points.shape[-1]}")
        return np.all(points @ A.T <= B, axis=-1)

    @classmethod
    def box(cls, symbol: str, bounds) -> "LabelDef":
        bounds = np.asarray(bounds, dtype=float)
        n = len(bounds)
        A = np.vstack([np.eye(n), -np.eye(n)])
        B = np.concatenate([bounds[:, 1], -bounds[:, 0]])
        return cls(symbol, A, B)


@dataclass(frozen=True, eq=False)
class AbstractModel:
    """Finite abstraction; state ``len(partition)`` is the absorbing state phi.

    ``T`` is ``(p+1, p+1)`` for a Markov chain and ``(q, p+1, p+1)`` for an
    MDP with ``q`` input points.
    """

    kind: str  # "MC" or "MDP"
    partition: Partition
    T: np.ndarray
    inputs: Optional[tuple[Cell, ...]] = None
    labels: dict = field(default_factory=dict)
    certificate: object = None
    mode: str = "integral"
    warnings: tuple = ()

    @classmethod
    def from_matrices(cls, T, labels: Optional[dict] = None) -> "AbstractModel":
        """Wrap explicit matrices (last state absorbing) on a placeholder 1-D unit-cell partition."""
        T = np.asarray(T, dtype=float)
        p = T.shape[-1] - 1
        if p < 1:
            raise ValueError("need at least one non-absorbing state")
        partition = uniform_partition(Box((0.0,), (float(p),)), [p])
        kind = "MC" if T.ndim == 2 else "MDP"
        return cls(kind, partition, T, labels={k: frozenset(v) for k, v in (labels or {}).items()})

    @property
    def num_states(self) -> int:
        return len(self.partition) + 1

    @property
    def phi(self) -> int:
        return len(self.partition)

    @property
    def num_inputs(self) -> int:
        return 1 if self.kind == "MC" else self.T.shape[0]

    @property
    def input_points(self) -> Optional[np.ndarray]:
        if self.inputs is None:
            return None
        return np.array([c.representative for c in self.inputs])

    def matrices(self) -> np.ndarray:
        """Transition matrices stacked as ``(q, p+1, p+1)``; ``q = 1`` for chains."""
        return self.T[None] if self.kind == "MC" else self.T

    def state_labels(self, idx: int) -> list[str]:
        return sorted(sym for sym, states in self.labels.items() if idx in states)


def _complete_rows(probs: np.ndarray, mode: str, warnings: list) -> np.ndarray:
    """Append the absorbing column holding the residual mass."""
    total = probs.sum(axis=1)
    over = total > 1.0
    if mode == "sample" and over.any():
        worst = float(total.max())
        if worst > 1 + SAMPLE_OVERSHOOT_WARN:
            warnings.append(f"sample-mode row mass reached {worst:.6g}; rows renormalised")
        probs = probs.copy()
        probs[over] /= total[over, None]
        total = probs.sum(axis=1)
    residual = 1.0 - total
    if np.any(residual < -ROW_TOL):
        r = int(np.argmin(residual))
        raise IntegrationAccuracyError(f"row {r} has mass {total[r]!r} > 1")
    residual = np.maximum(residual, 0.0)
    return np.concatenate([probs, residual[:, None]], axis=1)


def transition_row(kernel: Kernel, source_rep, partition: Partition, u=None, mode: str = "integral",
                   quad_order: int = 5) -> np.ndarray:
    """Cell masses from one representative; the residual (mass to phi) is the last entry."""
    probs = cell_probabilities(kernel, np.atleast_2d(source_rep), partition,
                               None if u is None else np.atleast_2d(u), mode, quad_order)
    return _complete_rows(probs, mode, [])[0]


def _absorbing_matrix(rows: np.ndarray) -> np.ndarray:
    p = rows.shape[0]
    T = np.zeros((p + 1, p + 1))
    T[:p] = rows
    T[p, p] = 1.0
    return T


def build_mc(model: Model, partition: Partition, mode: str = "integral", certificate=None,
             quad_order: int = 5) -> AbstractModel:
    if model.controlled:
        raise ValueError("build_mc needs an uncontrolled model; use build_mdp")
    warnings: list = []
    probs = cell_probabilities(model.kernel, partition.reps, partition, None, mode, quad_order)
    T = _absorbing_matrix(_complete_rows(probs, mode, warnings))
    return AbstractModel("MC", partition, T, None, {}, certificate, mode, tuple(warnings))


def build_mdp(model: Model, partition: Partition, input_partition: Partition, mode: str = "integral",
              certificate=None, quad_order: int = 5) -> AbstractModel:
    if not model.controlled:
        raise ValueError("build_mdp needs a controlled model")
    warnings: list = []
    p = len(partition)
    mats = []
    for cell in input_partition.cells:
        u = np.broadcast_to(np.array(cell.representative), (p, input_partition.dims))
        probs = cell_probabilities(model.kernel, partition.reps, partition, u, mode, quad_order)
        mats.append(_absorbing_matrix(_complete_rows(probs, mode, warnings)))
    return AbstractModel("MDP", partition, np.stack(mats), tuple(input_partition.cells), {},
                         certificate, mode, tuple(dict.fromkeys(warnings)))


def assign_labels(model: AbstractModel, defs: Sequence[LabelDef]) -> AbstractModel:
    """Attach each label to the cells whose representative satisfies it; phi gets none."""
    labels = {k: frozenset(v) for k, v in model.labels.items()}
    reps = model.partition.reps
    for d in defs:
        hit = frozenset(np.flatnonzero(d.holds(reps)).tolist())
        labels[d.symbol] = labels.get(d.symbol, frozenset()) | hit
    return dataclasses.replace(model, labels=labels)
