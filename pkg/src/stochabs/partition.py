"""Axis-aligned box partitions and point location."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .model import Box

DEFAULT_MAX_CELLS = 10**7


class CapacityError(RuntimeError):
    """Requested partition exceeds the configured cell budget."""

    def __init__(self, message: str, requested: int, cap: int):
        super().__init__(message)
        self.requested = requested
        self.cap = cap


@dataclass(frozen=True, eq=False)
class Cell:
    box: Box
    representative: tuple[float, ...]
    diameter: float

    @classmethod
    def from_box(cls, box: Box) -> "Cell":
        return cls(box, tuple(box.center.tolist()), box.diameter)

    @property
    def volume(self) -> float:
        return self.box.volume


@dataclass(frozen=True, eq=False)
class Partition:
    cells: tuple[Cell, ...]
    domain: Box

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def dims(self) -> int:
        return self.domain.dims

    @property
    def phi(self) -> int:
        """Index of the absorbing state, one past the last cell."""
        return len(self.cells)

    @cached_property
    def lower(self) -> np.ndarray:
        return np.array([c.box.lower for c in self.cells])

    @cached_property
    def upper(self) -> np.ndarray:
        return np.array([c.box.upper for c in self.cells])

    @cached_property
    def reps(self) -> np.ndarray:
        return np.array([c.representative for c in self.cells])

    @cached_property
    def volumes(self) -> np.ndarray:
        return np.prod(self.upper - self.lower, axis=1)

    @cached_property
    def diameters(self) -> np.ndarray:
        return np.array([c.diameter for c in self.cells])

    @property
    def max_diameter(self) -> float:
        return float(self.diameters.max())

    def check_cover(self, rtol: float = 1e-9) -> bool:
        """Volumes sum to the domain volume and no two interiors intersect."""
        if abs(self.volumes.sum() - self.domain.volume) > rtol * self.domain.volume:
            return False
        lo, hi = self.lower, self.upper
        for i in range(len(self.cells)):
            overlap = np.all((np.minimum(hi[i], hi[i + 1:]) - np.maximum(lo[i], lo[i + 1:])) > 0, axis=1)
            if overlap.any():
                return False
        return True


def _check_cap(total: int, cap: int, what: str = "cells"):
    if total > cap:
        raise CapacityError(f"{total} {what} exceed the cap of {cap}", total, cap)


def uniform_partition(domain: Box, cells_per_dim: Sequence[int], max_cells: int = DEFAULT_MAX_CELLS) -> Partition:
    """Regular grid over ``domain``; cells are ordered with dimension 0 varying slowest."""
    counts = [int(c) for c in cells_per_dim]
    if len(counts) != domain.dims or any(c < 1 for c in counts):
        raise ValueError("cells_per_dim must hold one positive count per dimension")
    _check_cap(int(np.prod(counts, dtype=object)), max_cells)
    edges = [np.linspace(a, b, c + 1) for a, b, c in zip(domain.lower, domain.upper, counts)]
    # pin the outer edges exactly so the cells tile the domain
    for e, a, b in zip(edges, domain.lower, domain.upper):
        e[0], e[-1] = a, b
    cells = []
    for idx in itertools.product(*(range(c) for c in counts)):
        lo = tuple(float(edges[d][k]) for d, k in enumerate(idx))
        hi = tuple(float(edges[d][k + 1]) for d, k in enumerate(idx))
        cells.append(Cell.from_box(Box(lo, hi)))
    return Partition(tuple(cells), domain)


def split_cell(cell: Cell) -> tuple[Cell, Cell]:
    """Bisect along the longest edge; ties go to the lowest dimension."""
    widths = cell.box.widths
    d = int(np.argmax(widths))
    lo, hi = list(cell.box.lower), list(cell.box.upper)
    mid = (lo[d] + hi[d]) / 2
    left_hi = hi.copy()
    left_hi[d] = mid
    right_lo = lo.copy()
    right_lo[d] = mid
    return Cell.from_box(Box(lo, left_hi)), Cell.from_box(Box(right_lo, hi))


def locate_state(partition: Partition, s0) -> int:
    """Index of the cell holding ``s0``; shared faces go to the lower index; outside gives phi."""
    s0 = np.asarray(s0, dtype=float).reshape(-1)
    if s0.shape != (partition.dims,):
        raise ValueError(f"point must have {partition.dims} coordinates")
    inside = np.all((partition.lower <= s0) & (s0 <= partition.upper), axis=1)
    hits = np.flatnonzero(inside)
    return int(hits[0]) if hits.size else partition.phi
