"""Partition construction and certified abstraction-error bounds."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .lipschitz import LocalLipschitzTable, SamplingConfig, local_block
from .marginal import cell_probabilities
from .model import Box, Kernel
from .partition import (  # noqa: F401  (re-exported)
    DEFAULT_MAX_CELLS,
    CapacityError,
    Cell,
    Partition,
    locate_state,
    split_cell,
    uniform_partition,
)

log = logging.getLogger(__name__)

CERT_MODES = ("uniform-global", "local-matrix", "local-vector", "max-min")


@dataclass(frozen=True, eq=False)
class ErrorCertificate:
    mode: str
    per_cell_error: np.ndarray
    global_error: float
    horizon: int
    notes: tuple = ()

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "globalError": self.global_error,
            "horizon": self.horizon,
            "maxCellError": float(self.per_cell_error.max()) if self.per_cell_error.size else 0.0,
            "notes": list(self.notes),
        }


class BudgetExceededError(CapacityError):
    """Adaptive refinement would exceed the cell budget."""

    def __init__(self, message: str, partition: Partition, certificate: ErrorCertificate, cap: int):
        super().__init__(message, len(partition), cap)
        self.partition = partition
        self.certificate = certificate


def delta_for_error(epsilon: float, N: int, h_s: float, vol_s: float,
                    h_u: Optional[float] = None) -> tuple[float, Optional[float]]:
    """Largest cell diameters whose uniform bound equals ``epsilon``.

    Controlled models split the budget evenly between the state and input
    terms of ``N * 2 (h_s d_s + h_u d_u) vol_s``.  A zero constant gives an
    infinite diameter, i.e. a single cell.
    """
    if epsilon <= 0 or N < 1:
        raise ValueError("epsilon must be positive and N >= 1")

    def inv(budget, h):
        return math.inf if h == 0 else budget / (h * vol_s)

    if h_u is None:
        return inv(epsilon / N, h_s), None
    return inv(epsilon / (4 * N), h_s), inv(epsilon / (4 * N), h_u)


def uniform_error_bound(N: int, h_s: float, delta_s: float, vol_s: float,
                        h_u: Optional[float] = None, delta_u: Optional[float] = None) -> float:
    if h_u is None:
        return N * h_s * delta_s * vol_s
    return N * 2 * (h_s * delta_s + h_u * delta_u) * vol_s


def uniform_certificate(partition: Partition, N: int, h_s: float, h_u: Optional[float] = None,
                        delta_u: Optional[float] = None) -> ErrorCertificate:
    vol = partition.domain.volume
    if h_u is None:
        per_cell = N * h_s * partition.diameters * vol
    else:
        per_cell = N * 2 * (h_s * partition.diameters + h_u * delta_u) * vol
    total = uniform_error_bound(N, h_s, partition.max_diameter, vol, h_u, delta_u)
    return ErrorCertificate("uniform-global", per_cell, float(total), N)


def local_error_bounds(N: int, table: LocalLipschitzTable, partition: Partition,
                       scale: float = 1.0) -> ErrorCertificate:
    """Per-cell errors gamma_i * delta_i with gamma_i = N sum_j h(i, j) vol(A_j)."""
    vols = partition.volumes
    if table.per_source:
        if table.h.shape != (len(partition),):
            raise ValueError("table does not match the partition")
        gamma = N * table.h * vols.sum()
        mode = "local-vector"
    else:
        if table.h.shape != (len(partition), len(partition)):
            raise ValueError("table does not match the partition")
        gamma = N * (table.h @ vols)
        mode = "local-matrix"
    per_cell = scale * gamma * partition.diameters
    return ErrorCertificate(mode, per_cell, float(per_cell.max()) if per_cell.size else 0.0, N)


def _sample_points(lo: np.ndarray, hi: np.ndarray, k: int) -> np.ndarray:
    """Per-cell sample points: a k-point lattice (vertices included) plus the centre."""
    n = lo.shape[1]
    axes = np.meshgrid(*([np.linspace(0, 1, k)] * n), indexing="ij")
    unit = np.stack([a.reshape(-1) for a in axes], axis=-1)
    unit = np.unique(np.vstack([unit, np.full((1, n), 0.5)]), axis=0)
    return lo[:, None, :] + unit[None] * (hi - lo)[:, None, :]


def maxmin_error_bounds(kernel: Kernel, partition: Partition, N: int, samples_per_cell: int = 2,
                        input_partition: Optional[Partition] = None, quad_order: int = 5) -> ErrorCertificate:
    """Per-cell errors N * sum_j (max - min) of T(A_j | s) over samples s of the cell.

    With an input partition the spread is taken jointly over state and input
    samples of each input cell, maximised over input cells.
    """
    pts = _sample_points(partition.lower, partition.upper, samples_per_cell)
    p, k, n = pts.shape
    flat = pts.reshape(-1, n)
    if input_partition is None:
        probs = cell_probabilities(kernel, flat, partition, None, "integral", quad_order).reshape(p, k, p)
        spread = probs.max(axis=1) - probs.min(axis=1)
        per_cell = N * spread.sum(axis=1)
    else:
        upts = _sample_points(input_partition.lower, input_partition.upper, samples_per_cell)
        per_cell = np.zeros(p)
        for cell_u in upts:
            src = np.repeat(flat, len(cell_u), axis=0)
            uu = np.tile(cell_u, (len(flat), 1))
            probs = cell_probabilities(kernel, src, partition, uu, "integral", quad_order)
            probs = probs.reshape(p, k * len(cell_u), p)
            spread = probs.max(axis=1) - probs.min(axis=1)
            per_cell = np.maximum(per_cell, N * spread.sum(axis=1))
    return ErrorCertificate("max-min", per_cell, float(per_cell.max()) if p else 0.0, N)


def cells_per_dim(box: Box, delta: float) -> list[int]:
    """Counts giving cells whose diagonal is at most ``delta``."""
    if math.isinf(delta):
        return [1] * box.dims
    if delta <= 0:
        raise ValueError("delta must be positive")
    side = delta / math.sqrt(box.dims)
    return [max(1, math.ceil(w / side)) for w in box.widths.tolist()]


def estimate_cardinality(domain: Box, delta_s: float, input_space: Optional[Box] = None,
                         delta_u: Optional[float] = None) -> tuple[int, int]:
    """Predicted (state cells, input cells) of the uniform grid; 0 input cells if uncontrolled."""
    ns = math.prod(cells_per_dim(domain, delta_s))
    nu = 0 if input_space is None else math.prod(cells_per_dim(input_space, delta_u))
    return ns, nu


def _refine(partition: Partition, over: np.ndarray):
    """Replace flagged cells by their two halves, in place; returns the new partition and origin map."""
    cells, origin = [], []
    for i, cell in enumerate(partition.cells):
        if over[i]:
            cells.extend(split_cell(cell))
            origin.extend([-1, -1])
        else:
            cells.append(cell)
            origin.append(i)
    return Partition(tuple(cells), partition.domain), np.array(origin)


def adaptive_refine(kernel: Kernel, domain: Box, N: int, epsilon: float, mode: str = "local-matrix",
                    max_cells: int = 100_000, input_space: Optional[Box] = None,
                    config: Optional[SamplingConfig] = None, scale: float = 1.0,
                    quad_order: int = 5) -> tuple[Partition, ErrorCertificate]:
    """Bisect over-budget cells until every per-cell error is at most ``epsilon``.

    ``scale`` multiplies the local bounds (2 for controlled models, whose
    state term carries a factor of two).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if mode not in ("local-matrix", "local-vector", "max-min"):
        raise ValueError(f"unknown adaptive mode {mode!r}")
    part = uniform_partition(domain, [2] * domain.dims, max_cells=max(max_cells, 2 ** domain.dims))
    H = None
    rounds = 0
    while True:
        if mode == "max-min":
            cert = maxmin_error_bounds(kernel, part, N, quad_order=quad_order)
            cert = ErrorCertificate(cert.mode, scale * cert.per_cell_error, scale * cert.global_error, N)
        else:
            H = _update_table(kernel, part, H, input_space, config)
            table = LocalLipschitzTable(H if mode == "local-matrix" else H.max(axis=1), "local",
                                        per_source=mode == "local-vector")
            cert = local_error_bounds(N, table, part, scale)
        if cert.global_error <= epsilon:
            log.info("adaptive gridding converged after %d rounds with %d cells", rounds, len(part))
            return part, cert
        over = cert.per_cell_error > epsilon
        if len(part) + int(over.sum()) > max_cells:
            raise BudgetExceededError(
                f"refinement needs more than {max_cells} cells (best error {cert.global_error:.6g})",
                part, cert, max_cells)
        new_part, origin = _refine(part, over)
        H = None if H is None else (H, origin)
        part = new_part
        rounds += 1


def _update_table(kernel, part: Partition, prev, input_space, config):
    lo, hi = part.lower, part.upper
    if prev is None:
        return local_block(kernel, lo, hi, lo, hi, input_space, config)[0]
    H_old, origin = prev
    kept = np.flatnonzero(origin >= 0)
    fresh = np.flatnonzero(origin < 0)
    H = np.empty((len(part), len(part)))
    H[np.ix_(kept, kept)] = H_old[np.ix_(origin[kept], origin[kept])]
    if fresh.size:
        H[fresh, :] = local_block(kernel, lo[fresh], hi[fresh], lo, hi, input_space, config)[0]
        if kept.size:
            H[np.ix_(kept, fresh)] = local_block(kernel, lo[kept], hi[kept], lo[fresh], hi[fresh],
                                                 input_space, config)[0]
    return H
