"""Probability that the kernel lands in each partition cell."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .model import Kernel, density_grid, is_gaussian
from .partition import Partition

MODES = ("integral", "sample")
ROW_TOL = 1e-9
_CHUNK = 2_000_000


class IntegrationAccuracyError(ArithmeticError):
    pass


def worker_count() -> int:
    cap = os.environ.get("FAUST_THREADS")
    default = min(4, os.cpu_count() or 1)
    if cap:
        try:
            return max(1, min(default, int(cap)))
        except ValueError:
            pass
    return default


def _interval_prob(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """P(a < Z < b) for standard normal Z, accurate in both tails."""
    upper = a > 0
    return np.where(upper, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))


def gauss_legendre(order: int, dims: int):
    """Tensor-product nodes on [0, 1]^dims and weights summing to 1."""
    x, w = np.polynomial.legendre.leggauss(order)
    x = (x + 1) / 2
    w = w / 2
    mesh = np.meshgrid(*([x] * dims), indexing="ij")
    wmesh = np.meshgrid(*([w] * dims), indexing="ij")
    nodes = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    weights = np.prod(np.stack([m.reshape(-1) for m in wmesh], axis=-1), axis=-1)
    return nodes, weights


def _diagonal_gaussian(kernel: Kernel, src: np.ndarray, u: Optional[np.ndarray]):
    mu, cov = kernel.mean_cov(src, u)
    cov = np.broadcast_to(cov, mu.shape + (mu.shape[-1],))
    n = mu.shape[-1]
    off = cov * (1 - np.eye(n))
    if np.any(off != 0):
        return None
    var = np.diagonal(cov, axis1=-2, axis2=-1)
    if np.any(var <= 0):
        return None
    return mu, np.sqrt(var)


def _cdf_block(mu, sd, partition: Partition) -> np.ndarray:
    lo, hi = partition.lower, partition.upper
    out = np.ones((mu.shape[0], len(partition)))
    for d in range(mu.shape[1]):
        a = (lo[None, :, d] - mu[:, None, d]) / sd[:, None, d]
        b = (hi[None, :, d] - mu[:, None, d]) / sd[:, None, d]
        out *= _interval_prob(a, b)
    return out


def _quadrature_block(kernel, src, u, partition: Partition, order: int) -> np.ndarray:
    n = partition.dims
    nodes, weights = gauss_legendre(order, n)
    lo, hi = partition.lower, partition.upper
    pts = lo[:, None, :] + nodes[None] * (hi - lo)[:, None, :]  # (p, k, n)
    w = weights[None, :] * partition.volumes[:, None]  # (p, k)
    uu = None if u is None else u[:, None, None, :]
    dens = density_grid(kernel, pts[None], src[:, None, None, :], uu)
    return np.einsum("rpk,pk->rp", dens, w)


def _sample_block(kernel, src, u, partition: Partition) -> np.ndarray:
    uu = None if u is None else u[:, None, :]
    dens = density_grid(kernel, partition.reps[None], src[:, None, :], uu)
    return dens * partition.volumes[None, :]


def _block(kernel, src, u, partition, mode, order):
    if mode == "sample":
        return _sample_block(kernel, src, u, partition)
    if is_gaussian(kernel):
        diag = _diagonal_gaussian(kernel, src, u)
        if diag is not None:
            return _cdf_block(*diag, partition)
    return _quadrature_block(kernel, src, u, partition, order)


def cell_probabilities(kernel: Kernel, sources: np.ndarray, partition: Partition,
                       u: Optional[np.ndarray] = None, mode: str = "integral",
                       quad_order: int = 5, workers: Optional[int] = None) -> np.ndarray:
    """Matrix of cell masses, one row per source point (and matching input row).

    ``integral`` integrates the density over each cell, ``sample`` uses the
    density at the cell representative times the cell volume.
    """
    if mode not in MODES:
        raise ValueError(f"unknown marginalization mode {mode!r}")
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    if u is not None:
        u = np.broadcast_to(np.atleast_2d(np.asarray(u, dtype=float)), (len(sources), np.shape(u)[-1]))
    per_row = len(partition) * (1 if mode == "sample" else quad_order ** partition.dims)
    chunk = max(1, _CHUNK // per_row)
    starts = list(range(0, len(sources), chunk))

    def work(start):
        src = sources[start:start + chunk]
        uu = None if u is None else u[start:start + chunk]
        with np.errstate(all="ignore"):
            return _block(kernel, src, uu, partition, mode, quad_order)

    workers = workers or worker_count()
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            blocks = list(pool.map(work, starts))
    else:
        blocks = [work(s) for s in starts]
    out = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, len(partition)))
    if not np.all(np.isfinite(out)):
        r = int(np.argwhere(~np.isfinite(out))[0][0])
        raise IntegrationAccuracyError(f"non-finite cell probability from source {sources[r].tolist()}")
    if mode == "integral":
        bad = (out < -ROW_TOL) | (out > 1 + ROW_TOL)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise IntegrationAccuracyError(
                f"quadrature gave {out[r, c]!r} for cell {c} from source {sources[r].tolist()}")
    return np.maximum(out, 0.0)
