"""Over-approximations of the Lipschitz constants of a kernel density.

Linear-Gaussian kernels get closed-form bounds.  Everything else is handled
by evaluating central finite-difference gradient norms on a lattice of
sample points and multiplying the maximum by an inflation factor.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .expr import free_variables
from .model import Box, Kernel, LinearGaussian, UserDensity, density_grid, kernel_variables
from .partition import Partition

log = logging.getLogger(__name__)

_CHUNK = 500_000  # lattice evaluations per vectorised batch


class LipschitzEstimationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    points: int = 17
    fd_step: float = 1e-5
    inflation: float = 1.1
    polish: bool = True
    max_evals: int = 4_000_000
    max_local_evals: int = 40_000_000


@dataclass(frozen=True)
class LipschitzEstimate:
    value: float
    method: str  # "analytic" or "sampled"
    sample_grid: Optional[int] = None
    inflation: float = 1.0


@dataclass(frozen=True)
class LocalLipschitzTable:
    h: np.ndarray  # (p, p) for the pair form, (p,) for the per-source form
    method: str
    per_source: bool = False


# closed form for linear-Gaussian kernels

def _gauss_consts(sigma: np.ndarray):
    n = sigma.shape[0]
    eig = np.linalg.eigvalsh(sigma)
    c = (2 * math.pi) ** (-n / 2) / math.sqrt(float(np.prod(eig)))
    return c, float(eig.min()), float(eig.max())


def _gauss_grad_peak(sigma: np.ndarray, rmin=0.0):
    """sup of |grad N(x; 0, sigma)| over x whose Mahalanobis norm is >= rmin."""
    c, lmin, _ = _gauss_consts(sigma)
    r = np.maximum(np.asarray(rmin, dtype=float), 1.0)
    return c * r * np.exp(-r * r / 2) / math.sqrt(lmin)


def _opnorm(M: Optional[np.ndarray]) -> float:
    if M is None or M.size == 0:
        return 0.0
    return float(np.linalg.norm(M, 2))


def _depends_on(kernel: Kernel, prefix: str) -> bool:
    names = kernel_variables(kernel)
    return any(name.startswith(prefix) and name[len(prefix):].isdigit() for name in names)


# sampling machinery

def lattice(lo, hi, k: int) -> np.ndarray:
    """k points per dimension including the box vertices, as a (k^d, d) array."""
    axes = [np.linspace(a, b, k) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


def _fd_grad_norm(kernel: Kernel, sb, s, u, wrt: str, steps: np.ndarray) -> np.ndarray:
    """Euclidean norm of the central-difference gradient of t(sb|s,u) in ``wrt``."""
    args = {"sb": sb, "s": s, "u": u}
    base = args[wrt]
    total = 0.0
    for d, h in enumerate(steps):
        e = np.zeros(base.shape[-1])
        e[d] = h
        plus = dict(args, **{wrt: base + e})
        minus = dict(args, **{wrt: base - e})
        with np.errstate(invalid="ignore", over="ignore"):
            g = (density_grid(kernel, plus["sb"], plus["s"], plus["u"])
                 - density_grid(kernel, minus["sb"], minus["s"], minus["u"])) / (2 * h)
            total = total + g * g
    return np.sqrt(total)


def _shrink_grid(k: int, dims: int, budget: float, base: float = 1.0) -> int:
    while k > 3 and base * float(k) ** dims > budget:
        k -= 2 if k > 5 else 1
    return k


def _sampled_global(kernel: Kernel, domain: Box, input_space: Optional[Box], wrt: str,
                    cfg: SamplingConfig) -> LipschitzEstimate:
    n = domain.dims
    m = 0 if input_space is None else input_space.dims
    k = _shrink_grid(cfg.points, 2 * n + m, cfg.max_evals)
    if k < cfg.points:
        log.warning("Lipschitz sampling grid reduced to %d points per dimension", k)
    S = lattice(domain.lower, domain.upper, k)
    SB = lattice(domain.lower, domain.upper, k)
    U = None if input_space is None else lattice(input_space.lower, input_space.upper, k)
    wrt_box = input_space if wrt == "u" else domain
    steps = cfg.fd_step * wrt_box.widths

    best, best_at = -1.0, None
    chunk = max(1, _CHUNK // (len(SB) * (1 if U is None else len(U))))
    for start in range(0, len(S), chunk):
        s = S[start:start + chunk, None, None, :]
        sb = SB[None, :, None, :]
        u = None if U is None else U[None, None, :, :]
        g = _fd_grad_norm(kernel, sb, s, u, wrt, steps)
        g = np.broadcast_to(g, (s.shape[0], len(SB), 1 if U is None else len(U)))
        if not np.all(np.isfinite(g)):
            i, j, q = np.argwhere(~np.isfinite(g))[0]
            where = {"s": S[start + i].tolist(), "sb": SB[j].tolist()}
            if U is not None:
                where["u"] = U[q].tolist()
            raise LipschitzEstimationError(f"non-finite density gradient at {where}")
        flat = int(np.argmax(g))
        if g.flat[flat] > best:
            i, j, q = np.unravel_index(flat, g.shape)
            best = float(g.flat[flat])
            best_at = (S[start + i], SB[j], None if U is None else U[q])

    if cfg.polish and best > 0:
        best = max(best, _polish(kernel, domain, input_space, wrt, steps, best_at))
    return LipschitzEstimate(best * cfg.inflation, "sampled", k, cfg.inflation)


def _polish(kernel, domain, input_space, wrt, steps, start) -> float:
    """Local search from the best lattice point for a larger gradient norm."""
    n = domain.dims
    s0, sb0, u0 = start
    x0 = np.concatenate([s0, sb0] + ([] if u0 is None else [u0]))
    bounds = list(zip(domain.lower, domain.upper)) * 2
    if input_space is not None:
        bounds += list(zip(input_space.lower, input_space.upper))
    def neg(x):
        s, sb = x[:n], x[n:2 * n]
        u = x[2 * n:] if input_space is not None else None
        with np.errstate(all="ignore"):
            val = float(_fd_grad_norm(kernel, sb, s, u, wrt, steps))
        return -val if math.isfinite(val) else 0.0

    try:
        res = minimize(neg, x0, method="Powell", bounds=bounds,
                       options={"maxiter": 2000, "xtol": 1e-10, "ftol": 1e-12})
    except (ArithmeticError, ValueError):
        return 0.0
    return -float(res.fun)


def global_state_lipschitz(kernel: Kernel, domain: Box, input_space: Optional[Box] = None,
                           config: Optional[SamplingConfig] = None) -> LipschitzEstimate:
    """Constant h_s with |t(sb|s) - t(sb|s')| <= h_s |s - s'| over the domain."""
    if isinstance(kernel, LinearGaussian):
        return LipschitzEstimate(_opnorm(kernel.A) * float(_gauss_grad_peak(kernel.Sigma)), "analytic")
    if not _depends_on(kernel, "s"):
        return LipschitzEstimate(0.0, "analytic")
    return _sampled_global(kernel, domain, input_space, "s", config or SamplingConfig())


def global_input_lipschitz(kernel: Kernel, domain: Box, input_space: Box,
                           config: Optional[SamplingConfig] = None) -> LipschitzEstimate:
    """Constant h_u with |t(sb|s,u) - t(sb|s,u')| <= h_u |u - u'|."""
    if isinstance(kernel, LinearGaussian):
        return LipschitzEstimate(_opnorm(kernel.G) * float(_gauss_grad_peak(kernel.Sigma)), "analytic")
    if not _depends_on(kernel, "u"):
        return LipschitzEstimate(0.0, "analytic")
    return _sampled_global(kernel, domain, input_space, "u", config or SamplingConfig())


def global_next_state_lipschitz(kernel: Kernel, domain: Box, input_space: Optional[Box] = None,
                                config: Optional[SamplingConfig] = None) -> LipschitzEstimate:
    """Lipschitz constant of the density in its next-state argument."""
    if isinstance(kernel, LinearGaussian):
        return LipschitzEstimate(float(_gauss_grad_peak(kernel.Sigma)), "analytic")
    if isinstance(kernel, UserDensity) and not any(
            v.startswith("sb") for v in free_variables(kernel.expr)):
        return LipschitzEstimate(0.0, "analytic")
    return _sampled_global(kernel, domain, input_space, "sb", config or SamplingConfig())


def _analytic_block(kernel: LinearGaussian, src_lo, src_hi, dst_lo, dst_hi, input_space):
    """Pairwise bounds from an interval enclosure of sb - A s - B - G u."""
    A = kernel.A
    c_src, r_src = (src_lo + src_hi) / 2, (src_hi - src_lo) / 2
    c_dst, r_dst = (dst_lo + dst_hi) / 2, (dst_hi - dst_lo) / 2
    shift = kernel.B.copy()
    radius_u = np.zeros_like(shift)
    if kernel.G is not None and input_space is not None and kernel.G.size:
        shift = shift + kernel.G @ input_space.center
        radius_u = np.abs(kernel.G) @ (input_space.widths / 2)
    centre = c_dst[None, :, :] - (c_src @ A.T + shift)[:, None, :]
    radius = r_dst[None, :, :] + (r_src @ np.abs(A).T + radius_u)[:, None, :]
    gap = np.maximum(np.abs(centre) - radius, 0.0)
    dist = np.linalg.norm(gap, axis=-1)
    _, _, lmax = _gauss_consts(kernel.Sigma)
    return _opnorm(A) * _gauss_grad_peak(kernel.Sigma, dist / math.sqrt(lmax))


def _sampled_block(kernel, src_lo, src_hi, dst_lo, dst_hi, input_space, cfg: SamplingConfig):
    n = src_lo.shape[1]
    n_src, n_dst = len(src_lo), len(dst_lo)
    m = 0 if input_space is None else input_space.dims
    k = _shrink_grid(cfg.points, 2 * n + m, cfg.max_local_evals, base=n_src * n_dst)
    unit = lattice(np.zeros(n), np.ones(n), k)
    kd = len(unit)
    dst_pts = (dst_lo[:, None, :] + unit[None] * (dst_hi - dst_lo)[:, None, :]).reshape(-1, n)
    U = None if input_space is None else lattice(input_space.lower, input_space.upper, k)
    q = 1 if U is None else len(U)
    out = np.empty((n_src, n_dst))
    chunk = max(1, _CHUNK // (kd * len(dst_pts) * q))
    for start in range(0, n_src, chunk):
        lo, hi = src_lo[start:start + chunk], src_hi[start:start + chunk]
        c = len(lo)
        src_pts = (lo[:, None, :] + unit[None] * (hi - lo)[:, None, :]).reshape(-1, n)
        steps = cfg.fd_step * (hi - lo)
        steps_pts = np.repeat(steps, kd, axis=0)
        g = 0.0
        for d in range(n):
            e = np.zeros((len(src_pts), n))
            e[:, d] = steps_pts[:, d]
            sp = (src_pts + e)[:, None, None, :]
            sm = (src_pts - e)[:, None, None, :]
            sb = dst_pts[None, :, None, :]
            u = None if U is None else U[None, None, :, :]
            diff = (density_grid(kernel, sb, sp, u) - density_grid(kernel, sb, sm, u)) / (2 * steps_pts[:, d])[:, None, None]
            g = g + diff * diff
        g = np.sqrt(np.broadcast_to(g, (len(src_pts), len(dst_pts), q)))
        if not np.all(np.isfinite(g)):
            i, j, _ = np.argwhere(~np.isfinite(g))[0]
            raise LipschitzEstimationError(
                f"non-finite density gradient at s={src_pts[i].tolist()}, sb={dst_pts[j].tolist()}")
        out[start:start + c] = g.reshape(c, kd, n_dst, kd, q).max(axis=(1, 3, 4))
    return out * cfg.inflation, k


def local_block(kernel: Kernel, src_lo, src_hi, dst_lo, dst_hi, input_space: Optional[Box] = None,
                config: Optional[SamplingConfig] = None) -> tuple[np.ndarray, str]:
    """h(i, j) for source boxes i and destination boxes j given as bound arrays."""
    src_lo, src_hi = np.atleast_2d(src_lo), np.atleast_2d(src_hi)
    dst_lo, dst_hi = np.atleast_2d(dst_lo), np.atleast_2d(dst_hi)
    if isinstance(kernel, LinearGaussian):
        return _analytic_block(kernel, src_lo, src_hi, dst_lo, dst_hi, input_space), "analytic"
    if not _depends_on(kernel, "s"):
        return np.zeros((len(src_lo), len(dst_lo))), "analytic"
    h, _ = _sampled_block(kernel, src_lo, src_hi, dst_lo, dst_hi, input_space, config or SamplingConfig())
    return h, "sampled"


def local_lipschitz_matrix(kernel: Kernel, partition: Partition, input_space: Optional[Box] = None,
                           config: Optional[SamplingConfig] = None) -> LocalLipschitzTable:
    lo, hi = partition.lower, partition.upper
    h, method = local_block(kernel, lo, hi, lo, hi, input_space, config)
    return LocalLipschitzTable(h, method)


def local_lipschitz_vector(kernel: Kernel, partition: Partition, input_space: Optional[Box] = None,
                           config: Optional[SamplingConfig] = None) -> LocalLipschitzTable:
    """Per-source constants h(i) = max_j h(i, j)."""
    table = local_lipschitz_matrix(kernel, partition, input_space, config)
    return LocalLipschitzTable(table.h.max(axis=1), table.method, per_source=True)
