"""Continuous-state models: boxes, transition kernels and density evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .expr import Expr, eval_ast, free_variables, parse_expression

MAX_DIM = 8


class ModelError(ValueError):
    """Malformed model definition."""


class KernelError(ArithmeticError):
    """Kernel could not be evaluated at a point."""


class SingularKernelError(KernelError):
    pass


@dataclass(frozen=True)
class Box:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(x) for x in self.lower)
        hi = tuple(float(x) for x in self.upper)
        if len(lo) != len(hi) or not lo:
            raise ModelError("box bounds must be non-empty and of equal length")
        for i, (a, b) in enumerate(zip(lo, hi)):
            if not (math.isfinite(a) and math.isfinite(b)):
                raise ModelError(f"box bound in dimension {i} is not finite")
            if not a < b:
                raise ModelError(f"box dimension {i} has lower {a} >= upper {b}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def from_bounds(cls, bounds: Sequence[Sequence[float]]) -> "Box":
        """Build from an n x 2 list of ``[lower, upper]`` rows."""
        rows = [tuple(r) for r in bounds]
        if any(len(r) != 2 for r in rows):
            raise ModelError("bounds must be an n x 2 matrix")
        return cls(tuple(r[0] for r in rows), tuple(r[1] for r in rows))

    @property
    def dims(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.upper)

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.widths))

    def contains(self, x, closed: bool = True) -> bool:
        x = np.asarray(x, dtype=float)
        if closed:
            return bool(np.all(x >= self.lo) and np.all(x <= self.hi))
        return bool(np.all(x > self.lo) and np.all(x < self.hi))

    def bounds(self) -> list[list[float]]:
        return [[a, b] for a, b in zip(self.lower, self.upper)]


def state_vars(n: int) -> list[str]:
    return [f"s{i + 1}" for i in range(n)]


def next_vars(n: int) -> list[str]:
    return [f"sb{i + 1}" for i in range(n)]


def input_vars(m: int) -> list[str]:
    return [f"u{i + 1}" for i in range(m)]


def _bindings(s: np.ndarray, u: Optional[np.ndarray], s_next: Optional[np.ndarray] = None) -> dict:
    env = {f"s{i + 1}": s[..., i] for i in range(s.shape[-1])}
    if u is not None:
        env.update({f"u{i + 1}": u[..., i] for i in range(u.shape[-1])})
    if s_next is not None:
        env.update({f"sb{i + 1}": s_next[..., i] for i in range(s_next.shape[-1])})
    return env


def _lead_shape(s: np.ndarray, u: Optional[np.ndarray]) -> tuple:
    if u is None:
        return s.shape[:-1]
    return np.broadcast_shapes(s.shape[:-1], u.shape[:-1])


def _gaussian_pdf(x: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Density of N(0, L L^T) at x (..., n), with chol broadcastable to (..., n, n)."""
    n = x.shape[-1]
    if chol.ndim == 2:
        z = x @ np.linalg.inv(chol).T
    else:
        chol = np.broadcast_to(chol, x.shape + (n,))
        z = np.linalg.solve(chol, x[..., None])[..., 0]
    logdet = np.sum(np.log(np.abs(np.diagonal(chol, axis1=-2, axis2=-1))), axis=-1)
    return np.exp(-0.5 * np.sum(z * z, axis=-1) - logdet - 0.5 * n * math.log(2 * math.pi))


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise SingularKernelError("covariance is not positive-definite") from None


@dataclass(frozen=True, eq=False)
class LinearGaussian:
    """``s' = A s + B (+ G u) + eta`` with ``eta ~ N(0, Sigma)``."""

    A: np.ndarray
    B: np.ndarray
    Sigma: np.ndarray
    G: Optional[np.ndarray] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(-1)
        Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Sigma", Sigma)
        if self.G is not None:
            G = np.asarray(self.G, dtype=float)
            object.__setattr__(self, "G", G.reshape(n, -1) if G.size else G.reshape(n, 0))
        for arr in (A, B, Sigma):
            arr.setflags(write=False)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return 0 if self.G is None else self.G.shape[1]

    def mean(self, s, u=None):
        mu = s @ self.A.T + self.B
        if self.G is not None and u is not None:
            mu = mu + u @ self.G.T
        return mu

    def mean_cov(self, s, u=None):
        mu = self.mean(s, u)
        return mu, np.broadcast_to(self.Sigma, mu.shape + (mu.shape[-1],))

    def pdf(self, s_next, s, u=None):
        return _gaussian_pdf(s_next - self.mean(s, u), _cholesky(self.Sigma))


@dataclass(frozen=True, eq=False)
class NonlinearGaussian:
    """``s' = f(s, u) + g(s, u) eta`` with ``eta`` standard normal; covariance ``g g^T``."""

    drift: tuple
    variance: tuple
    drift_text: tuple = field(default=(), compare=False)
    variance_text: tuple = field(default=(), compare=False)

    @classmethod
    def from_strings(cls, drift: Sequence[str], variance) -> "NonlinearGaussian":
        drift = [drift] if isinstance(drift, str) else list(drift)
        n = len(drift)
        if isinstance(variance, str):
            variance = [[variance]]
        rows = [[r] if isinstance(r, str) else list(r) for r in variance]
        if n == 1 and len(rows) == 1 and len(rows[0]) != 1:
            raise ModelError("variance must be an n x n matrix of expressions")
        if len(rows) != n or any(len(r) != n for r in rows):
            raise ModelError(f"variance must be a {n} x {n} matrix of expressions")
        return cls(
            tuple(parse_expression(t) for t in drift),
            tuple(tuple(parse_expression(t) for t in r) for r in rows),
            tuple(drift),
            tuple(tuple(r) for r in rows),
        )

    @property
    def state_dim(self) -> int:
        return len(self.drift)

    def expressions(self) -> list[Expr]:
        return list(self.drift) + [e for row in self.variance for e in row]

    def _g(self, s, u=None) -> np.ndarray:
        env = _bindings(s, u)
        shape = _lead_shape(s, u)
        n = self.state_dim
        g = np.empty(shape + (n, n))
        for i in range(n):
            for j in range(n):
                g[..., i, j] = eval_ast(self.variance[i][j], env)
        return g

    def mean(self, s, u=None):
        env = _bindings(s, u)
        mu = np.empty(_lead_shape(s, u) + (self.state_dim,))
        for i, e in enumerate(self.drift):
            mu[..., i] = eval_ast(e, env)
        return mu

    @property
    def constant_variance(self) -> bool:
        return not any(free_variables(e) for row in self.variance for e in row)

    def mean_cov(self, s, u=None):
        g = self._g(s, u)
        return self.mean(s, u), g @ np.swapaxes(g, -1, -2)

    def pdf(self, s_next, s, u=None):
        if self.constant_variance and self.state_dim > 1:
            g = self._g(np.zeros(self.state_dim))
            cov = g @ g.T
            return _gaussian_pdf(s_next - self.mean(s, u), _cholesky(cov))
        mu, cov = self.mean_cov(s, u)
        if cov.shape[-1] == 1:
            var = cov[..., 0, 0]
            if np.any(var <= 0):
                raise SingularKernelError("variance vanishes at an evaluation point")
            x = s_next[..., 0] - mu[..., 0]
            return np.exp(-0.5 * x * x / var) / np.sqrt(2 * math.pi * var)
        shape = np.broadcast_shapes(s_next.shape, mu.shape)
        return _gaussian_pdf(np.broadcast_to(s_next - mu, shape), _cholesky(cov))


@dataclass(frozen=True, eq=False)
class UserDensity:
    """Arbitrary density ``t(sb | s, u)`` given as an expression."""

    expr: Expr
    text: str = field(default="", compare=False)

    @classmethod
    def from_string(cls, text: str) -> "UserDensity":
        return cls(parse_expression(text), text)

    def expressions(self) -> list[Expr]:
        return [self.expr]

    def pdf(self, s_next, s, u=None):
        shape = np.broadcast_shapes(s_next.shape[:-1], _lead_shape(s, u))
        val = eval_ast(self.expr, _bindings(s, u, s_next))
        val = np.broadcast_to(np.asarray(val, dtype=float), shape)
        if np.any(val < 0):
            raise KernelError("user density evaluated to a negative value")
        return val


Kernel = Union[LinearGaussian, NonlinearGaussian, UserDensity]


def is_gaussian(kernel: Kernel) -> bool:
    return isinstance(kernel, (LinearGaussian, NonlinearGaussian))


def kernel_variables(kernel: Kernel) -> set[str]:
    if isinstance(kernel, LinearGaussian):
        names = set(state_vars(kernel.state_dim))
        if kernel.G is not None and np.any(kernel.G != 0):
            names |= set(input_vars(kernel.input_dim))
        return names
    out: set[str] = set()
    for e in kernel.expressions():
        out |= free_variables(e)
    return out


@dataclass(frozen=True)
class Model:
    state_space: Box
    kernel: Kernel
    input_space: Optional[Box] = None

    @property
    def n(self) -> int:
        return self.state_space.dims

    @property
    def m(self) -> int:
        return 0 if self.input_space is None else self.input_space.dims

    @property
    def controlled(self) -> bool:
        return self.input_space is not None


def validate_model(model: Model) -> list[str]:
    """Return a list of human-readable violations; empty means valid."""
    problems = []
    n, m = model.n, model.m
    if n > MAX_DIM:
        problems.append(f"state dimension {n} exceeds the supported maximum {MAX_DIM}")
    if m > MAX_DIM:
        problems.append(f"input dimension {m} exceeds the supported maximum {MAX_DIM}")
    k = model.kernel
    if isinstance(k, LinearGaussian):
        if k.A.shape != (n, n):
            problems.append(f"dimension mismatch: A has shape {k.A.shape}, expected ({n}, {n})")
        if k.B.shape != (n,):
            problems.append(f"dimension mismatch: B has length {k.B.size}, expected {n}")
        if k.Sigma.shape != (n, n):
            problems.append(f"dimension mismatch: Sigma has shape {k.Sigma.shape}, expected ({n}, {n})")
        elif not np.allclose(k.Sigma, k.Sigma.T, rtol=0, atol=1e-12):
            problems.append("Sigma not symmetric")
        elif np.min(np.linalg.eigvalsh(k.Sigma)) <= 0:
            problems.append("Sigma not positive-definite")
        if k.G is not None:
            if not model.controlled:
                problems.append("unbound input variable: G given but the model has no input space")
            elif k.G.shape != (n, m):
                problems.append(f"dimension mismatch: G has shape {k.G.shape}, expected ({n}, {m})")
        return problems

    if isinstance(k, NonlinearGaussian) and k.state_dim != n:
        problems.append(f"dimension mismatch: drift has {k.state_dim} components, state space has {n}")
    allowed_s = set(state_vars(n))
    allowed_sb = set(next_vars(n)) if isinstance(k, UserDensity) else set()
    allowed_u = set(input_vars(m))
    for name in sorted(kernel_variables(k)):
        if name in allowed_s or name in allowed_sb or name in allowed_u:
            continue
        if name.startswith("u") and not model.controlled:
            problems.append(f"unbound input variable {name!r}")
        else:
            problems.append(f"unknown variable {name!r}")
    return problems


def _vec(x, dim, name):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (dim,):
        raise ModelError(f"{name} must have length {dim}, got {x.size}")
    return x


def eval_density(kernel: Kernel, s_next, s, u=None) -> float:
    """Conditional density ``t(s_next | s, u)`` at a single point."""
    n = len(np.atleast_1d(s))
    s_next = _vec(s_next, n, "s_next")
    s = _vec(s, n, "s")
    if u is not None:
        u = np.atleast_1d(np.asarray(u, dtype=float))
    with np.errstate(all="ignore"):
        val = float(kernel.pdf(s_next, s, u))
    if not math.isfinite(val):
        raise KernelError(f"density is not finite at s={s.tolist()}, s_next={s_next.tolist()}")
    return val


def gaussian_mean_cov(kernel: Kernel, s, u=None) -> tuple[np.ndarray, np.ndarray]:
    if not is_gaussian(kernel):
        raise TypeError("gaussian_mean_cov requires a Gaussian kernel")
    s = np.atleast_1d(np.asarray(s, dtype=float))
    if u is not None:
        u = np.atleast_1d(np.asarray(u, dtype=float))
    mu, cov = kernel.mean_cov(s, u)
    return np.array(mu, dtype=float), np.array(cov, dtype=float)


def density_grid(kernel: Kernel, s_next: np.ndarray, s: np.ndarray, u: Optional[np.ndarray] = None) -> np.ndarray:
    """Vectorised density with numpy broadcasting over leading axes."""
    with np.errstate(all="ignore"):
        return np.asarray(kernel.pdf(s_next, s, u), dtype=float)
