"""JSON problem files.

Field names mirror the input boxes of a graphical front end, e.g.
``problem`` (problem selection), ``kernel`` (kernel distribution),
``gridding``/``assumption`` (gridding procedure / assumptions on kernel),
``horizon``/``errorBudget``, ``domain``/``safeSet``/``targetSet``/``inputSet``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .abstraction import LabelDef
from .expr import ExprError
from .lipschitz import SamplingConfig
from .model import Box, Kernel, LinearGaussian, Model, ModelError, NonlinearGaussian, UserDensity, validate_model

PROBLEMS = ("formula-free", "safety", "reach-avoid")
GRIDDINGS = ("uniform", "adaptive-local-matrix", "adaptive-local-vector")
ASSUMPTIONS = ("integral", "sample", "max-min")
EXPORTS = ("prism-explicit", "prism-module", "mrmc", "csv", "svg")
DEFAULT_MAX_CELLS = 20_000


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class ProblemSpec:
    problem: str
    kernel: Kernel
    controlled: bool
    gridding: str
    assumption: str
    horizon: int
    error_budget: float
    domain: Optional[Box]
    safe_set: Optional[Box]
    target_set: Optional[Box]
    input_set: Optional[Box]
    labels: list[LabelDef] = field(default_factory=list)
    exports: list[str] = field(default_factory=list)
    initial_states: list[list[float]] = field(default_factory=list)
    objective: str = "max"
    quad_order: int = 5
    max_cells: int = DEFAULT_MAX_CELLS
    seed: int = 0
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def region(self) -> Box:
        """Box that gets partitioned."""
        if self.problem == "formula-free":
            return self.domain
        if self.problem == "safety":
            return self.safe_set
        if self.domain is not None:
            return self.domain
        lo = np.minimum(self.safe_set.lo, self.target_set.lo)
        hi = np.maximum(self.safe_set.hi, self.target_set.hi)
        return Box(tuple(lo.tolist()), tuple(hi.tolist()))

    @property
    def model(self) -> Model:
        return Model(self.region, self.kernel, self.input_set if self.controlled else None)


def _box(raw: dict, key: str, errors: list) -> Optional[Box]:
    if raw.get(key) is None:
        return None
    try:
        return Box.from_bounds(raw[key])
    except (ModelError, TypeError, ValueError) as exc:
        errors.append(f"{key}: {exc}")
        return None


def _kernel(raw: Any, errors: list) -> Optional[Kernel]:
    if not isinstance(raw, dict):
        errors.append("kernel: missing or not an object")
        return None
    kind = raw.get("type")
    try:
        if kind == "linear-gaussian":
            missing = [k for k in ("A", "B", "Sigma") if k not in raw]
            if missing:
                errors.append(f"kernel: missing {', '.join(missing)}")
                return None
            return LinearGaussian(raw["A"], raw["B"], raw["Sigma"], raw.get("G"))
        if kind == "nonlinear-gaussian":
            if "drift" not in raw or "variance" not in raw:
                errors.append("kernel: nonlinear-gaussian needs drift and variance")
                return None
            return NonlinearGaussian.from_strings(raw["drift"], raw["variance"])
        if kind == "user-defined":
            if "density" not in raw:
                errors.append("kernel: user-defined needs density")
                return None
            return UserDensity.from_string(raw["density"])
    except (ExprError, ModelError, ValueError, TypeError) as exc:
        errors.append(f"kernel: {exc}")
        return None
    errors.append(f"kernel.type: expected one of linear-gaussian, nonlinear-gaussian, user-defined, got {kind!r}")
    return None


def _inside(inner: Box, outer: Box) -> bool:
    return bool(np.all(inner.lo >= outer.lo) and np.all(inner.hi <= outer.hi))


def parse_config(text: str) -> ProblemSpec:
    """Parse and validate a problem file; raises :class:`ConfigError` listing every problem."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"JSON syntax: {exc}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be an object"])
    errors: list[str] = []

    problem = raw.get("problem", "formula-free")
    if problem not in PROBLEMS:
        errors.append(f"problem: expected one of {', '.join(PROBLEMS)}")
    kernel = _kernel(raw.get("kernel"), errors)
    domain = _box(raw, "domain", errors)
    safe = _box(raw, "safeSet", errors)
    target = _box(raw, "targetSet", errors)
    inputs = _box(raw, "inputSet", errors)
    controlled = bool(raw.get("controlled", inputs is not None))

    if problem == "formula-free" and domain is None and "domain" not in raw:
        errors.append("domain: required for formula-free problems")
    if problem in ("safety", "reach-avoid") and safe is None and "safeSet" not in raw:
        errors.append("safeSet: required for safety and reach-avoid problems")
    if problem == "reach-avoid" and target is None and "targetSet" not in raw:
        errors.append("targetSet: required for reach-avoid problems")
    if controlled and inputs is None and "inputSet" not in raw:
        errors.append("inputSet: required for controlled models")
    if not controlled and inputs is not None:
        errors.append("inputSet: given but controlled is false")
    if problem in ("safety", "reach-avoid") and domain is not None:
        for key, box in (("safeSet", safe), ("targetSet", target)):
            if box is not None and box.dims == domain.dims and not _inside(box, domain):
                errors.append(f"{key}: must lie inside domain")

    horizon = raw.get("horizon", 1 if problem == "formula-free" else None)
    if not isinstance(horizon, int) or isinstance(horizon, bool) or horizon < 1:
        errors.append("horizon: must be an integer >= 1")
    eps = raw.get("errorBudget")
    if not isinstance(eps, (int, float)) or isinstance(eps, bool) or not eps > 0:
        errors.append("errorBudget: must be a positive number")

    gridding = raw.get("gridding", "uniform")
    if gridding not in GRIDDINGS:
        errors.append(f"gridding: expected one of {', '.join(GRIDDINGS)}")
    assumption = raw.get("assumption", "integral")
    if assumption not in ASSUMPTIONS:
        errors.append(f"assumption: expected one of {', '.join(ASSUMPTIONS)}")
    if assumption == "sample" and gridding != "uniform":
        errors.append("assumption: sample is supported with uniform gridding only")
    if assumption == "max-min" and gridding != "uniform" and controlled:
        errors.append("assumption: max-min with adaptive gridding is supported for uncontrolled models only")
    objective = raw.get("objective", "max")
    if objective not in ("max", "min"):
        errors.append("objective: expected max or min")

    exports = raw.get("exports", [])
    if not isinstance(exports, list) or any(e not in EXPORTS for e in exports):
        errors.append(f"exports: entries must be among {', '.join(EXPORTS)}")
        exports = []
    if "mrmc" in exports and controlled:
        errors.append("exports: mrmc supports uncontrolled models only; use prism-explicit or prism-module")

    spec_region = {"formula-free": domain, "safety": safe}.get(problem, domain or safe)
    n = spec_region.dims if spec_region is not None else None
    for key, box in (("safeSet", safe), ("targetSet", target), ("domain", domain)):
        if box is not None and n is not None and box.dims != n:
            errors.append(f"{key}: has {box.dims} dimensions, expected {n}")

    labels = []
    for k, lab in enumerate(raw.get("labels", [])):
        try:
            ld = LabelDef(str(lab["symbol"]), lab["A"], lab["B"])
        except (KeyError, TypeError, ValueError) as exc:
            errors.append(f"labels[{k}]: {exc}")
            continue
        if n is not None and len(ld.A[0]) != n:
            errors.append(f"labels[{k}]: A must have {n} columns")
        if ld.symbol in ("init", "phi"):
            errors.append(f"labels[{k}]: symbol {ld.symbol!r} is reserved")
        labels.append(ld)

    s0s = raw.get("initialStates", [])
    for k, s0 in enumerate(s0s):
        if not isinstance(s0, list) or (n is not None and len(s0) != n):
            errors.append(f"initialStates[{k}]: must be a list of {n} numbers")

    ints = {}
    for key, default, lo in (("quadratureOrder", 5, 1), ("maxCells", DEFAULT_MAX_CELLS, 1), ("seed", 0, 0)):
        val = raw.get(key, default)
        if not isinstance(val, int) or isinstance(val, bool) or val < lo:
            errors.append(f"{key}: must be an integer >= {lo}")
            val = default
        ints[key] = val

    sampling = SamplingConfig()
    if "lipschitz" in raw:
        try:
            sampling = SamplingConfig(**{
                {"points": "points", "inflation": "inflation", "fdStep": "fd_step",
                 "polish": "polish"}[k]: v for k, v in raw["lipschitz"].items()})
        except (KeyError, TypeError) as exc:
            errors.append(f"lipschitz: unknown or malformed field {exc}")
        if sampling.inflation < 1:
            errors.append("lipschitz.inflation: must be >= 1")

    if errors:
        raise ConfigError(errors)

    spec = ProblemSpec(
        problem=problem, kernel=kernel, controlled=controlled, gridding=gridding, assumption=assumption,
        horizon=horizon, error_budget=float(eps), domain=domain, safe_set=safe, target_set=target,
        input_set=inputs, labels=labels, exports=list(exports), initial_states=[list(map(float, s)) for s in s0s],
        objective=objective, quad_order=ints["quadratureOrder"], max_cells=ints["maxCells"],
        seed=ints["seed"], sampling=sampling, raw=raw)
    problems = validate_model(spec.model)
    if problems:
        raise ConfigError([f"kernel: {p}" for p in problems])
    return spec


def load_config(path) -> ProblemSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
