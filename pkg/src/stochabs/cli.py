"""Command-line driver: problem file in, abstraction + verification results out."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .abstraction import AbstractModel, assign_labels, build_mc, build_mdp
from .config import ConfigError, ProblemSpec, load_config
from .export import ExportError, write_mrmc, write_prism_explicit, write_prism_module, write_results
from .expr import ExprError
from .gridding import (
    BudgetExceededError,
    CapacityError,
    ErrorCertificate,
    adaptive_refine,
    cells_per_dim,
    delta_for_error,
    maxmin_error_bounds,
    uniform_certificate,
)
from .lipschitz import global_input_lipschitz, global_next_state_lipschitz, global_state_lipschitz
from .marginal import cell_probabilities
from .model import Box, ModelError
from .partition import DEFAULT_MAX_CELLS as HARD_CAP
from .partition import Cell, Partition, uniform_partition
from .verification import (
    query_initial,
    reach_avoid_dp_mc,
    reach_avoid_dp_mdp,
    safety_dp_mc,
    safety_dp_mdp,
    ValueFunction,
)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_VALIDATION, EXIT_CAPACITY, EXIT_NUMERICAL = 0, 1, 2, 3
STATE_FILE = "abstraction.json"


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, CapacityError):
        return EXIT_CAPACITY
    if isinstance(exc, (ConfigError, ModelError, ExportError)):
        return EXIT_VALIDATION
    if isinstance(exc, (ArithmeticError, ExprError)):
        return EXIT_NUMERICAL
    raise exc


@dataclass
class Build:
    """Everything produced before verification."""

    model: AbstractModel
    partition: Partition
    input_partition: Optional[Partition]
    certificate: ErrorCertificate
    lipschitz: dict
    predicted: Optional[tuple[int, int]] = None
    notes: list = field(default_factory=list)


def lipschitz_constants(spec: ProblemSpec) -> dict:
    region = spec.region
    inputs = spec.input_set if spec.controlled else None
    out = {"h_s": global_state_lipschitz(spec.kernel, region, inputs, spec.sampling)}
    if spec.controlled:
        out["h_u"] = global_input_lipschitz(spec.kernel, region, inputs, spec.sampling)
    if spec.assumption == "sample":
        out["h_next"] = global_next_state_lipschitz(spec.kernel, region, inputs, spec.sampling)
    return out


def predict_uniform(spec: ProblemSpec, lip: dict):
    """Cell counts per dimension of the uniform grid meeting the budget."""
    h_u = lip["h_u"].value if spec.controlled else None
    d_s, d_u = delta_for_error(spec.error_budget, spec.horizon, lip["h_s"].value, spec.region.volume, h_u)
    cs = cells_per_dim(spec.region, d_s)
    cu = cells_per_dim(spec.input_set, d_u) if spec.controlled else None
    return cs, cu


def _check_capacity(spec: ProblemSpec, count: int, what: str, force: bool):
    if count > spec.max_cells and not force:
        raise CapacityError(f"{count} {what} predicted, above maxCells={spec.max_cells}; "
                            "raise maxCells or pass --force", count, spec.max_cells)


def _sample_term(spec, part: Partition, h_next: float) -> np.ndarray:
    """Extra error of point-sampled marginals: N * h' * sum_j diam_j vol_j for every source cell."""
    extra = spec.horizon * h_next * float(np.sum(part.diameters * part.volumes))
    return np.full(len(part), extra)


def _doubling(spec: ProblemSpec, lip: dict, cap: int):
    """Uniform grids refined by doubling until the sampled certificate meets the budget."""
    n = spec.region.dims
    counts = [2] * n
    ucounts = [2] * spec.input_set.dims if spec.controlled else None
    while True:
        part = uniform_partition(spec.region, counts, cap)
        upart = uniform_partition(spec.input_set, ucounts, cap) if ucounts else None
        cert = maxmin_error_bounds(spec.kernel, part, spec.horizon, input_partition=upart,
                                   quad_order=spec.quad_order)
        per_cell = cert.per_cell_error
        notes = []
        if spec.assumption == "sample":
            per_cell = per_cell + _sample_term(spec, part, lip["h_next"].value)
            notes.append("includes point-sampling term")
        cert = ErrorCertificate("max-min", per_cell, float(per_cell.max()), spec.horizon, tuple(notes))
        if cert.global_error <= spec.error_budget:
            return part, upart, cert
        counts = [2 * c for c in counts]
        if ucounts:
            ucounts = [2 * c for c in ucounts]
        if math.prod(counts) > cap or (ucounts and math.prod(ucounts) > cap):
            raise BudgetExceededError(f"doubling refinement needs more than {cap} cells "
                                      f"(best error {cert.global_error:.6g})", part, cert, cap)


def build_abstraction(spec: ProblemSpec, force: bool = False) -> Build:
    lip = lipschitz_constants(spec)
    cap = HARD_CAP if force else spec.max_cells
    N, eps = spec.horizon, spec.error_budget
    model = spec.model
    predicted = None
    upart = None

    if spec.assumption != "integral" and spec.gridding == "uniform":
        part, upart, cert = _doubling(spec, lip, cap)
    elif spec.gridding == "uniform":
        cs, cu = predict_uniform(spec, lip)
        predicted = (math.prod(cs), math.prod(cu) if cu else 0)
        _check_capacity(spec, predicted[0], "state cells", force)
        _check_capacity(spec, predicted[1], "input cells", force)
        part = uniform_partition(spec.region, cs, HARD_CAP)
        if spec.controlled:
            upart = uniform_partition(spec.input_set, cu, HARD_CAP)
            cert = uniform_certificate(part, N, lip["h_s"].value, lip["h_u"].value, upart.max_diameter)
        else:
            cert = uniform_certificate(part, N, lip["h_s"].value)
    else:
        mode = "max-min" if spec.assumption == "max-min" else spec.gridding.replace("adaptive-", "")
        if spec.controlled:
            # half of the budget goes to the input grid, the state grid gets the rest
            h_u = lip["h_u"].value
            _, d_u = delta_for_error(eps, N, lip["h_s"].value, spec.region.volume, h_u)
            cu = cells_per_dim(spec.input_set, d_u)
            _check_capacity(spec, math.prod(cu), "input cells", force)
            upart = uniform_partition(spec.input_set, cu, HARD_CAP)
            e_u = 2 * N * h_u * upart.max_diameter * spec.region.volume
            part, cert = adaptive_refine(spec.kernel, spec.region, N, eps - e_u, mode, cap, spec.input_set,
                                         spec.sampling, scale=2.0, quad_order=spec.quad_order)
            per_cell = cert.per_cell_error + e_u
            cert = ErrorCertificate(cert.mode, per_cell, float(per_cell.max()), N,
                                    (f"input grid term {e_u!r}",))
        else:
            part, cert = adaptive_refine(spec.kernel, spec.region, N, eps, mode, cap, None,
                                         spec.sampling, quad_order=spec.quad_order)

    mode = "sample" if spec.assumption == "sample" else "integral"
    if spec.controlled:
        abst = build_mdp(model, part, upart, mode, cert, spec.quad_order)
    else:
        abst = build_mc(model, part, mode, cert, spec.quad_order)
    abst = assign_labels(abst, spec.labels)
    return Build(abst, part, upart, cert, lip, predicted)


def _solve(spec: ProblemSpec, abst: AbstractModel):
    """Value function and policy for safety / reach-avoid; (None, None) when formula-free."""
    N = spec.horizon
    reps = abst.partition.reps
    if spec.problem == "formula-free":
        return None, None
    if spec.problem == "safety":
        safe = range(len(abst.partition))
        if spec.controlled:
            return safety_dp_mdp(abst, safe, N, spec.objective)
        return safety_dp_mc(abst, safe, N), None
    inside = lambda box: np.flatnonzero(np.all((reps >= box.lo) & (reps <= box.hi), axis=1)).tolist()  # noqa: E731
    phi_idx, psi_idx = inside(spec.safe_set), inside(spec.target_set)
    if spec.controlled:
        return reach_avoid_dp_mdp(abst, phi_idx, psi_idx, N, spec.objective)
    return reach_avoid_dp_mc(abst, phi_idx, psi_idx, N), None


def _state_dump(spec: ProblemSpec, abst: AbstractModel, values) -> dict:
    part = abst.partition
    return {
        "problem": spec.problem,
        "lower": part.lower.tolist(),
        "upper": part.upper.tolist(),
        "domain": part.domain.bounds(),
        "values": None if values is None else values.initial[:len(part)].tolist(),
        "labels": {k: sorted(v) for k, v in sorted(abst.labels.items())},
    }


def run(spec: ProblemSpec, out_dir=None, force: bool = False) -> dict:
    """Full pipeline.  Failures come back as a report with a nonzero ``exitCode``."""
    t0 = time.perf_counter()
    timing = {}
    report: dict = {"status": "ok", "exitCode": EXIT_OK, "problem": spec.problem,
                    "errorBudget": spec.error_budget, "horizon": spec.horizon, "warnings": []}
    out = Path(out_dir) if out_dir is not None else None
    try:
        build = build_abstraction(spec, force)
        timing["abstraction"] = time.perf_counter() - t0
        abst, cert = build.model, build.certificate
        if not cert.global_error <= spec.error_budget:
            raise ArithmeticError(f"achieved error {cert.global_error!r} exceeds the budget")
        report.update({
            "modelKind": abst.kind,
            "achievedError": cert.global_error,
            "certificate": cert.to_dict(),
            "lipschitz": {k: {"value": v.value, "method": v.method} for k, v in build.lipschitz.items()},
            "stateCells": len(build.partition),
            "inputCells": 0 if build.input_partition is None else len(build.input_partition),
            "absorbingState": abst.phi,
        })
        if build.predicted is not None:
            report["predictedCells"] = {"state": build.predicted[0], "input": build.predicted[1]}
        report["warnings"] += list(abst.warnings)

        t1 = time.perf_counter()
        values, policy = _solve(spec, abst)
        timing["verification"] = time.perf_counter() - t1

        bundles = []
        if "prism-explicit" in spec.exports:
            bundles.append(write_prism_explicit(abst))
        if "prism-module" in spec.exports:
            bundles.append(write_prism_module(abst))
        if "mrmc" in spec.exports:
            bundles.append(write_mrmc(abst))
        wants_tables = {"csv", "svg"} & set(spec.exports)
        if wants_tables and values is None:
            report["warnings"].append("csv/svg outputs need a safety or reach-avoid problem; skipped")
        elif wants_tables:
            frame = spec.domain if spec.problem == "safety" else None
            res = write_results(values, policy, abst.partition, abst.input_points, svg="svg" in spec.exports,
                                frame=frame)
            if "csv" not in spec.exports:
                res = type(res)(tuple(f for f in res.files if not f.role.endswith("csv")))
            if "svg" in spec.exports and abst.partition.dims > 2:
                report["warnings"].append("heatmaps are available for 1-D and 2-D models only; skipped")
            bundles.append(res)

        queries = []
        for s0 in spec.initial_states:
            if values is None:
                queries.append({"s0": s0, "probability": None, "state": None, "labels": []})
                continue
            prob, idx, names = query_initial(values, abst.partition, s0, abst.labels)
            queries.append({"s0": s0, "probability": prob,
                            "state": "phi" if idx == abst.phi else idx, "labels": names})
        report["queries"] = queries

        outputs = []
        if out is not None:
            for b in bundles:
                outputs += [p.name for p in b.write(out)]
            (out / STATE_FILE).write_text(json.dumps(_state_dump(spec, abst, values)) + "\n", encoding="utf-8")
            outputs.append(STATE_FILE)
        report["outputs"] = outputs
        report["_build"] = build
        report["_values"] = values
        report["_policy"] = policy
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = exit_code_for(exc)
        report.update({"status": "error", "exitCode": code, "errorKind": type(exc).__name__, "message": str(exc)})
        if isinstance(exc, BudgetExceededError):
            report["bestCertificate"] = exc.certificate.to_dict()
            report["stateCells"] = len(exc.partition)
        if isinstance(exc, ConfigError):
            report["errors"] = exc.errors
    timing["total"] = time.perf_counter() - t0
    report["timing"] = timing
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        public = {k: v for k, v in report.items() if not k.startswith("_")}
        (out / "report.json").write_text(json.dumps(public, indent=2) + "\n", encoding="utf-8")
    return report


def estimate(spec: ProblemSpec, calibration_rows: int = 100) -> dict:
    """Predicted cell counts and an extrapolated build time from a small calibration sample."""
    lip = lipschitz_constants(spec)
    out = {"lipschitz": {k: v.value for k, v in lip.items()}}
    if spec.gridding != "uniform" or spec.assumption != "integral":
        out["note"] = "cell counts are fixed during refinement; no closed-form preview"
        return out
    cs, cu = predict_uniform(spec, lip)
    ns, nu = math.prod(cs), (math.prod(cu) if cu else 0)
    out.update({"stateCells": ns, "inputCells": nu, "cellsPerDim": cs, "inputCellsPerDim": cu,
                "withinMaxCells": ns <= spec.max_cells and nu <= spec.max_cells})
    if ns > HARD_CAP:
        out["estimatedSeconds"] = None
        return out
    part = uniform_partition(spec.region, cs, HARD_CAP)
    rng = np.random.default_rng(spec.seed)
    rows = min(calibration_rows, ns)
    pick = rng.choice(ns, size=rows, replace=False)
    u = None
    if spec.controlled:
        u = np.broadcast_to(spec.input_set.center, (rows, spec.input_set.dims))
    t = time.perf_counter()
    cell_probabilities(spec.kernel, part.reps[pick], part, u, "integral", spec.quad_order)
    per_row = (time.perf_counter() - t) / rows
    out["estimatedSeconds"] = per_row * ns * max(nu, 1)
    return out


def _load_partition(state: dict) -> Partition:
    cells = tuple(Cell.from_box(Box(tuple(lo), tuple(hi))) for lo, hi in zip(state["lower"], state["upper"]))
    return Partition(cells, Box.from_bounds(state["domain"]))


def query(run_dir, s0) -> dict:
    state = json.loads((Path(run_dir) / STATE_FILE).read_text(encoding="utf-8"))
    part = _load_partition(state)
    if state["values"] is None:
        raise ConfigError(["query: the run has no value function (formula-free problem)"])
    values = ValueFunction(np.array([state["values"] + [0.0]]))
    labels = {k: frozenset(v) for k, v in state["labels"].items()}
    prob, idx, names = query_initial(values, part, s0, labels)
    return {"s0": list(map(float, s0)), "probability": prob,
            "state": "phi" if idx == part.phi else idx, "labels": names}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochabs", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="build, verify and export")
    p.add_argument("config")
    p.add_argument("-o", "--out", default="out")
    p.add_argument("--force", action="store_true", help="ignore maxCells")
    p = sub.add_parser("validate", help="check a problem file")
    p.add_argument("config")
    p = sub.add_parser("estimate", help="preview cell counts and running time")
    p.add_argument("config")
    p = sub.add_parser("query", help="probability at an initial state of a finished run")
    p.add_argument("run_dir")
    p.add_argument("--s0", required=True, help="comma-separated coordinates")
    return ap


def cli_main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "query":
            s0 = [float(x) for x in args.s0.replace(" ", "").split(",") if x]
            print(json.dumps(query(args.run_dir, s0)))
            return EXIT_OK
        spec = load_config(args.config)
        if args.command == "validate":
            print(f"{args.config}: ok ({spec.problem}, {'controlled' if spec.controlled else 'uncontrolled'})")
            return EXIT_OK
        if args.command == "estimate":
            print(json.dumps(estimate(spec), indent=2))
            return EXIT_OK
        report = run(spec, args.out, args.force)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        code = exit_code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code
    if report["exitCode"] != EXIT_OK:
        print(f"error ({report['errorKind']}): {report['message']}", file=sys.stderr)
        return report["exitCode"]
    print(f"{report['modelKind']} with {report['stateCells']} state cells"
          + (f" x {report['inputCells']} input cells" if report["inputCells"] else "")
          + f"; achieved error {report['achievedError']:.6g} <= {spec.error_budget:g}")
    for q in report["queries"]:
        print(f"  s0={q['s0']}: probability {q['probability']} (state {q['state']})")
    for w in report["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    print(f"outputs in {args.out}/: {', '.join(report['outputs'])}")
    return EXIT_OK


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
