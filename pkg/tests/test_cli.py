import json
import math

import numpy as np
import pytest

from stochabs.cli import cli_main, estimate, run
from stochabs.config import ConfigError, parse_config
from stochabs.gridding import delta_for_error, estimate_cardinality
from stochabs.lipschitz import global_input_lipschitz, global_state_lipschitz

ROOM_KERNEL = {
    "type": "nonlinear-gaussian",
    "drift": ["s1 + (1/50)*((s2 - s1)*u1 + (30 - s1)*0.75)", "s2 + (1/50)*((s1 - s2)*u1 - 7.5)"],
    "variance": [["0.3", "0"], ["0", "0.3"]],
}
ROOM = {"problem": "safety", "kernel": ROOM_KERNEL, "controlled": True, "horizon": 3, "errorBudget": 0.5,
        "safeSet": [[19.7, 20.3], [4.7, 5.3]], "inputSet": [[0, 1]]}
GAUSS = {"problem": "safety", "kernel": {"type": "linear-gaussian", "A": [[0.9]], "B": [0.0], "Sigma": [[0.2]]},
         "horizon": 2, "errorBudget": 0.2, "safeSet": [[-1, 1]]}


def spec(d, **kw):
    return parse_config(json.dumps(dict(d, **kw)))


def write(tmp_path, d, name="p.json"):
    path = tmp_path / name
    path.write_text(json.dumps(d))
    return str(path)


class TestParse:
    def test_minimal_formula_free(self):
        s = parse_config('{"kernel": {"type": "user-defined", "density": "1"}, "domain": [[0, 1]], "errorBudget": 0.1}')
        assert s.problem == "formula-free" and s.horizon == 1 and not s.controlled

    def test_missing_target(self):
        d = dict(GAUSS, problem="reach-avoid")
        with pytest.raises(ConfigError) as info:
            parse_config(json.dumps(d))
        assert any("targetSet" in e for e in info.value.errors)

    def test_case_study(self):
        s = spec(ROOM)
        assert s.controlled and s.horizon == 3 and s.error_budget == 0.5
        assert s.region.bounds() == [[19.7, 20.3], [4.7, 5.3]]
        assert s.model.m == 1

    @pytest.mark.parametrize("patch,field", [
        ({"horizon": 0}, "horizon"),
        ({"horizon": 1.5}, "horizon"),
        ({"errorBudget": -1}, "errorBudget"),
        ({"gridding": "random"}, "gridding"),
        ({"assumption": "magic"}, "assumption"),
        ({"exports": ["pdf"]}, "exports"),
        ({"objective": "avg"}, "objective"),
        ({"controlled": True}, "inputSet"),
        ({"safeSet": [[1, 0]]}, "safeSet"),
        ({"labels": [{"symbol": "x", "A": [[1, 0]], "B": [1]}]}, "labels[0]"),
        ({"labels": [{"symbol": "phi", "A": [[1]], "B": [1]}]}, "labels[0]"),
        ({"initialStates": [[0.0, 1.0]]}, "initialStates[0]"),
        ({"kernel": {"type": "linear-gaussian", "A": [[1]], "B": [0], "Sigma": [[-1]]}}, "kernel"),
        ({"kernel": {"type": "nonlinear-gaussian", "drift": ["s1 +"], "variance": [["1"]]}}, "kernel"),
        ({"kernel": {"type": "spline"}}, "kernel.type"),
        ({"domain": [[0, 0.5]]}, "safeSet"),
        ({"maxCells": 0}, "maxCells"),
        ({"lipschitz": {"inflation": 0.5}}, "lipschitz.inflation"),
    ])
    def test_field_errors(self, patch, field):
        with pytest.raises(ConfigError) as info:
            spec(GAUSS, **patch)
        assert any(e.startswith(field) for e in info.value.errors), info.value.errors

    def test_json_syntax(self):
        with pytest.raises(ConfigError, match="JSON"):
            parse_config("{")

    def test_mrmc_needs_chain(self):
        with pytest.raises(ConfigError, match="mrmc"):
            spec(ROOM, exports=["mrmc"])


class TestRun:
    def test_constant_kernel(self, tmp_path):
        s = spec({"problem": "safety", "kernel": {"type": "user-defined", "density": "1"}, "horizon": 1,
                  "errorBudget": 0.5, "safeSet": [[0, 1]], "exports": ["csv"]})
        rep = run(s, tmp_path)
        assert rep["exitCode"] == 0 and rep["achievedError"] == 0.0
        assert np.all(rep["_values"].initial[:-1] == 1.0)
        assert rep["stateCells"] == 1

    def test_gaussian_budget(self, tmp_path):
        rep = run(spec(GAUSS), tmp_path)
        assert rep["exitCode"] == 0 and rep["achievedError"] <= 0.2
        assert rep["predictedCells"]["state"] == rep["stateCells"]
        saved = json.loads((tmp_path / "report.json").read_text())
        assert saved["achievedError"] == rep["achievedError"]
        assert "_build" not in saved

    @pytest.mark.parametrize("patch", [
        {"gridding": "adaptive-local-matrix"},
        {"gridding": "adaptive-local-vector"},
        {"assumption": "max-min"},
        {"assumption": "max-min", "gridding": "adaptive-local-matrix"},
        {"assumption": "sample", "errorBudget": 0.5},
    ])
    def test_modes_meet_budget(self, patch):
        s = spec(GAUSS, **patch)
        rep = run(s)
        assert rep["exitCode"] == 0, rep.get("message")
        assert rep["achievedError"] <= s.error_budget
        np.testing.assert_allclose(rep["_build"].model.T.sum(axis=1), 1.0, atol=1e-9)

    def test_controlled_adaptive(self):
        d = dict(GAUSS, kernel={"type": "linear-gaussian", "A": [[0.9]], "B": [0.0], "Sigma": [[0.2]], "G": [[0.3]]},
                 inputSet=[[-1, 1]], gridding="adaptive-local-matrix", errorBudget=0.5)
        rep = run(spec(d))
        assert rep["exitCode"] == 0 and rep["achievedError"] <= 0.5
        assert rep["modelKind"] == "MDP"

    def test_reach_avoid(self, tmp_path):
        d = {"problem": "reach-avoid", "kernel": GAUSS["kernel"], "horizon": 3, "errorBudget": 0.3,
             "safeSet": [[-1, 0.5]], "targetSet": [[0.5, 1]], "initialStates": [[0.75], [-0.5], [3.0]]}
        rep = run(spec(d), tmp_path)
        q = rep["queries"]
        assert q[0]["probability"] == 1.0
        assert 0 < q[1]["probability"] < 1
        assert q[2] == {"s0": [3.0], "probability": 0.0, "state": "phi", "labels": []}

    def test_formula_free(self, tmp_path):
        d = {"kernel": GAUSS["kernel"], "domain": [[-1, 1]], "errorBudget": 0.3, "exports": ["prism-explicit", "csv"]}
        rep = run(spec(d), tmp_path)
        assert rep["exitCode"] == 0
        assert "model.tra" in rep["outputs"] and "values.csv" not in rep["outputs"]
        assert rep["warnings"]

    def test_capacity(self, tmp_path):
        rep = run(spec(GAUSS, errorBudget=0.001, maxCells=100), tmp_path)
        assert rep["exitCode"] == 2 and rep["errorKind"] == "CapacityError"
        assert json.loads((tmp_path / "report.json").read_text())["exitCode"] == 2
        forced = run(spec(GAUSS, errorBudget=0.05, maxCells=100), force=True)
        assert forced["exitCode"] == 0 and forced["stateCells"] > 100

    def test_budget_exceeded_report(self):
        rep = run(spec(GAUSS, errorBudget=0.001, maxCells=50, gridding="adaptive-local-matrix"))
        assert rep["exitCode"] == 2
        assert rep["bestCertificate"]["globalError"] > 0.001

    def test_numerical_failure(self):
        d = dict(GAUSS, kernel={"type": "user-defined", "density": "3 + 0*s1"})
        rep = run(spec(d))
        assert rep["exitCode"] == 3 and rep["errorKind"] == "IntegrationAccuracyError"

    def test_deterministic_outputs(self, tmp_path):
        d = dict(GAUSS, exports=["prism-explicit", "csv", "mrmc"], seed=3)
        run(spec(d), tmp_path / "a")
        run(spec(d), tmp_path / "b")
        for name in ("model.tra", "values.csv", "mrmc.tra", "model.sta", "model.lab"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_estimate_matches_run(self):
        s = spec(GAUSS, errorBudget=0.1)
        est = estimate(s)
        rep = run(s)
        assert est["stateCells"] == rep["stateCells"] and est["inputCells"] == 0
        assert est["estimatedSeconds"] > 0


def test_case_study_estimate_counts():
    s = spec(ROOM)
    est = estimate(s)
    # oracle: invert the controlled uniform bound with the same constants, then count cells
    h_s = global_state_lipschitz(s.kernel, s.region, s.input_set).value
    h_u = global_input_lipschitz(s.kernel, s.region, s.input_set).value
    ds, du = delta_for_error(0.5, 3, h_s, s.region.volume, h_u)
    assert (est["stateCells"], est["inputCells"]) == estimate_cardinality(s.region, ds, s.input_set, du)
    side = ds / math.sqrt(2)
    assert est["cellsPerDim"] == [math.ceil(0.6 / side)] * 2


class TestMain:
    def test_validate_ok(self, tmp_path, capsys):
        assert cli_main(["validate", write(tmp_path, GAUSS)]) == 0
        assert "ok" in capsys.readouterr().out

    def test_validate_names_field(self, tmp_path, capsys):
        path = write(tmp_path, dict(GAUSS, problem="reach-avoid"))
        assert cli_main(["validate", path]) == 1
        assert "targetSet" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert cli_main(["validate", str(tmp_path / "nope.json")]) == 1

    def test_estimate(self, tmp_path, capsys):
        assert cli_main(["estimate", write(tmp_path, GAUSS)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["stateCells"] == run(spec(GAUSS))["stateCells"]

    def test_run_and_query(self, tmp_path, capsys):
        out_dir = tmp_path / "out"
        assert cli_main(["run", write(tmp_path, dict(GAUSS, exports=["csv"])), "-o", str(out_dir)]) == 0
        capsys.readouterr()
        assert cli_main(["query", str(out_dir), "--s0", "5.0"]) == 0
        res = json.loads(capsys.readouterr().out)
        assert res["probability"] == 0.0 and res["state"] == "phi"
        assert cli_main(["query", str(out_dir), "--s0", "0.01"]) == 0
        res = json.loads(capsys.readouterr().out)
        assert 0 < res["probability"] <= 1 and isinstance(res["state"], int)

    def test_run_exit_codes(self, tmp_path):
        assert cli_main(["run", write(tmp_path, dict(GAUSS, errorBudget=1e-4, maxCells=10)),
                         "-o", str(tmp_path / "o")]) == 2
        d = dict(GAUSS, kernel={"type": "user-defined", "density": "3 + 0*s1"})
        assert cli_main(["run", write(tmp_path, d, "n.json"), "-o", str(tmp_path / "n")]) == 3
