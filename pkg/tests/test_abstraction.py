import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from stochabs.abstraction import (
    AbstractModel,
    LabelDef,
    assign_labels,
    build_mc,
    build_mdp,
    transition_row,
)
from stochabs.lipschitz import global_next_state_lipschitz
from stochabs.marginal import IntegrationAccuracyError, cell_probabilities
from stochabs.model import Box, LinearGaussian, Model, NonlinearGaussian, UserDensity
from stochabs.partition import uniform_partition

UNIT = LinearGaussian([[1.0]], [0.0], [[1.0]])
FLAT = UserDensity.from_string("1")
ROOM_DRIFT = ["s1 + (1/50)*((s2 - s1)*u1 + (30 - s1)*0.75)", "s2 + (1/50)*((s1 - s2)*u1 - 7.5)"]
ROOM = NonlinearGaussian.from_strings(ROOM_DRIFT, [["0.3", "0"], ["0", "0.3"]])
SAFE = Box.from_bounds([[19.7, 20.3], [4.7, 5.3]])


def cdf_row(rep, part, mean_scale=1.0, shift=0.0, sd=1.0):
    mu = mean_scale * rep + shift
    probs = [norm.cdf((hi - mu) / sd) - norm.cdf((lo - mu) / sd) for lo, hi in zip(part.lower[:, 0], part.upper[:, 0])]
    return np.array(probs + [1 - sum(probs)])


def assert_stochastic(T):
    mats = T[None] if T.ndim == 2 else T
    assert np.all(mats >= 0) and np.all(mats <= 1)
    np.testing.assert_allclose(mats.sum(axis=-1), 1.0, rtol=0, atol=1e-9)
    assert np.all(mats[:, -1, -1] == 1.0)
    assert np.all(mats[:, -1, :-1] == 0.0)


class TestTransitionRow:
    def test_flat_two_cells(self):
        row = transition_row(FLAT, [0.3], uniform_partition(Box((0.0,), (1.0,)), [2]))
        np.testing.assert_allclose(row, [0.5, 0.5, 0.0], atol=1e-15)

    def test_unit_gaussian_cdf(self):
        part = uniform_partition(Box((0.0,), (1.0,)), [2])
        row = transition_row(UNIT, [0.5], part)
        oracle = cdf_row(0.5, part)
        np.testing.assert_allclose(row, oracle, rtol=1e-12)
        np.testing.assert_allclose(row, [0.19146, 0.19146, 0.61708], atol=5e-6)

    def test_sample_mode_flat(self):
        part = uniform_partition(Box((0.0,), (1.0,)), [2])
        a = transition_row(FLAT, [0.3], part, mode="sample")
        b = transition_row(FLAT, [0.3], part, mode="integral")
        np.testing.assert_array_equal(a, [0.5, 0.5, 0.0])
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_unnormalised_density_rejected(self):
        with pytest.raises(IntegrationAccuracyError):
            transition_row(UserDensity.from_string("3"), [0.5], uniform_partition(Box((0.0,), (1.0,)), [2]))

    def test_sample_overshoot_renormalised_with_warning(self):
        m = Model(Box((0.0,), (1.0,)), UserDensity.from_string("1.05"))
        abst = build_mc(m, uniform_partition(m.state_space, [4]), mode="sample")
        assert_stochastic(abst.T)
        assert abst.warnings and "renormalised" in abst.warnings[0]

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            transition_row(UNIT, [0.5], uniform_partition(Box((0.0,), (1.0,)), [2]), mode="trapezoid")


class TestBuildMC:
    def test_single_flat_cell(self):
        m = Model(Box((0.0,), (1.0,)), FLAT)
        abst = build_mc(m, uniform_partition(m.state_space, [1]))
        np.testing.assert_allclose(abst.T, [[1.0, 0.0], [0.0, 1.0]], atol=1e-15)
        assert abst.kind == "MC" and abst.phi == 1

    def test_gaussian_rows_match_cdf(self):
        m = Model(Box((-1.0,), (1.0,)), LinearGaussian([[0.9]], [0.0], [[0.2]]))
        part = uniform_partition(m.state_space, [4])
        abst = build_mc(m, part)
        assert_stochastic(abst.T)
        for i, rep in enumerate(part.reps[:, 0]):
            np.testing.assert_allclose(abst.T[i], cdf_row(rep, part, 0.9, 0.0, np.sqrt(0.2)), atol=1e-6)

    def test_quadrature_path_matches_direct_integration(self):
        # non-diagonal covariance forces Gauss-Legendre quadrature
        k = LinearGaussian([[0.8, 0.3], [-0.1, 0.9]], [0, 0], [[0.2, 0.05], [0.05, 0.1]])
        part = uniform_partition(Box((-1.0, -1.0), (1.0, 1.0)), [4, 4])
        abst = build_mc(Model(part.domain, k), part)
        assert_stochastic(abst.T)
        rep = part.reps[5]
        for j in (0, 5, 6, 10):
            lo, hi = part.lower[j], part.upper[j]
            f = lambda y, x: float(k.pdf(np.array([x, y]), rep))  # noqa: E731
            want = integrate.dblquad(f, lo[0], hi[0], lo[1], hi[1], epsabs=1e-12, epsrel=1e-12)[0]
            assert abs(abst.T[5, j] - want) < 1e-6

    def test_user_density_matches_gaussian(self):
        user = UserDensity.from_string("exp(-(sb1-0.9*s1)^2/(2*0.2))/sqrt(2*pi*0.2)")
        lin = LinearGaussian([[0.9]], [0.0], [[0.2]])
        part = uniform_partition(Box((-1.0,), (1.0,)), [16])
        a = build_mc(Model(part.domain, user), part).T
        b = build_mc(Model(part.domain, lin), part).T
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_rejects_controlled(self):
        m = Model(Box((0.0,), (1.0,)), FLAT, Box((0.0,), (1.0,)))
        with pytest.raises(ValueError):
            build_mc(m, uniform_partition(m.state_space, [2]))

    @pytest.mark.parametrize("mode", ["integral", "sample"])
    @pytest.mark.parametrize("kernel,dom,counts", [
        (UNIT, Box((-1.0,), (1.0,)), [7]),
        (NonlinearGaussian.from_strings(["s1"], [["0.1+0.9*s1"]]), Box((0.0,), (1.0,)), [9]),
        (NonlinearGaussian.from_strings(["0.5*s1", "s2 + 0.1*s1"], [["0.2", "0"], ["0.05", "0.3"]]),
         Box((-1.0, -1.0), (1.0, 1.0)), [3, 5]),
    ])
    def test_row_stochastic_every_mode(self, kernel, dom, counts, mode):
        abst = build_mc(Model(dom, kernel), uniform_partition(dom, counts), mode)
        assert_stochastic(abst.T)

    def test_mode_agreement_bound(self):
        k = NonlinearGaussian.from_strings(["0.9*s1"], [["0.5"]])
        dom = Box((-1.0,), (1.0,))
        part = uniform_partition(dom, [10])
        integ = build_mc(Model(dom, k), part, "integral").T[:-1, :-1]
        samp = build_mc(Model(dom, k), part, "sample").T[:-1, :-1]
        h_next = global_next_state_lipschitz(k, dom).value
        bound = 2 * h_next * part.diameters * part.volumes
        assert np.all(np.abs(integ - samp) <= bound[None, :])

    def test_mode_agreement_exact_for_flat_next_state(self):
        k = UserDensity.from_string("0.5 + 0.0*s1")
        dom = Box((0.0,), (2.0,))
        part = uniform_partition(dom, [4])
        a = build_mc(Model(dom, k), part, "integral").T
        b = build_mc(Model(dom, k), part, "sample").T
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_refinement_consistency(self):
        dom = Box((-1.0,), (1.0,))
        k = LinearGaussian([[0.9]], [0.0], [[0.2]])
        coarse = uniform_partition(dom, [4])
        fine = uniform_partition(dom, [8])
        rows = cell_probabilities(k, coarse.reps, fine)
        merged = rows.reshape(4, 4, 2).sum(axis=2)
        coarse_T = build_mc(Model(dom, k), coarse).T[:-1, :-1]
        np.testing.assert_allclose(merged, coarse_T, atol=1e-6)

    def test_refinement_consistency_quadrature(self):
        dom = Box((-1.0,), (1.0,))
        k = UserDensity.from_string("exp(-(sb1-0.9*s1)^2/(2*0.2))/sqrt(2*pi*0.2)")
        coarse = uniform_partition(dom, [4])
        fine = uniform_partition(dom, [8])
        merged = cell_probabilities(k, coarse.reps, fine).reshape(4, 4, 2).sum(axis=2)
        np.testing.assert_allclose(merged, build_mc(Model(dom, k), coarse).T[:-1, :-1], atol=1e-6)

    def test_thread_cap_does_not_change_result(self, monkeypatch):
        dom = Box((-1.0,), (1.0,))
        part = uniform_partition(dom, [40])
        k = NonlinearGaussian.from_strings(["0.9*s1"], [["0.4"]])
        monkeypatch.setenv("FAUST_THREADS", "1")
        a = build_mc(Model(dom, k), part).T
        monkeypatch.setenv("FAUST_THREADS", "4")
        b = build_mc(Model(dom, k), part).T
        np.testing.assert_array_equal(a, b)


class TestBuildMDP:
    def test_input_free_kernel(self):
        m = Model(Box((-1.0,), (1.0,)), UNIT, Box((0.0,), (1.0,)))
        abst = build_mdp(m, uniform_partition(m.state_space, [3]), uniform_partition(m.input_space, [3]))
        assert abst.kind == "MDP" and abst.num_inputs == 3
        assert_stochastic(abst.T)
        assert np.all(abst.T == abst.T[0])

    def test_flat_single_cell_two_inputs(self):
        m = Model(Box((0.0,), (1.0,)), FLAT, Box((0.0,), (1.0,)))
        abst = build_mdp(m, uniform_partition(m.state_space, [1]), uniform_partition(m.input_space, [2]))
        for T in abst.T:
            np.testing.assert_allclose(T, np.eye(2), atol=1e-15)
        np.testing.assert_allclose(abst.input_points[:, 0], [0.25, 0.75])

    def test_room_inputs_differ(self):
        m = Model(SAFE, ROOM, Box((0.0,), (1.0,)))
        abst = build_mdp(m, uniform_partition(SAFE, [6, 6]), uniform_partition(m.input_space, [2]))
        assert_stochastic(abst.T)
        np.testing.assert_allclose(abst.input_points[:, 0], [0.25, 0.75])
        assert np.max(np.abs(abst.T[0] - abst.T[1])) > 0

    def test_rejects_uncontrolled(self):
        m = Model(Box((0.0,), (1.0,)), FLAT)
        with pytest.raises(ValueError):
            build_mdp(m, uniform_partition(m.state_space, [1]), uniform_partition(Box((0.0,), (1.0,)), [1]))


class TestLabels:
    def _mc(self, counts=(2,), dom=Box((0.0,), (1.0,))):
        return build_mc(Model(dom, FLAT if dom.dims == 1 else UserDensity.from_string("1")),
                        uniform_partition(dom, list(counts)))

    def test_half_line(self):
        out = assign_labels(self._mc(), [LabelDef("low", [[1.0]], [0.5])])
        assert out.labels["low"] == {0}
        assert out.state_labels(0) == ["low"] and out.state_labels(out.phi) == []

    def test_empty_region(self):
        out = assign_labels(self._mc(), [LabelDef("none", [[1.0], [-1.0]], [0.0, -1.0])])
        assert out.labels["none"] == frozenset()

    def test_room_safe_box(self):
        # 0.3-wide cells: the inner 2 x 2 block tiles the safe set exactly
        dom = Box.from_bounds([[19.4, 20.6], [4.4, 5.6]])
        part = uniform_partition(dom, [4, 4])
        abst = AbstractModel("MC", part, np.eye(len(part) + 1))
        out = assign_labels(abst, [LabelDef.box("safe", [[19.7, 20.3], [4.7, 5.3]])])
        assert out.labels["safe"] == {5, 6, 9, 10}
        for i in out.labels["safe"]:
            lo, hi = part.lower[i], part.upper[i]
            assert np.all(lo >= SAFE.lo - 1e-12) and np.all(hi <= SAFE.hi + 1e-12)

    def test_idempotent_and_order_free(self):
        abst = self._mc((6,))
        a = LabelDef("a", [[1.0]], [0.6])
        b = LabelDef("b", [[-1.0]], [-0.3])
        one = assign_labels(abst, [a, b])
        two = assign_labels(assign_labels(abst, [b, a]), [a, b])
        assert one.labels == two.labels
        assert one.state_labels(2) == ["a", "b"]

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            assign_labels(self._mc(), [LabelDef("x", [[1.0, 0.0]], [0.5])])
        with pytest.raises(ValueError):
            LabelDef("x", [[1.0]], [0.5, 1.0])
