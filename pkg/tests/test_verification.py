import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_force, random_mdp
from stochabs.abstraction import AbstractModel, build_mc
from stochabs.model import Box, LinearGaussian, Model
from stochabs.partition import uniform_partition
from stochabs.verification import (
    query_initial,
    reach_avoid_dp_mc,
    reach_avoid_dp_mdp,
    safety_dp_mc,
    safety_dp_mdp,
)

TWO = AbstractModel.from_matrices([[0.9, 0.1], [0.0, 1.0]])
THREE = AbstractModel.from_matrices([[0.5, 0.3, 0.2], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
STAY = AbstractModel.from_matrices([[[0.9, 0.1], [0.0, 1.0]], [[0.5, 0.5], [0.0, 1.0]]])


class TestSafetyMC:
    def test_horizon_zero(self):
        m = AbstractModel.from_matrices(np.full((4, 4), 0.25))
        np.testing.assert_array_equal(safety_dp_mc(m, [0, 2], 0).initial, [1, 0, 1, 0])

    def test_identity(self):
        m = AbstractModel.from_matrices(np.eye(4))
        for N in (1, 3, 7):
            np.testing.assert_array_equal(safety_dp_mc(m, [1, 2], N).initial, [0, 1, 1, 0])

    def test_hand_expansion(self):
        v = safety_dp_mc(TWO, [0], 2)
        assert v.initial[0] == pytest.approx(0.81, abs=1e-15)
        assert v.values.shape == (3, 2)
        assert np.all(v.values[:, TWO.phi] == 0)

    def test_phi_not_allowed(self):
        with pytest.raises(ValueError):
            safety_dp_mc(TWO, [0, 1], 2)

    def test_negative_horizon(self):
        with pytest.raises(ValueError):
            safety_dp_mc(TWO, [0], -1)

    def test_rejects_mdp(self):
        with pytest.raises(ValueError):
            safety_dp_mc(STAY, [0], 1)


class TestReachAvoidMC:
    def test_target_is_immediate(self):
        for N in (0, 1, 4):
            assert reach_avoid_dp_mc(THREE, [0], [1], N).initial[1] == 1.0

    def test_unreachable_target(self):
        m = AbstractModel.from_matrices([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_array_equal(reach_avoid_dp_mc(m, [0], [1], 3).initial, [0, 1, 0])

    def test_hand_expansion(self):
        assert reach_avoid_dp_mc(THREE, [0], [1], 2).initial[0] == pytest.approx(0.45, abs=1e-15)

    def test_target_wins_overlap(self):
        v = reach_avoid_dp_mc(THREE, [0, 1], [1], 2)
        assert v.initial[1] == 1.0
        assert v.initial[0] == pytest.approx(0.45, abs=1e-15)

    def test_negative_horizon(self):
        with pytest.raises(ValueError):
            reach_avoid_dp_mc(THREE, [0], [1], -2)


class TestMDP:
    def test_identical_inputs(self):
        rng = np.random.default_rng(5)
        T = random_mdp(rng, 3, 1)[0]
        mdp = AbstractModel.from_matrices(np.stack([T, T]))
        mc = AbstractModel.from_matrices(T)
        v, pol = safety_dp_mdp(mdp, [0, 1, 2], 3)
        np.testing.assert_allclose(v.values, safety_dp_mc(mc, [0, 1, 2], 3).values, rtol=0, atol=1e-15)
        assert np.all(pol.choice == 0)

    def test_stay_max(self):
        v, pol = safety_dp_mdp(STAY, [0], 2, "max")
        assert v.initial[0] == pytest.approx(0.81, abs=1e-15)
        assert list(pol.choice[:, 0]) == [0, 0]

    def test_stay_min(self):
        v, pol = safety_dp_mdp(STAY, [0], 2, "min")
        assert v.initial[0] == pytest.approx(0.25, abs=1e-15)
        assert list(pol.choice[:, 0]) == [1, 1]

    def test_bad_objective(self):
        with pytest.raises(ValueError):
            safety_dp_mdp(STAY, [0], 2, "mean")

    def test_reach_target_regardless(self):
        rng = np.random.default_rng(2)
        m = AbstractModel.from_matrices(random_mdp(rng, 3, 2))
        for obj in ("max", "min"):
            v, _ = reach_avoid_dp_mdp(m, [0, 1], [2], 3, obj)
            assert np.all(v.values[:, 2] == 1.0)

    def test_single_input_equals_mc(self):
        rng = np.random.default_rng(4)
        T = random_mdp(rng, 3, 1)
        v, _ = reach_avoid_dp_mdp(AbstractModel.from_matrices(T), [0, 1], [2], 3)
        w = reach_avoid_dp_mc(AbstractModel.from_matrices(T[0]), [0, 1], [2], 3)
        np.testing.assert_array_equal(v.values, w.values)

    def test_routing_instance(self):
        # input 0 sends state 0 to the target, input 1 sends it to phi
        T = np.zeros((2, 4, 4))
        T[0, 0, 2] = 0.7
        T[0, 0, 1] = 0.3
        T[1, 0, 3] = 0.8
        T[1, 0, 0] = 0.2
        for a in range(2):
            T[a, 1, 1] = 1.0
            T[a, 2, 2] = 1.0
            T[a, 3, 3] = 1.0
        m = AbstractModel.from_matrices(T)
        v, pol = reach_avoid_dp_mdp(m, [0, 1], [2], 2, "max")
        assert pol.choice[0, 0] == 0
        keep = np.array([1, 1, 0, 0])
        win = np.array([0, 0, 1, 0])
        np.testing.assert_allclose(v.initial, brute_force(T, keep, win, 2, "max", win), rtol=0, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 2), st.integers(0, 3),
       st.sampled_from(["max", "min"]))
def test_dp_matches_enumeration(seed, p, q, N, objective):
    rng = np.random.default_rng(seed)
    T = random_mdp(rng, p, q)
    m = AbstractModel.from_matrices(T)
    safe = [z for z in range(p) if rng.random() < 0.8]
    v, _ = safety_dp_mdp(m, safe, N, objective)
    keep = np.array([1 if z in safe else 0 for z in range(p + 1)])
    np.testing.assert_allclose(v.initial, brute_force(T, keep, np.zeros(p + 1), N, objective, keep), rtol=0, atol=1e-12)

    psi = [z for z in range(p) if rng.random() < 0.4]
    phi_set = [z for z in range(p) if rng.random() < 0.7]
    v, _ = reach_avoid_dp_mdp(m, phi_set, psi, N, objective)
    win = np.array([1 if z in psi else 0 for z in range(p + 1)])
    keep = np.array([1 if (z in phi_set and z not in psi) else 0 for z in range(p + 1)])
    np.testing.assert_allclose(v.initial, brute_force(T, keep, win, N, objective, win), rtol=0, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_monotone_in_horizon_and_bounded(seed, p):
    rng = np.random.default_rng(seed)
    m = AbstractModel.from_matrices(random_mdp(rng, p, 1)[0])
    safe = list(range(p))
    s = [safety_dp_mc(m, safe, N).initial for N in range(6)]
    r = [reach_avoid_dp_mc(m, safe[1:], safe[:1], N).initial for N in range(6)]
    for a, b in zip(s, s[1:]):
        assert np.all(b <= a + 1e-15)
    for a, b in zip(r, r[1:]):
        assert np.all(b >= a - 1e-15)
    for v in s + r:
        assert np.all(v >= 0) and np.all(v <= 1 + 1e-12)


class TestQuery:
    def test_safe_cell_value(self):
        part = TWO.partition
        v = safety_dp_mc(TWO, [0], 2)
        prob, idx, labels = query_initial(v, part, [0.5], {"ok": {0}})
        assert prob == pytest.approx(0.81, abs=1e-15) and idx == 0 and labels == ["ok"]

    def test_outside(self):
        v = safety_dp_mc(TWO, [0], 2)
        assert query_initial(v, TWO.partition, [7.0]) == (0.0, TWO.phi, [])

    def test_boundary(self):
        dom = Box((-1.0,), (1.0,))
        part = uniform_partition(dom, [4])
        m = build_mc(Model(dom, LinearGaussian([[0.9]], [0.0], [[0.2]])), part)
        v = safety_dp_mc(m, range(4), 3)
        prob, idx, _ = query_initial(v, part, [0.0])
        assert idx == 1 and prob == v.initial[1]
