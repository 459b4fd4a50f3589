import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depolab.envs.gridworld import GridWorld, gridworld_expert, to_finite_mdp
from depolab.mdp import (
    FiniteMDP,
    MDPValidationError,
    OccupancyMeasures,
    TabularPolicy,
    counterexample_policies,
    find_redundancy_witness,
    load_mdp,
    marginal_planner,
    occupancy_measures,
    pair_system_matrix,
    planner_from_occupancy,
    policy_evaluation,
    q_evaluation,
    random_mdp,
    same_next_state_action_set,
    save_mdp,
    state_occupancy,
    transition_occupancy_direct,
    verify_column_dominance,
    verify_theorem1,
)


def one_state(discount=0.99, n_actions=2):
    return FiniteMDP(np.ones((1, n_actions, 1)), np.ones(1), discount)


def truncated_transition_om(mdp, pi, horizon):
    """Σ_{t<=horizon} γ^t P(s_t=s, s_{t+1}=s') by forward propagation."""
    P = np.einsum("sa,sat->st", pi.probs, mdp.transition)
    d = np.array(mdp.initial)
    total = np.zeros_like(P)
    g = 1.0
    for _ in range(horizon + 1):
        total += g * d[:, None] * P
        d = d @ P
        g *= mdp.discount
    return total


def monte_carlo_state_om(mdp, pi, n_rollouts, horizon, seed):
    rng = np.random.default_rng(seed)
    S, A = mdp.n_states, mdp.n_actions
    cum_pi = np.cumsum(pi.probs, axis=1)
    cum_T = np.cumsum(mdp.transition, axis=2)
    s = np.searchsorted(np.cumsum(mdp.initial), rng.uniform(size=n_rollouts))
    acc = np.zeros((n_rollouts, S))
    g = 1.0
    rows = np.arange(n_rollouts)
    for _ in range(horizon):
        acc[rows, s] += g
        a = np.minimum((rng.uniform(size=n_rollouts)[:, None] > cum_pi[s]).sum(1), A - 1)
        s = np.minimum((rng.uniform(size=n_rollouts)[:, None] > cum_T[s, a]).sum(1), S - 1)
        g *= mdp.discount
    return acc.mean(0), acc.std(0, ddof=1) / np.sqrt(n_rollouts)


class TestStateOccupancy:
    def test_single_state_geometric(self):
        rho = state_occupancy(one_state(), TabularPolicy.uniform(1, 2))
        assert rho[0] == pytest.approx(100.0, abs=1e-9)

    def test_two_state_chain(self):
        T = np.zeros((2, 1, 2))
        T[0, 0, 1] = T[1, 0, 1] = 1.0
        mdp = FiniteMDP(T, np.array([1.0, 0.0]), 0.5)
        rho = state_occupancy(mdp, TabularPolicy(np.ones((2, 1))))
        np.testing.assert_allclose(rho, [1.0, 1.0], atol=1e-12)

    def test_monte_carlo_oracle(self):
        # gamma^500 ~ 7e-12 at 0.95, so truncating rollouts at 500 steps adds no visible bias
        mdp, pi = random_mdp(5, 3, seed=7, discount=0.95)
        est, se = monte_carlo_state_om(mdp, pi, 200_000, 500, seed=123)
        rho = state_occupancy(mdp, pi)
        assert np.all(np.abs(est - rho) <= 3 * se + 1e-12), (est, rho, se)


class TestOccupancyMeasures:
    def test_self_loop(self):
        om = occupancy_measures(one_state(), TabularPolicy.uniform(1, 2))
        assert om.transition_om[0, 0] == pytest.approx(100.0, abs=1e-9)

    def test_truncated_sum_oracle(self):
        mdp, pi = random_mdp(3, 2, seed=11, discount=0.95)
        exact = occupancy_measures(mdp, pi).transition_om
        assert np.max(np.abs(exact - truncated_transition_om(mdp, pi, 1000))) < 1e-6

    def test_truncated_sum_within_tail_bound_at_099(self):
        mdp, pi = random_mdp(3, 2, seed=11, discount=0.99)
        exact = occupancy_measures(mdp, pi).transition_om
        trunc = truncated_transition_om(mdp, pi, 1000)
        tail = 0.99 ** 1001 / (1 - 0.99)
        assert np.all(exact - trunc >= -1e-12)
        assert (exact - trunc).sum() == pytest.approx(tail, rel=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 10), st.integers(1, 5), st.integers(0, 10_000),
           st.sampled_from([0.0, 0.5, 0.9, 0.99]))
    def test_invariants(self, S, A, seed, gamma):
        mdp, pi = random_mdp(S, A, seed, discount=gamma)
        om = occupancy_measures(mdp, pi)
        target = 1.0 / (1.0 - gamma)
        assert om.state_om.sum() == pytest.approx(target, abs=1e-9)
        assert om.transition_om.sum() == pytest.approx(target, abs=1e-9)
        np.testing.assert_allclose(om.transition_om.sum(1), om.state_om, atol=1e-9)
        np.testing.assert_allclose(om.state_action_om.sum(1), om.state_om, atol=1e-9)
        assert om.transition_om.min() >= -1e-12
        np.testing.assert_allclose(transition_occupancy_direct(mdp, pi), om.transition_om, atol=1e-9)

    def test_shape_mismatch(self):
        mdp, _ = random_mdp(3, 2, seed=0)
        with pytest.raises(MDPValidationError):
            occupancy_measures(mdp, TabularPolicy.uniform(3, 3))


class TestPlanner:
    def test_one_hot_rows_for_deterministic(self):
        mdp, _ = random_mdp(4, 3, seed=2, deterministic=True)
        pi = TabularPolicy(np.eye(3)[[0, 1, 2, 0]])
        h = marginal_planner(mdp, pi).probs
        assert np.all(np.sort(h, axis=1)[:, -1] == 1.0)

    def test_uniform_mixture(self):
        T = np.array([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]])
        h = marginal_planner(FiniteMDP(T, np.array([1.0, 0.0]), 0.9), TabularPolicy.uniform(2, 2)).probs
        np.testing.assert_allclose(h[0], [0.5, 0.5])

    def test_normalization_example(self):
        rho_ss = np.array([[3.0, 1.0], [0.0, 0.0]])
        om = OccupancyMeasures(rho_ss.sum(1), rho_ss[:, :1], rho_ss)
        table = planner_from_occupancy(om)
        np.testing.assert_allclose(table.probs[0], [0.75, 0.25])
        assert not table.defined[1] and np.all(np.isnan(table.probs[1]))

    def test_bijection_seed3(self):
        mdp, pi = random_mdp(6, 3, seed=3)
        om = occupancy_measures(mdp, pi)
        back = planner_from_occupancy(om)
        m = back.defined
        assert np.max(np.abs(back.probs[m] - marginal_planner(mdp, pi).probs[m])) < 1e-9

    def test_unvisited_rows_are_flagged(self):
        T = np.zeros((3, 1, 3))
        T[0, 0, 1] = T[1, 0, 1] = T[2, 0, 2] = 1.0
        mdp = FiniteMDP(T, np.array([1.0, 0.0, 0.0]), 0.9)
        table = planner_from_occupancy(occupancy_measures(mdp, TabularPolicy(np.ones((3, 1)))))
        assert table.defined.tolist() == [True, True, False]


class TestRedundancy:
    def test_duplicate_action_point_mass(self):
        T = np.zeros((2, 3, 2))
        T[:, 0, 0] = 1.0
        T[:, 1, 1] = 1.0
        T[:, 2, 0] = 1.0  # duplicate of action 0
        w = find_redundancy_witness(FiniteMDP(T, np.array([1.0, 0.0]), 0.9))
        assert w is not None and w.state == 0 and w.action == 0
        np.testing.assert_allclose(w.mixture, [0.0, 0.0, 1.0])

    def test_independent_rows_have_no_witness(self):
        T = np.zeros((3, 3, 3))
        for s in range(3):
            T[s, np.arange(3), np.arange(3)] = 1.0
        assert find_redundancy_witness(FiniteMDP(T, np.ones(3) / 3, 0.9)) is None

    def test_grid_k2_has_witness_everywhere(self):
        mdp = to_finite_mdp(GridWorld(k=2))
        for s in range(mdp.n_states):
            assert find_redundancy_witness(mdp, state=s) is not None

    def test_counterexample_same_transition_om(self):
        mdp = to_finite_mdp(GridWorld(k=2))
        base = TabularPolicy.uniform(mdp.n_states, mdp.n_actions)
        w = find_redundancy_witness(mdp)
        pi0, pi1 = counterexample_policies(mdp, w, base)
        assert np.max(np.abs(pi0.probs - pi1.probs)) >= 0.5
        om0, om1 = occupancy_measures(mdp, pi0), occupancy_measures(mdp, pi1)
        assert np.max(np.abs(om0.transition_om - om1.transition_om)) < 1e-10
        h0, h1 = marginal_planner(mdp, pi0).probs, marginal_planner(mdp, pi1).probs
        assert np.max(np.abs(h0 - h1)) < 1e-10

    def test_invalid_witness_rejected(self):
        mdp = to_finite_mdp(GridWorld(k=2))
        w = find_redundancy_witness(mdp)
        bad = type(w)(w.state, w.action, np.roll(w.mixture, 1))
        with pytest.raises(ValueError):
            counterexample_policies(mdp, bad, TabularPolicy.uniform(mdp.n_states, mdp.n_actions))


class TestDominance:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 10_000))
    def test_all_positive(self, S, A, seed):
        mdp, pi = random_mdp(S, A, seed)
        assert verify_column_dominance(mdp, pi).all_positive

    def test_one_state_margin(self):
        rep = verify_column_dominance(one_state(0.99, 1), TabularPolicy(np.ones((1, 1))))
        assert rep.margins.shape == (1,)
        assert rep.min_margin == pytest.approx(0.01, abs=1e-12)

    def test_matrix_solves_pair_recursion(self):
        mdp, pi = random_mdp(4, 2, seed=5)
        A = pair_system_matrix(mdp, pi)
        x = occupancy_measures(mdp, pi).transition_om.reshape(-1)
        h = marginal_planner(mdp, pi).probs
        np.testing.assert_allclose(A @ x, (mdp.initial[:, None] * h).reshape(-1), atol=1e-10)


class TestTheorem1:
    def test_groups_k4(self):
        mdp = to_finite_mdp(GridWorld(k=4))
        groups = same_next_state_action_set(mdp, GridWorld(k=4).index(2, 2))
        assert len(groups) == 4 and all(len(g) == 4 for _, g in groups)

    def test_singletons_and_single_action(self):
        T = np.zeros((3, 3, 3))
        T[:, np.arange(3), np.arange(3)] = 1.0
        assert [g for _, g in same_next_state_action_set(FiniteMDP(T, np.ones(3) / 3, 0.9), 0)] == [[0], [1], [2]]
        assert [g for _, g in same_next_state_action_set(one_state(0.9, 1), 0)] == [[0]]

    def test_nondeterministic_row_rejected(self):
        mdp, _ = random_mdp(3, 2, seed=0)
        with pytest.raises(ValueError):
            same_next_state_action_set(mdp, 0)

    def test_swap_right_actions_at_origin(self):
        gw = GridWorld(k=2)
        mdp = to_finite_mdp(gw)
        expert = gridworld_expert(gw)
        s = gw.index(0, 0)
        q = np.zeros(mdp.n_actions)
        right = [a for a in range(mdp.n_actions) if gw.next_state(s, a) == gw.index(1, 0)]
        q[right] = [1.0, 0.0]
        assert verify_theorem1(mdp, expert, s, q).max_value_difference < 1e-10
        same = verify_theorem1(mdp, expert, s, expert.probs[s])
        assert same.max_value_difference == 0.0

    def test_other_group_rejected(self):
        gw = GridWorld(k=2)
        mdp = to_finite_mdp(gw)
        s = gw.index(0, 0)
        q = np.zeros(mdp.n_actions)
        up = [a for a in range(mdp.n_actions) if gw.next_state(s, a) == gw.index(0, 1)]
        q[up[0]] = 1.0
        with pytest.raises(ValueError):
            verify_theorem1(mdp, gridworld_expert(gw), s, q)

    def test_q_evaluation_consistent(self):
        mdp, pi = random_mdp(5, 3, seed=4, with_reward=True)
        V, Q = policy_evaluation(mdp, pi), q_evaluation(mdp, pi)
        np.testing.assert_allclose((pi.probs * Q).sum(1), V, atol=1e-9)


class TestFileFormat:
    def test_round_trip(self, tmp_path):
        mdp, _ = random_mdp(4, 3, seed=1, with_reward=True)
        save_mdp(mdp, tmp_path / "m.json")
        back = load_mdp(tmp_path / "m.json")
        np.testing.assert_array_equal(back.transition, mdp.transition)
        np.testing.assert_array_equal(back.reward, mdp.reward)
        assert back.discount == mdp.discount

    def test_bad_row_sum_names_the_row(self):
        T = np.full((2, 1, 2), 0.5)
        T[1, 0] = [0.6, 0.6]
        with pytest.raises(MDPValidationError, match=r"transition\[1\]\[0\]"):
            FiniteMDP(T, np.array([1.0, 0.0]), 0.9)

    def test_unknown_field(self, tmp_path):
        mdp, _ = random_mdp(2, 2, seed=1)
        from depolab.mdp import mdp_from_dict, mdp_to_dict
        d = mdp_to_dict(mdp)
        d["extra"] = 1
        with pytest.raises(MDPValidationError, match="unknown"):
            mdp_from_dict(d)

    @pytest.mark.parametrize("gamma", [1.0, -0.1])
    def test_bad_discount(self, gamma):
        with pytest.raises(MDPValidationError):
            FiniteMDP(np.ones((1, 1, 1)), np.ones(1), gamma)
