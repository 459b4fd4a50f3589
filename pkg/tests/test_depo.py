import math

import numpy as np
import pytest
import torch

from depolab.approx import finite_difference, get_params, grad, relative_error
from depolab.depo import (
    DecoupledPolicy,
    bco_update,
    cdepg_loss,
    combined_gradient,
    combined_update,
    depg_expected_loss,
    depg_loss,
    inverse_dynamics_loss,
    mean_gradient,
    normalize_q,
    supervised_planner_loss,
    theorem2_report,
)
from depolab.depo.fit import fit_until_converged
from depolab.depo.losses import SupportCollapseError, depg_pathwise_loss
from depolab.depo.policy import (
    GaussianInverseDynamics,
    GaussianPlanner,
    GridInverseDynamics,
    TabularActor,
    TabularPlanner,
    TwinQ,
)
from depolab.envs.gridworld import GridWorld, gridworld_expert, true_inverse_dynamics
from depolab.envs.pointmass import PointMass, pointmass_expert
from depolab.trainer.evaluation import environment_rollout, multi_step_rollout, planner_mse


def grid_policy(k=2, seed=0, init_scale=1.0):
    gw = GridWorld(k=k)
    rng = np.random.default_rng(seed)
    planner = TabularPlanner(gw.n_states, rng, init_scale=init_scale)
    inv = GridInverseDynamics(gw.coord_array(), gw.n_actions, (16,), rng)
    return gw, DecoupledPolicy(planner, inv)


def continuous_policy(seed=0):
    rng = np.random.default_rng(seed)
    planner = GaussianPlanner(4, (8,), rng, delta_scale=0.05, init_log_std=-1.0)
    inv = GaussianInverseDynamics(4, 2, (8,), rng, delta_scale=0.05, init_log_std=-1.0)
    return DecoupledPolicy(planner, inv, n_mc=4)


def idx(x):
    return torch.as_tensor(np.asarray(x, dtype=np.int64))


def one_hot_planner(gw, targets):
    planner = TabularPlanner(gw.n_states, np.random.default_rng(0), init_scale=0.0)
    with torch.no_grad():
        planner.table.fill_(-1e3)
        for s, t in enumerate(targets):
            planner.table[s, t] = 0.0
    return planner


class TestComposition:
    def test_policy_rows_sum_to_one(self):
        _, policy = grid_policy(k=4)
        np.testing.assert_allclose(policy.policy_table().sum(axis=1), 1.0, atol=1e-9)

    def test_composition_matches_product_form(self):
        gw, policy = grid_policy(k=2, seed=3)
        h, inv = policy.planner_table(), policy.inverse_table().numpy()
        pi = policy.policy_table()
        for s in range(gw.n_states):
            expected = np.einsum("t,ta->a", h[s], inv[s])
            np.testing.assert_allclose(pi[s], expected, atol=1e-12)

    def test_one_hot_modules_give_unique_action(self):
        gw = GridWorld(k=1)
        targets = [gw.next_state(s, 0) for s in range(gw.n_states)]
        inv = GridInverseDynamics(gw.coord_array(), gw.n_actions, (4,), np.random.default_rng(0))
        policy = DecoupledPolicy(one_hot_planner(gw, targets), inv)
        table = torch.full((gw.n_states, gw.n_states, gw.n_actions), 1e-300, dtype=torch.float64)
        table[:, :, 0] = 1.0
        policy._inv_cache = table
        pi = policy.policy_table()
        np.testing.assert_allclose(pi[:, 0], 1.0, atol=1e-12)

    def test_half_half_planner(self):
        gw = GridWorld(k=1)
        planner = TabularPlanner(gw.n_states, np.random.default_rng(0), init_scale=0.0)
        s = gw.index(2, 2)
        right, up = gw.index(3, 2), gw.index(2, 3)
        with torch.no_grad():
            planner.table.fill_(-1e3)
            planner.table[s, right] = 0.0
            planner.table[s, up] = 0.0
        inv = GridInverseDynamics(gw.coord_array(), gw.n_actions, (4,), np.random.default_rng(0))
        policy = DecoupledPolicy(planner, inv)
        table = torch.zeros((gw.n_states, gw.n_states, gw.n_actions), dtype=torch.float64) + 0.25
        table[s, right] = torch.tensor([0.0, 0.0, 0.0, 0.0])
        table[s, right, true_inverse_dynamics(gw, s, right)] = 1.0
        table[s, up] = 0.0
        table[s, up, true_inverse_dynamics(gw, s, up)] = 1.0
        policy._inv_cache = table
        row = policy.policy_table()[s]
        assert row[true_inverse_dynamics(gw, s, right)] == pytest.approx(0.5)
        assert row[true_inverse_dynamics(gw, s, up)] == pytest.approx(0.5)

    def test_deterministic_act_uses_modes(self):
        policy = continuous_policy()
        s = np.array([0.3, -0.2, 0.1, 0.0])
        res = policy.act(s, np.random.default_rng(0), deterministic=True)
        with torch.no_grad():
            planned = policy.planner.plan(torch.as_tensor(s))
            a = policy.inverse_dynamics(torch.as_tensor(s), planned)[0]
        np.testing.assert_array_equal(res.planned, planned.numpy())
        np.testing.assert_array_equal(res.action, a.numpy())

    def test_marginal_log_prob_single_sample_equals_inverse_density(self):
        policy = continuous_policy(1)
        rng = np.random.default_rng(2)
        s, a = torch.as_tensor(rng.normal(size=(5, 4))), torch.as_tensor(rng.normal(size=(5, 2)) * 0.1)
        eps = torch.as_tensor(rng.normal(size=(1, 5, 4)))
        planned = policy.planner.plan(s, eps[0])
        expected = policy.inverse_dynamics.log_prob(s, planned, a)
        torch.testing.assert_close(policy.log_prob(s, a, eps), expected)


class TestSupervisedAndInverse:
    def test_uniform_planner_loss_is_log_states(self):
        gw = GridWorld()
        planner = TabularPlanner(gw.n_states, np.random.default_rng(0), init_scale=0.0)
        loss = supervised_planner_loss(planner, idx([0, 5, 7]), idx([1, 11, 8]))
        assert float(loss.detach()) == pytest.approx(math.log(36), abs=1e-12)

    def test_one_hot_planner_loss_is_zero(self):
        gw = GridWorld()
        path = gw.expert_path()
        targets = list(range(gw.n_states))
        for a, b in zip(path[:-1], path[1:]):
            targets[a] = b
        planner = one_hot_planner(gw, targets)
        loss = supervised_planner_loss(planner, idx(path[:-1]), idx(path[1:]))
        assert float(loss.detach()) == pytest.approx(0.0, abs=1e-12)

    def test_empty_demos_rejected(self):
        planner = TabularPlanner(4, np.random.default_rng(0))
        with pytest.raises(ValueError):
            supervised_planner_loss(planner, idx([]), idx([]))

    def test_empty_batch_rejected(self):
        _, policy = grid_policy()
        with pytest.raises(ValueError):
            inverse_dynamics_loss(policy.inverse_dynamics, idx([]), idx([]), idx([]))

    def test_inverse_dynamics_learns_true_actions(self):
        gw = GridWorld(k=1)
        rng = np.random.default_rng(0)
        inv = GridInverseDynamics(gw.coord_array(), gw.n_actions, (32,), rng)
        s, a, t = [], [], []
        for si in range(gw.n_states):
            for ai in range(gw.n_actions):
                ti = gw.next_state(si, ai)
                if ti != si:
                    s.append(si), a.append(ai), t.append(ti)
        s, a, t = idx(s), idx(a), idx(t)
        opt = torch.optim.Adam(inv.parameters(), lr=1e-2)
        fit_until_converged(lambda: inverse_dynamics_loss(inv, s, a, t),
                            lambda: float(inverse_dynamics_loss(inv, s, a, t).detach()), opt,
                            steps_per_epoch=50, tol=1e-6, patience=3, max_epochs=40)
        with torch.no_grad():
            pred = torch.argmax(inv.log_probs(s, t), -1)
        assert torch.equal(pred, a)

    def test_inverse_dynamics_gradient_matches_fd(self):
        policy = continuous_policy(4)
        rng = np.random.default_rng(5)
        s, t = torch.as_tensor(rng.normal(size=(6, 4))), torch.as_tensor(rng.normal(size=(6, 4)))
        a = torch.as_tensor(rng.normal(size=(6, 2)))
        inv = policy.inverse_dynamics

        def loss():
            return inverse_dynamics_loss(inv, s, a, t)
        fd = finite_difference(lambda: float(loss().detach()), inv)
        assert relative_error(grad(loss(), inv), fd) <= 1e-4


class TestDePG:
    def test_inverse_independent_of_target_gives_zero_gradient(self):
        policy = continuous_policy(0)
        with torch.no_grad():
            # zero the weights that read the target-state features
            first = policy.inverse_dynamics.head.body.layers[0]
            first.weight[:, 4:] = 0.0
        rng = np.random.default_rng(1)
        s, a = torch.as_tensor(rng.normal(size=(8, 4))), torch.as_tensor(rng.normal(size=(8, 2)))
        eps = torch.as_tensor(rng.normal(size=(4, 8, 4)))
        g = grad(depg_loss(policy, s, a, torch.as_tensor(rng.normal(size=8)), eps), policy.planner)
        assert np.all(g.values == 0.0)

    def test_zero_q_gives_zero_gradient(self):
        _, policy = grid_policy()
        s, a = idx([0, 1, 2]), idx([0, 3, 1])
        g = grad(depg_loss(policy, s, a, torch.zeros(3, dtype=torch.float64)), policy.planner)
        assert np.all(g.values == 0.0)

    def test_support_collapse(self):
        gw, policy = grid_policy(k=1)
        targets = [gw.next_state(s, 0) for s in range(gw.n_states)]
        policy.planner = one_hot_planner(gw, targets)
        table = torch.full((gw.n_states, gw.n_states, gw.n_actions), 1e-12, dtype=torch.float64)
        table[:, :, 0] = 1.0
        policy._inv_cache = table
        with pytest.raises(SupportCollapseError):
            depg_loss(policy, idx([3]), idx([1]), torch.ones(1, dtype=torch.float64))

    def test_two_state_surrogate_matches_fd(self):
        gw = GridWorld(k=1, width=2, height=1, goal=(1, 0), shaded_zone=(), expert_moves="R")
        rng = np.random.default_rng(0)
        planner = TabularPlanner(gw.n_states, rng, init_scale=1.0)
        inv = GridInverseDynamics(gw.coord_array(), gw.n_actions, (4,), rng)
        policy = DecoupledPolicy(planner, inv)
        s = idx([0, 1, 0])
        q_rows = torch.as_tensor(rng.normal(size=(3, gw.n_actions)))

        def surrogate():
            pi = policy.action_probs(s)
            return -(pi * q_rows).sum(-1).mean()
        fd = finite_difference(lambda: float(surrogate().detach()), planner)
        analytic = grad(depg_expected_loss(policy, s, q_rows, alpha=0.0), planner)
        assert relative_error(analytic, fd) <= 1e-4

    def test_expected_form_equals_sampled_sum(self):
        gw, policy = grid_policy(k=2, seed=2)
        s = idx([4, 9])
        q_rows = torch.as_tensor(np.random.default_rng(3).normal(size=(2, gw.n_actions)))
        expected = grad(depg_expected_loss(policy, s, q_rows, alpha=0.0), policy.planner)
        total = None
        for a in range(gw.n_actions):
            acts = idx([a, a])
            q = q_rows[:, a]
            pi = policy.action_probs(s)[:, a].detach()
            # sampled surrogate weights each action by Q/pi; summing pi-weighted copies recovers the expectation
            g = grad(depg_loss(policy, s, acts, q * pi, clip=1e9), policy.planner)
            total = g if total is None else total + g
        np.testing.assert_allclose(total.values, expected.values, atol=1e-12)

    def test_planner_update_leaves_inverse_untouched(self):
        gw, policy = grid_policy(k=2, seed=1)
        before = get_params(policy.inverse_dynamics).values.copy()
        q_rows = torch.as_tensor(np.random.default_rng(0).normal(size=(4, gw.n_actions)))
        s = idx([0, 1, 2, 3])
        opt = torch.optim.Adam(policy.planner.parameters(), lr=0.1)
        combined_update(policy.planner, opt, depg_expected_loss(policy, s, q_rows, 0.1), None, None, 1.0)
        np.testing.assert_array_equal(get_params(policy.inverse_dynamics).values, before)

    def test_pathwise_gradient_matches_fd(self):
        policy = continuous_policy(6)
        rng = np.random.default_rng(7)
        q = TwinQ(4, 2, (8,), rng)
        s = torch.as_tensor(rng.normal(size=(5, 4)) * 0.5)
        e1, e2 = torch.as_tensor(rng.normal(size=(5, 4))), torch.as_tensor(rng.normal(size=(5, 2)) * 0.1)
        emc = torch.as_tensor(rng.normal(size=(3, 5, 4)))

        def loss():
            return depg_pathwise_loss(policy, q, s, e1, e2, emc, alpha=0.05)
        fd = finite_difference(lambda: float(loss().detach()), policy.planner)
        assert relative_error(grad(loss(), policy.planner), fd) <= 1e-4


class TestCDePG:
    def test_normalize_constant_batch_is_ones(self):
        assert torch.equal(normalize_q(torch.full((4,), 3.0, dtype=torch.float64)), torch.ones(4, dtype=torch.float64))

    def test_normalize_range(self):
        w = normalize_q(torch.tensor([-2.0, 0.0, 2.0], dtype=torch.float64))
        np.testing.assert_allclose(w.numpy(), [0.0, 0.5, 1.0])

    def test_zero_weights_zero_gradient(self):
        planner = TabularPlanner(5, np.random.default_rng(0), init_scale=1.0)
        loss = cdepg_loss(planner, idx([0, 1]), idx([2, 3]), torch.zeros(2, dtype=torch.float64), normalize=False)
        assert np.all(grad(loss, planner).values == 0.0)

    def test_constant_q_equals_mle_bitwise(self):
        planner = TabularPlanner(6, np.random.default_rng(1), init_scale=1.0)
        s, t = idx([0, 2, 4, 5]), idx([1, 3, 5, 5])
        g_c = grad(cdepg_loss(planner, s, t, torch.full((4,), 7.0, dtype=torch.float64)), planner)
        g_m = grad(supervised_planner_loss(planner, s, t), planner)
        np.testing.assert_array_equal(g_c.values, g_m.values)

    def test_empty_batch(self):
        planner = TabularPlanner(3, np.random.default_rng(0))
        with pytest.raises(ValueError):
            cdepg_loss(planner, idx([]), idx([]), torch.zeros(0, dtype=torch.float64))


class TestCombination:
    def _report(self, lam, with_depg=True):
        gw, policy = grid_policy(k=2, seed=4)
        rng = np.random.default_rng(0)
        s = idx([0, 1, 2])
        q_rows = torch.as_tensor(rng.normal(size=(3, gw.n_actions)))
        depg = depg_expected_loss(policy, s, q_rows, 0.1) if with_depg else None
        cdepg = cdepg_loss(policy.planner, s, idx([1, 2, 3]), torch.as_tensor(rng.normal(size=3)))
        sup = supervised_planner_loss(policy.planner, idx([0, 6]), idx([1, 7]))
        return combined_gradient(policy.planner, depg, cdepg, sup, lam)

    def test_combination_is_exact(self):
        r = self._report(0.7)
        expected = r.depg_component + (r.supervised_component + r.cdepg_component) * 0.7
        np.testing.assert_array_equal(r.combined.values, expected.values)

    def test_lambda_zero_keeps_depg_only(self):
        r = self._report(0.0)
        np.testing.assert_array_equal(r.combined.values, r.depg_component.values)

    def test_missing_depg_is_zero(self):
        r = self._report(2.0, with_depg=False)
        assert np.all(r.depg_component.values == 0.0)
        np.testing.assert_array_equal(r.combined.values,
                                      ((r.supervised_component + r.cdepg_component) * 2.0).values)

    def test_mean_gradient(self):
        r1, r2 = self._report(1.0).combined, self._report(0.5).combined
        m = mean_gradient([r1, r2])
        np.testing.assert_array_equal(m.values, (r1.values + r2.values) / 2)
        with pytest.raises(ValueError):
            mean_gradient([])


class TestBCO:
    def test_perfect_inverse_labels_expert_actions_and_clones(self):
        gw = GridWorld(k=1)
        expert = gridworld_expert(gw)
        rng = np.random.default_rng(0)
        inv = GridInverseDynamics(gw.coord_array(), gw.n_actions, (32,), rng)
        actor = TabularActor(gw.n_states, gw.n_actions, rng)
        s, a, t = [], [], []
        for si in range(gw.n_states):
            for ai in range(gw.n_actions):
                s.append(si), a.append(ai), t.append(gw.next_state(si, ai))
        path = gw.expert_path()
        res = bco_update(inv, torch.optim.Adam(inv.parameters(), lr=1e-2),
                         actor, torch.optim.Adam(actor.parameters(), lr=0.1),
                         idx(path[:-1]), idx(path[1:]), idx(s), idx(a), idx(t), rng,
                         batch_size=64, steps_per_epoch=50, tol=1e-6, patience=3, max_epochs=60)
        expert_actions = [true_inverse_dynamics(gw, x, y) for x, y in zip(path[:-1], path[1:])]
        assert res.labels.tolist() == expert_actions
        assert res.clone_accuracy == 1.0
        assert expert.probs.shape == (gw.n_states, gw.n_actions)

    def test_empty_inputs(self):
        gw = GridWorld(k=1)
        rng = np.random.default_rng(0)
        inv = GridInverseDynamics(gw.coord_array(), gw.n_actions, (4,), rng)
        actor = TabularActor(gw.n_states, gw.n_actions, rng)
        opt_i, opt_a = torch.optim.Adam(inv.parameters()), torch.optim.Adam(actor.parameters())
        with pytest.raises(ValueError):
            bco_update(inv, opt_i, actor, opt_a, idx([]), idx([]), idx([0]), idx([0]), idx([1]), rng)
        with pytest.raises(ValueError):
            bco_update(inv, opt_i, actor, opt_a, idx([0]), idx([1]), idx([]), idx([]), idx([]), rng)


class TestBoundsAndRollouts:
    def test_exact_modules_give_zero_gap(self):
        gw = GridWorld(k=1)
        expert = gridworld_expert(gw)
        targets = [gw.next_state(s, int(np.argmax(expert.probs[s]))) for s in range(gw.n_states)]
        inv = GridInverseDynamics(gw.coord_array(), gw.n_actions, (4,), np.random.default_rng(0))
        policy = DecoupledPolicy(one_hot_planner(gw, targets), inv)
        table = torch.full((gw.n_states, gw.n_states, gw.n_actions), 1e-12, dtype=torch.float64)
        for s in range(gw.n_states):
            for t in range(gw.n_states):
                if gw.reachable(s, t):
                    table[s, t, true_inverse_dynamics(gw, s, t)] = 1.0
        policy._inv_cache = table
        rep = theorem2_report(policy, gw, expert, list(range(gw.n_states)))
        assert np.all(rep.observed_gap == 0) and np.all(rep.planner_term == 0) and np.all(rep.invdyn_term == 0)

    def test_bound_rejects_stochastic_env(self):
        _, policy = grid_policy()
        with pytest.raises(TypeError):
            theorem2_report(policy, object(), None, [0])

    def test_pointmass_bound_holds_for_random_policy(self):
        env = PointMass()
        rng = np.random.default_rng(0)
        planner = GaussianPlanner(4, (16,), rng, delta_scale=env.dt)
        inv = GaussianInverseDynamics(4, 2, (16,), rng, delta_scale=env.dt)
        policy = DecoupledPolicy(planner, inv)
        states = np.concatenate([rng.uniform(-1, 1, (200, 2)), rng.uniform(-1, 1, (200, 2))], axis=1)
        rep = theorem2_report(policy, env, pointmass_expert(env), states, rng)
        assert rep.fraction_holding == 1.0

    def test_rollout_lengths(self):
        gw, policy = grid_policy()
        assert multi_step_rollout(policy, 0, 0) == [0]
        assert len(multi_step_rollout(policy, 0, 7)) == 8
        assert len(environment_rollout(policy, gw, 0, 5)) == 6
        with pytest.raises(ValueError):
            multi_step_rollout(policy, 0, -1)

    def test_exact_planner_imagines_expert_path(self):
        gw = GridWorld(k=1)
        expert = gridworld_expert(gw)
        targets = [gw.next_state(s, int(np.argmax(expert.probs[s]))) for s in range(gw.n_states)]
        inv = GridInverseDynamics(gw.coord_array(), gw.n_actions, (4,), np.random.default_rng(0))
        policy = DecoupledPolicy(one_hot_planner(gw, targets), inv)
        assert multi_step_rollout(policy, gw.index(0, 0), 10) == gw.expert_path()

    def test_planner_mse_recomputation(self):
        rng = np.random.default_rng(0)
        planned, reached = rng.normal(size=(30, 4)), rng.normal(size=(30, 4))
        direct = np.mean([np.sum((p - r) ** 2) for p, r in zip(planned, reached)])
        assert planner_mse(planned, reached) == pytest.approx(direct, abs=1e-14)
        assert planner_mse(planned, planned) == 0.0
        with pytest.raises(ValueError):
            planner_mse([], [])
