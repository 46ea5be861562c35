import numpy as np
import pytest

from diffpol.nets import init_mlp_params, make_net, mlp_backward, mlp_forward
from diffpol.rl import (
    CriticEnsemble,
    ReplayBuffer,
    Transition,
    advantage,
    double_q_target,
    episode_return,
    expectile_value_loss,
    make_critics,
    polyak_update,
    reward_to_go,
    v_bellman_q_loss,
    value_loss,
)

from conftest import finite_diff, max_rel_err


def _tr(i):
    return Transition(np.array([float(i)]), np.array([0.0]), float(i), np.array([0.0]), False)


class TestReplayBuffer:
    def test_fifo_eviction(self):
        buf = ReplayBuffer(3)
        for i in range(4):
            buf.add(_tr(i))
        remaining = sorted(tr.r for tr in buf.as_list())
        assert remaining == [1.0, 2.0, 3.0]
        assert len(buf) == 3
        assert buf.as_list()[0].r == 1.0  # oldest first

    def test_sampling_without_replacement(self, rng):
        buf = ReplayBuffer(10)
        for i in range(10):
            buf.add(_tr(i))
        idx = buf.sample_indices(8, rng)
        assert len(set(idx.tolist())) == 8

    def test_sample_capped_at_length(self, rng):
        buf = ReplayBuffer(10)
        for i in range(3):
            buf.add(_tr(i))
        assert len(buf.sample(64, rng)) == 3

    def test_empty_sample_rejected(self, rng):
        with pytest.raises(ValueError):
            ReplayBuffer(4).sample(1, rng)

    def test_clear(self):
        buf = ReplayBuffer(4)
        buf.add(_tr(0))
        buf.clear()
        assert len(buf) == 0


class TestReturns:
    def test_gamma_zero_keeps_first_reward(self):
        assert episode_return([1, 1, 1], 0.0) == 1.0

    def test_half_discount(self):
        assert episode_return([1, 1], 0.5) == 1.5

    def test_matches_term_by_term_recomputation(self, rng):
        rewards = rng.standard_normal(10)
        gamma = 0.97
        expected = sum(r * gamma**t for t, r in enumerate(rewards))
        assert episode_return(rewards, gamma) == pytest.approx(expected, abs=1e-12)

    def test_gamma_range_checked(self):
        with pytest.raises(ValueError):
            episode_return([1.0], 1.0)

    def test_reward_to_go_suffixes(self):
        rtg = reward_to_go([1.0, 2.0, 3.0], 0.5)
        assert rtg[2] == 3.0
        assert rtg[1] == 2.0 + 0.5 * 3.0
        assert rtg[0] == 1.0 + 0.5 * rtg[1]


class TestAdvantage:
    def test_direct_arithmetic(self):
        assert advantage(2.0, 0.5, 0.9) == pytest.approx(1.35, abs=1e-15)

    def test_zero_at_baseline(self):
        assert advantage(1.7, 1.7, 0.9) == 0.0

    def test_limit_toward_one_gives_raw_residual(self):
        assert advantage(2.0, 0.5, 1.0 - 1e-12) == pytest.approx(1.5, abs=1e-9)

    def test_range_checked(self):
        with pytest.raises(ValueError):
            advantage(1.0, 0.0, 1.0)


class TestValueLoss:
    def test_zero_at_match(self):
        loss, grad = value_loss([1.0, 2.0], [1.0, 2.0])
        assert loss == 0.0
        assert np.array_equal(grad, np.zeros(2))

    def test_unit_gap(self):
        loss, _ = value_loss([2.0, 3.0], [1.0, 2.0])
        assert loss == 1.0

    def test_gradient_through_network(self, rng):
        net = make_net(3, (5,), 1, "tanh", seed=2)
        X = rng.standard_normal((4, 3))
        targets = rng.standard_normal(4)

        def f(v):
            pred = mlp_forward(net.params.with_values(v), net.spec, X)[:, 0]
            return value_loss(pred, targets)[0]

        pred = net.forward(X)[:, 0]
        _, dloss = value_loss(pred, targets)
        grad, _ = mlp_backward(net.params, net.spec, X, dloss[:, None])
        fd = finite_diff(f, net.params.values)
        assert max_rel_err(grad.values, fd) < 1e-5


class TestDoubleQTarget:
    def test_hand_value(self):
        assert double_q_target(1.0, 0.0, 2.0, 1.5, 0.99) == pytest.approx(2.485, abs=1e-12)

    def test_done_masks_bootstrap(self):
        assert double_q_target(1.0, 1.0, 5.0, 7.0, 0.99) == 1.0

    def test_min_bound(self, rng):
        for _ in range(50):
            r, q1, q2 = rng.standard_normal(3)
            y = double_q_target(r, 0.0, q1, q2, 0.9)
            assert y <= r + 0.9 * q1 + 1e-12
            assert y <= r + 0.9 * q2 + 1e-12

    def test_monotone_in_q_inputs(self, rng):
        for _ in range(50):
            q1, q2 = rng.standard_normal(2)
            base = double_q_target(0.0, 0.0, q1, q2, 0.9)
            assert double_q_target(0.0, 0.0, q1 + 0.5, q2, 0.9) >= base
            assert double_q_target(0.0, 0.0, q1, q2 + 0.5, 0.9) >= base


class TestExpectileLoss:
    def test_q_below_v(self):
        loss, _ = expectile_value_loss(0.0, 1.0, 0.7)
        assert loss == pytest.approx(0.09, abs=1e-15)

    def test_q_at_or_above_v(self):
        loss, _ = expectile_value_loss(1.0, 0.0, 0.7)
        assert loss == pytest.approx(0.49, abs=1e-15)

    def test_tau_half_symmetric(self):
        for q, v in ((0.0, 1.0), (1.0, 0.0)):
            loss, _ = expectile_value_loss(q, v, 0.5)
            assert loss == 0.25

    def test_gradient_convention(self):
        # 2 |tau - ind| (v - q), indicator frozen
        _, g_below = expectile_value_loss(0.0, 1.0, 0.7)  # Q < V: weight 0.3
        assert g_below[0] == pytest.approx(2 * 0.3 * 1.0, abs=1e-15)
        _, g_above = expectile_value_loss(1.0, 0.0, 0.7)  # Q >= V: weight 0.7
        assert g_above[0] == pytest.approx(2 * 0.7 * -1.0, abs=1e-15)

    def test_tau_range(self):
        with pytest.raises(ValueError):
            expectile_value_loss(0.0, 1.0, 0.0)


class TestBellmanQLoss:
    def test_zero_at_target(self):
        loss, _ = v_bellman_q_loss(1.0, 2.0, 1.0 + 0.9 * 2.0, 0.9)
        assert loss == 0.0

    def test_hand_value(self):
        loss, _ = v_bellman_q_loss(0.0, 1.0, 0.0, 0.9)
        assert loss == pytest.approx(0.81, abs=1e-15)

    def test_gradient_through_q_network(self, rng):
        net = make_net(4, (5,), 1, "tanh", seed=3)
        X = rng.standard_normal((3, 4))
        r = rng.standard_normal(3)
        v_next = rng.standard_normal(3)

        def f(v):
            q = mlp_forward(net.params.with_values(v), net.spec, X)[:, 0]
            return v_bellman_q_loss(r, v_next, q, 0.9)[0]

        q = net.forward(X)[:, 0]
        _, dq = v_bellman_q_loss(r, v_next, q, 0.9)
        grad, _ = mlp_backward(net.params, net.spec, X, dq[:, None])
        fd = finite_diff(f, net.params.values)
        assert max_rel_err(grad.values, fd) < 1e-5


class TestPolyak:
    def test_tau_one_copies_online(self, rng):
        ens = make_critics("dql", 2, 1, hidden=(3,), polyak_tau=1.0)
        assert np.array_equal(
            polyak_update(ens.q1_target, ens.q1.params, 1.0).values, ens.q1.params.values
        )

    def test_tau_zero_keeps_target(self, rng):
        ens = make_critics("dql", 2, 1, hidden=(3,))
        before = ens.q1_target.values.copy()
        assert np.array_equal(polyak_update(ens.q1_target, ens.q1.params, 0.0).values, before)

    def test_elementwise_arithmetic(self, rng):
        spec_layout = (("w", (3,)),)
        from diffpol.nets import ParamVector

        t = ParamVector(rng.standard_normal(3), spec_layout)
        o = ParamVector(rng.standard_normal(3), spec_layout)
        out = polyak_update(t, o, 0.005)
        assert np.allclose(out.values, 0.995 * t.values + 0.005 * o.values, atol=1e-15)

    def test_ensemble_targets_track_online(self):
        ens = make_critics("dql", 2, 1, hidden=(4,), polyak_tau=0.5)
        online_before = ens.q1.params.values.copy()
        target_before = ens.q1_target.values.copy()
        ens.update_targets()
        assert np.allclose(
            ens.q1_target.values, 0.5 * target_before + 0.5 * online_before, atol=1e-15
        )


def test_make_critics_shapes_per_method():
    for method, has in (
        ("dppo", (True, False, False)),
        ("dawr", (True, False, False)),
        ("dipo", (False, True, False)),
        ("dql", (False, True, True)),
        ("qsm", (False, True, True)),
        ("idql", (True, True, True)),
    ):
        ens = make_critics(method, 3, 2)
        assert (ens.v is not None) == has[0]
        assert (ens.q1 is not None) == has[1]
        assert (ens.q2 is not None) == has[2]
    with pytest.raises(ValueError):
        make_critics("nope", 3, 2)


def test_tabular_value_iteration_hits_analytic_fixed_point():
    # deterministic 2-state 2-action MDP with a hand-derived optimum;
    # the same bootstrap arithmetic used for critic targets drives the sweep
    gamma = 0.9
    next_state = np.array([[0, 1], [1, 0]])
    reward = np.array([[0.0, 1.0], [2.0, 0.0]])
    q_star = np.array([[17.1, 19.0], [20.0, 17.1]])

    q = np.zeros((2, 2))
    for _ in range(500):
        new_q = np.empty_like(q)
        for s in range(2):
            for a in range(2):
                s2 = next_state[s, a]
                best = np.max(q[s2])
                new_q[s, a] = double_q_target(reward[s, a], 0.0, best, best, gamma)
        if np.max(np.abs(new_q - q)) < 1e-14:
            q = new_q
            break
        q = new_q
    assert np.max(np.abs(q - q_star)) < 1e-8
