import numpy as np
import pytest

from diffpol.envs import PointMassEnv, PointMassExpert, gen_demos, rollout_expert
from diffpol.nets import ParamVector, ShapeError, mlp_layout
from diffpol.optim import OptimHyper
from diffpol.policy import (
    AffineMap,
    DemoDataset,
    denormalize,
    load_demos,
    make_policy,
    normalize,
    pretrain_bc,
    sample_action,
    sample_actions,
    save_demos,
)


class TestNormalization:
    def test_min_maps_to_minus_one(self, rng):
        data = rng.standard_normal((30, 4))
        m = AffineMap.from_data(data)
        assert np.allclose(normalize(data.min(axis=0), m), -np.ones(4), atol=1e-12)

    def test_max_maps_to_plus_one(self, rng):
        data = rng.standard_normal((30, 4))
        m = AffineMap.from_data(data)
        assert np.allclose(normalize(data.max(axis=0), m), np.ones(4), atol=1e-12)

    def test_round_trip_exact(self, rng):
        data = rng.standard_normal((50, 3)) * 7.0
        m = AffineMap.from_data(data)
        x = rng.standard_normal(3)
        assert np.allclose(denormalize(normalize(x, m), m), x, rtol=0, atol=1e-12)

    def test_constant_dimension_maps_to_zero(self):
        data = np.column_stack([np.full(10, 2.5), np.arange(10.0)])
        m = AffineMap.from_data(data)
        out = normalize(np.array([2.5, 4.0]), m)
        assert out[0] == 0.0
        back = denormalize(out, m)
        assert back[0] == 2.5


class TestDemoDataset:
    def test_from_raw_normalizes_into_unit_box(self, rng):
        obs = rng.standard_normal((40, 3)) * 3
        act = rng.standard_normal((40, 2))
        data = DemoDataset.from_raw(obs, act)
        assert np.max(np.abs(data.observations)) <= 1 + 1e-12
        assert np.max(np.abs(data.actions)) <= 1 + 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            DemoDataset.from_raw(np.empty((0, 3)), np.empty((0, 2)))

    def test_mismatched_rows_rejected(self, rng):
        with pytest.raises(ShapeError):
            DemoDataset.from_normalized(np.zeros((3, 2)), np.zeros((4, 1)))

    def test_csv_round_trip(self, tmp_path, rng):
        obs = rng.standard_normal((20, 3))
        act = rng.uniform(-1, 1, (20, 2))
        data = DemoDataset.from_raw(obs, act)
        save_demos(tmp_path / "demos.csv", data)
        loaded = load_demos(tmp_path / "demos.csv")
        assert np.array_equal(loaded.observations, data.observations)
        assert np.array_equal(loaded.actions, data.actions)
        assert np.array_equal(loaded.norm.obs.lo, data.norm.obs.lo)
        assert np.array_equal(loaded.norm.act.hi, data.norm.act.hi)


class TestSampleAction:
    def test_single_step_zero_net_formula(self):
        policy = make_policy(2, 1, hidden=(4,), T=1, beta_min=0.5, beta_max=0.5, seed=0)
        policy = policy.with_params(ParamVector.zeros(mlp_layout(policy.net.spec)))
        rng = np.random.default_rng(11)
        action, chain = sample_action(policy, np.zeros(2), rng)
        a1 = chain.states[0]
        expected = np.clip(a1 / np.sqrt(1.0 - 0.5), -1.0, 1.0)
        assert np.allclose(action, expected, atol=1e-15)

    def test_fixed_seed_reproducible(self):
        policy = make_policy(3, 2, hidden=(8,), T=5, seed=1)
        a1, _ = sample_action(policy, np.zeros(3), np.random.default_rng(42))
        a2, _ = sample_action(policy, np.zeros(3), np.random.default_rng(42))
        assert np.array_equal(a1, a2)

    def test_actions_always_in_unit_box(self, rng):
        policy = make_policy(3, 2, hidden=(8,), T=5, seed=2)
        states = rng.standard_normal((50, 3))
        actions, _ = sample_actions(policy, states, rng)
        assert np.all(actions >= -1.0) and np.all(actions <= 1.0)

    def test_recorded_chain_reconstructs(self, rng):
        policy = make_policy(3, 2, hidden=(8,), T=6, seed=3)
        _, chain = sample_action(policy, rng.standard_normal(3), rng)
        chain.validate()

    def test_state_shape_checked(self, rng):
        policy = make_policy(3, 2, hidden=(8,), T=4, seed=0)
        with pytest.raises(ShapeError):
            sample_action(policy, np.zeros(5), rng)


class TestPretrainBC:
    def test_zero_iterations_leaves_params(self, rng):
        data = DemoDataset.from_normalized(np.zeros((10, 2)), np.full((10, 1), 0.2))
        policy = make_policy(2, 1, hidden=(4,), T=3, seed=0)
        before = policy.params.values.copy()
        trained, losses = pretrain_bc(policy, data, OptimHyper(eta=1e-3), 0, 8, rng)
        assert np.array_equal(trained.params.values, before)
        assert losses == []
        assert trained.norm is data.norm

    def test_constant_action_converges_single_step(self):
        rng = np.random.default_rng(0)
        data = DemoDataset.from_normalized(np.zeros((1000, 2)), np.full((1000, 1), 0.3))
        policy = make_policy(2, 1, hidden=(32, 32), T=1, beta_min=0.5, beta_max=0.5, seed=0)
        policy, losses = pretrain_bc(policy, data, OptimHyper(eta=1e-3), 2000, 128, rng)
        assert float(np.mean(losses[-100:])) < 0.01

    def test_loss_non_increasing_when_smoothed(self):
        rng = np.random.default_rng(0)
        data = DemoDataset.from_normalized(np.zeros((1000, 2)), np.full((1000, 1), 0.3))
        policy = make_policy(2, 1, hidden=(32, 32), T=1, beta_min=0.5, beta_max=0.5, seed=0)
        _, losses = pretrain_bc(policy, data, OptimHyper(eta=1e-3), 2000, 128, rng)
        blocks = np.array(losses).reshape(-1, 100).mean(axis=1)
        # descent up to minibatch wobble at the converged floor
        assert np.all(np.diff(blocks) <= 1e-3)
        assert blocks[-1] < 0.01 * blocks[0]

    def test_dimension_mismatch_rejected(self, rng):
        data = DemoDataset.from_normalized(np.zeros((10, 3)), np.zeros((10, 1)))
        policy = make_policy(2, 1, hidden=(4,), T=3, seed=0)
        with pytest.raises(ShapeError):
            pretrain_bc(policy, data, OptimHyper(), 1, 4, rng)


class TestBehaviorCloningQuality:
    def test_pointmass_clone_tracks_expert(self):
        # held-out comparison: sampled actions vs scripted expert actions
        rng = np.random.default_rng(0)
        env = PointMassEnv(seed=rng)
        data = gen_demos(env, PointMassExpert(), 100, rng)
        policy = make_policy(6, 2, hidden=(64, 64), T=20, seed=0)
        policy, _ = pretrain_bc(
            policy, data, OptimHyper(eta=2e-3, weight_decay_lambda=1e-6), 4000, 128, rng
        )
        obs_rows, act_rows = [], []
        held_out = PointMassEnv(seed=rng)
        while len(obs_rows) < 200:
            o, a, _, _ = rollout_expert(held_out, PointMassExpert(), rng)
            obs_rows.extend(o)
            act_rows.extend(a)
        obs_n = normalize(np.array(obs_rows[:200]), policy.norm.obs)
        exp_n = normalize(np.array(act_rows[:200]), policy.norm.act)
        sampled, _ = sample_actions(policy, obs_n, rng)
        assert float(np.mean((sampled - exp_n) ** 2)) < 0.05

    def test_bimodal_dataset_recovers_both_modes(self):
        # 50/50 mixture at +-0.5 with sigma 0.05; at least 20% of samples
        # land within 0.15 of each mode
        rng = np.random.default_rng(0)
        n = 2000
        signs = np.where(rng.random(n) < 0.5, 0.5, -0.5)
        actions = np.clip((signs + 0.05 * rng.standard_normal(n))[:, None], -1, 1)
        data = DemoDataset.from_normalized(np.zeros((n, 2)), actions)
        policy = make_policy(2, 1, hidden=(64, 64), T=20, seed=0)
        policy, _ = pretrain_bc(
            policy, data, OptimHyper(eta=1e-3, weight_decay_lambda=1e-6), 2000, 128, rng
        )
        samples, _ = sample_actions(policy, np.zeros((1000, 2)), rng)
        a = samples[:, 0]
        assert np.mean(np.abs(a - 0.5) < 0.15) >= 0.2
        assert np.mean(np.abs(a + 0.5) < 0.15) >= 0.2
