import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyseqdpp import data_io, metrics, rl
from dyseqdpp import kernel_net as kn
from dyseqdpp import seq_model as sm
from dyseqdpp.errors import DivergedError, MissingAnnotation

from conftest import rel_err

TINY_POLICY = sm.Policy(initial_length=2)


def tiny_video(rng, n=6, d=3):
    return data_io.VideoRecord(id="tiny", shot_features=rng.random((n, d)),
                               user_summaries=[[1, 4], [0, 3, 5]], concepts=rng.integers(0, 2, size=(n, 6)),
                               scene_boundaries=[(0, 2), (2, 4), (4, n)], shot_duration_seconds=5,
                               oracle_summary=[1, 3, 5])


def tiny_params(rng, d=3):
    p = kn.PolicyParams.init(d, rng, d_h1=3, d_h2=3, d_k=3, lengths=(2, 3))
    p.W *= 2.0
    p.softmax_weights[:] = rng.normal(size=p.softmax_weights.shape)
    return p


class TestDiscount:
    def test_half(self):
        np.testing.assert_allclose(rl.discount_schedule(0.5, 3), [0.25, 0.5, 1.0])

    def test_final_only(self):
        np.testing.assert_array_equal(rl.discount_schedule(None, 4), [0, 0, 0, 1])

    @settings(max_examples=50, deadline=None)
    @given(gamma=st.floats(1e-6, 0.999), T=st.integers(1, 30))
    def test_monotone_ending_at_one(self, gamma, T):
        w = rl.discount_schedule(gamma, T)
        assert w[-1] == 1.0
        assert np.all(np.diff(w) >= 0) and np.all((w >= 0) & (w <= 1))


class TestReward:
    def test_perfect(self, rng):
        v = tiny_video(rng)
        v.user_summaries = [[1, 4]]
        for mode in ("full", "partial"):
            assert rl.step_reward(rl.RewardConfig(mode=mode), [1, 4], v, v.num_shots) == 1.0

    def test_empty_system(self, rng):
        assert rl.step_reward(rl.RewardConfig(), [], tiny_video(rng), 6) == 0.0

    def test_partial_before_any_user_shot(self, rng):
        v = tiny_video(rng)
        v.user_summaries = [[3, 4]]
        assert rl.step_reward(rl.RewardConfig(mode="partial"), [0], v, 2) == 0.0

    def test_partial_truncates(self, rng):
        v = tiny_video(rng)
        v.user_summaries = [[1, 4]]
        cfg = rl.RewardConfig(mode="partial")
        expect = metrics.bipartite_match_f1([1], [1], v.concepts, 12).f1
        assert rl.step_reward(cfg, [1], v, 3) == expect == 1.0
        assert rl.step_reward(rl.RewardConfig(mode="full"), [1], v, 3) < 1.0

    def test_user_average(self, rng):
        v = tiny_video(rng)
        cfg = rl.RewardConfig()
        expect = np.mean([metrics.bipartite_match_f1([1, 3], u, v.concepts, 12).f1 for u in v.user_summaries])
        assert rl.step_reward(cfg, [1, 3], v, 6) == pytest.approx(expect)

    def test_missing_annotation(self, rng):
        v = tiny_video(rng)
        v.user_summaries = []
        with pytest.raises(MissingAnnotation):
            rl.step_reward(rl.RewardConfig(), [1], v, 6)

    def test_rewards_bounded(self, rng):
        v = tiny_video(rng, n=20)
        v.user_summaries = [[2, 9, 15]]
        p = tiny_params(rng)
        for mode in ("full", "partial"):
            traj = rl.attach_rewards(sm.rollout(p, v.features(), "stochastic", rng), v,
                                     rl.RewardConfig(mode=mode, gamma=0.9))
            assert all(0.0 <= r <= 1.0 for r in traj.rewards)


class TestEstimator:
    def test_zero_rewards(self, rng):
        v = tiny_video(rng)
        p = tiny_params(rng)
        traj = sm.rollout(p, v.features(), "stochastic", rng, TINY_POLICY)
        for s in traj.steps:
            s.reward = 0.0
        g = rl.estimate_from_trajectories(p, v, [traj], 0.9, TINY_POLICY)
        assert g.norm() == 0.0

    def test_duplicates_match_single(self, rng):
        v = tiny_video(rng)
        p = tiny_params(rng)
        traj = rl.attach_rewards(sm.rollout(p, v.features(), "stochastic", rng, TINY_POLICY), v,
                                 rl.RewardConfig(gamma=0.7))
        one = rl.estimate_from_trajectories(p, v, [traj], 0.7, TINY_POLICY)
        two = rl.estimate_from_trajectories(p, v, [traj, traj], 0.7, TINY_POLICY)
        np.testing.assert_allclose(one.flat(), two.flat(), atol=1e-15)

    def test_trajectory_form(self, rng):
        # -(Σ g_t r_t) ∇log p(τ)
        v = tiny_video(rng)
        p = tiny_params(rng)
        traj = rl.attach_rewards(sm.rollout(p, v.features(), "stochastic", rng, TINY_POLICY), v,
                                 rl.RewardConfig(gamma=0.5))
        g = rl.trajectory_gradient(p, v, traj, 0.5, TINY_POLICY)
        ret = sum(0.5 ** (traj.T - t) * r for t, r in enumerate(traj.rewards, start=1))
        expect = sm.grad_log_prob_trajectory(p, v.features(), traj, TINY_POLICY) * (-ret)
        np.testing.assert_allclose(g.flat(), expect.flat(), atol=1e-12)

    def test_oracle_matches_finite_differences(self, rng):
        v = tiny_video(rng)
        p = tiny_params(rng)
        for reward in (rl.RewardConfig(), rl.RewardConfig(mode="partial", gamma=0.5)):
            o = rl.exact_gradient_oracle(p, v, reward, TINY_POLICY)
            assert o.num_trajectories > 10
            assert rel_err(o.exact.flat(), o.finite_difference.flat()) <= 1e-4

    def test_constant_reward_zero_gradient(self, rng):
        v = tiny_video(rng)
        p = tiny_params(rng)
        enum = sm.enumerate_trajectories(p, v.features(), TINY_POLICY)
        trajs = []
        for t, _ in enum:
            for s in t.steps:
                s.reward = 0.3
            trajs.append(t)
        g = rl.estimate_from_trajectories(p, v, trajs, 0.8, TINY_POLICY, [pr for _, pr in enum])
        assert np.abs(g.flat()).max() <= 1e-10

    def test_enumeration_weighted_estimate_is_oracle(self, rng):
        v = tiny_video(rng)
        p = tiny_params(rng)
        reward = rl.RewardConfig(gamma=0.6)
        oracle = rl.exact_gradient_oracle(p, v, reward, TINY_POLICY, finite_differences=False)
        total = p.zeros_like()
        for traj, pr in sm.enumerate_trajectories(p, v.features(), TINY_POLICY):
            rl.attach_rewards(traj, v, reward)
            total.iadd(rl.trajectory_gradient(p, v, traj, 0.6, TINY_POLICY), pr)
        assert np.abs(total.flat() - oracle.exact.flat()).max() <= 1e-8

    def test_per_step_surrogate(self, rng):
        # -Σ_t g_t r_t ∇log π(a_t|s_t)
        v = tiny_video(rng, n=9)
        p = tiny_params(rng)
        traj = rl.attach_rewards(sm.rollout(p, v.features(), "stochastic", rng, TINY_POLICY), v,
                                 rl.RewardConfig(gamma=0.5))
        g = rl.trajectory_gradient(p, v, traj, 0.5, TINY_POLICY, "per_step")
        expect = p.zeros_like()
        for t, step in enumerate(traj.steps, start=1):
            w = np.zeros(traj.T)
            w[t - 1] = 1.0
            one = sm.grad_log_prob_trajectory(p, v.features(), traj, TINY_POLICY, w)
            expect.iadd(one, -(0.5 ** (traj.T - t)) * step.reward)
        np.testing.assert_allclose(g.flat(), expect.flat(), atol=1e-12)

    def test_sampled_estimate_near_oracle(self, rng):
        v = tiny_video(rng)
        p = tiny_params(rng)
        reward = rl.RewardConfig(gamma=0.5)
        oracle = rl.exact_gradient_oracle(p, v, reward, TINY_POLICY, finite_differences=False).exact.flat()
        cfg = rl.TrainConfig(num_trajectories=1, initial_length=2)
        samples = []
        for k in range(3000):
            rng_k = rl.rollout_seed(11, 0, 0, k)
            traj = rl.attach_rewards(sm.rollout(p, v.features(), "stochastic", rng_k, cfg.policy), v, reward)
            samples.append(rl.trajectory_gradient(p, v, traj, 0.5, cfg.policy).flat())
        samples = np.array(samples)
        se = samples.std(axis=0, ddof=1) / np.sqrt(len(samples))
        z = np.abs(samples.mean(axis=0) - oracle) / np.maximum(se, 1e-12)
        assert np.mean(z <= 3) >= 0.95


class TestPolicyGradientEstimate:
    def test_deterministic_and_averaged(self, rng):
        v = tiny_video(rng, n=12)
        p = tiny_params(rng)
        cfg = rl.TrainConfig(num_trajectories=3, master_seed=5, initial_length=2)
        a = rl.policy_gradient_estimate(p, [v, v], cfg, rl.RewardConfig())
        b = rl.policy_gradient_estimate(p, [v, v], cfg, rl.RewardConfig())
        np.testing.assert_array_equal(a.gradient.flat(), b.gradient.flat())
        manual = p.zeros_like()
        for item in range(2):
            for k in range(3):
                traj = sm.rollout(p, v.features(), "stochastic", rl.rollout_seed(5, 0, item, k), cfg.policy)
                rl.attach_rewards(traj, v, rl.RewardConfig())
                manual.iadd(rl.trajectory_gradient(p, v, traj, None, cfg.policy), 1 / 6)
        np.testing.assert_allclose(a.gradient.flat(), manual.flat(), atol=1e-14)


class TestOracleForced:
    def test_forced_subsets(self, rng):
        v = tiny_video(rng, n=12)
        v.oracle_summary = [1, 5, 6, 11]
        v.scene_boundaries = [(0, 4), (4, 8), (8, 12)]
        p = kn.PolicyParams.init(3, rng, d_h1=8, d_h2=8, d_k=8, lengths=(2, 3))
        traj = sm.rollout(p, v.features(), "stochastic", rng, TINY_POLICY, forced_summary=v.oracle)
        for s in traj.steps:
            assert s.action.subset == tuple(i for i in v.oracle if s.state.segment_start <= i < s.state.segment_end)

    def test_single_length_reduces_to_weighted_likelihood(self, rng):
        v = tiny_video(rng, n=12)
        v.scene_boundaries = [(0, 4), (4, 8), (8, 12)]
        cfg = rl.TrainConfig(num_trajectories=2, initial_length=3)
        while True:
            p = kn.PolicyParams.init(3, rng, d_h1=8, d_h2=8, d_k=8, lengths=(3,))
            traj = sm.rollout(p, v.features(), "greedy", policy=cfg.policy, forced_summary=v.oracle)
            if np.isfinite(traj.log_prob):
                break
        g = rl.oracle_forced_update(p, v, cfg, rl.RewardConfig())
        r = rl.forced_reward(p, v, rl.RewardConfig())
        expect = sm.grad_log_prob_trajectory(p, v.features(), traj, cfg.policy) * (-r)
        np.testing.assert_allclose(g.flat(), expect.flat(), atol=1e-12)

    def test_reward_is_overlap_of_diagonal_summary(self, rng):
        v = tiny_video(rng, n=12)
        v.scene_boundaries = [(0, 4), (4, 8), (8, 12)]
        p = tiny_params(rng)
        scores = np.array([float(np.sum((p.W @ kn.embed(p, f)) ** 2)) for f in v.features()])
        means = [scores[a:b].mean() for a, b in v.scene_boundaries]
        # budget 0.35 * 60 s = 21 s fits exactly one 20 s scene: the best mean wins
        best = int(np.argmax(means))
        shots = list(range(*v.scene_boundaries[best]))
        expect = np.mean([metrics.temporal_overlap_f1(shots, u).f1 for u in v.user_summaries])
        assert rl.forced_reward(p, v, rl.RewardConfig(), 0.35) == pytest.approx(expect)

    def test_unrepresentable_oracle_contributes_nothing(self, rng):
        v = tiny_video(rng, n=8)
        v.oracle_summary = [2, 3]
        p = kn.PolicyParams.init(3, rng, d_h1=4, d_h2=4, d_k=1, lengths=(2,))
        g = rl.oracle_forced_update(p, v, rl.TrainConfig(initial_length=2), rl.RewardConfig())
        assert g.norm() == 0.0

    def test_missing_oracle(self, rng):
        v = tiny_video(rng)
        v.oracle_summary = None
        v.user_summaries = []
        with pytest.raises(MissingAnnotation):
            rl.oracle_forced_update(tiny_params(rng), v, rl.TrainConfig(initial_length=2), rl.RewardConfig())


class TestTrain:
    def test_zero_lr_bit_exact(self, rng):
        v = tiny_video(rng, n=10)
        p = tiny_params(rng)
        out, log = rl.train(p, [v], rl.TrainConfig(learning_rate=0.0, num_updates=3, num_trajectories=2,
                                                   initial_length=2), rl.RewardConfig())
        assert out.flat().tobytes() == p.flat().tobytes()
        assert len(log) == 3

    def test_log_reproducible(self, rng):
        v = tiny_video(rng, n=10)
        p = tiny_params(rng)
        cfg = rl.TrainConfig(learning_rate=0.05, num_updates=4, num_trajectories=2, master_seed=3, initial_length=2)
        runs = [rl.train(p, [v, v], cfg, rl.RewardConfig()) for _ in range(2)]
        assert [r.to_json() for r in runs[0][1]] == [r.to_json() for r in runs[1][1]]
        assert runs[0][0].flat().tobytes() == runs[1][0].flat().tobytes()

    def test_input_params_untouched(self, rng):
        v = tiny_video(rng, n=10)
        p = tiny_params(rng)
        before = p.flat().copy()
        rl.train(p, [v], rl.TrainConfig(learning_rate=0.5, num_updates=2, initial_length=2), rl.RewardConfig())
        np.testing.assert_array_equal(p.flat(), before)

    def test_diverged(self, rng):
        v = tiny_video(rng, n=10)
        cfg = rl.TrainConfig(learning_rate=math.inf, num_updates=5, clip_norm=None, initial_length=2)
        with pytest.raises(DivergedError):
            rl.train(tiny_params(rng), [v], cfg, rl.RewardConfig(gamma=0.9))

    def test_workers_match_serial(self, rng):
        v = tiny_video(rng, n=10)
        p = tiny_params(rng)
        base = dict(learning_rate=0.05, num_updates=2, num_trajectories=2, batch_size=2, initial_length=2)
        a = rl.train(p, [v, v], rl.TrainConfig(**base), rl.RewardConfig())[0]
        b = rl.train(p, [v, v], rl.TrainConfig(**base, workers=2), rl.RewardConfig())[0]
        assert a.flat().tobytes() == b.flat().tobytes()
