import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from dyseqdpp import dpp
from dyseqdpp import kernel_net as kn
from dyseqdpp import seq_model as sm
from dyseqdpp.errors import InvalidAction, InvalidInput, InvalidTrajectory

DY = sm.Policy()


def identity_params(d, lengths=kn.DEFAULT_LENGTHS):
    """With one-hot features this network yields the identity kernel."""
    return kn.PolicyParams(V=np.eye(d), U=np.eye(d), W=np.eye(d), softmax_weights=np.zeros((len(lengths), d)),
                           softmax_bias=np.zeros(len(lengths)), lengths=lengths)


def small_params(rng, d_f=6, lengths=(2, 3)):
    p = kn.PolicyParams.init(d_f, rng, d_h1=8, d_h2=6, d_k=6, lengths=lengths)
    p.softmax_weights[:] = rng.normal(size=p.softmax_weights.shape)
    return p


class TestInitialState:
    def test_long_video(self):
        s, a = sm.initial_state(100)
        assert (s.segment_start, s.segment_end) == (0, 10)
        assert a == sm.SummaryAction((), 10)

    def test_short_video_clamped(self):
        s, _ = sm.initial_state(7)
        assert list(s.segment) == list(range(7))

    def test_nothing_selected(self):
        assert sm.initial_state(30)[0].selected == ()

    def test_empty_video(self):
        with pytest.raises(InvalidInput):
            sm.initial_state(0)


class TestTransition:
    def test_definitional(self):
        s, _ = sm.initial_state(100)
        t = sm.transition(s, sm.SummaryAction((3,), 5), 100)
        assert (t.segment_start, t.segment_end, t.selected, t.last_selection) == (10, 15, (3,), (3,))

    def test_terminal(self):
        s, _ = sm.initial_state(8)
        assert sm.transition(s, sm.SummaryAction((), 5), 8) is None

    def test_clamped(self):
        s = sm.SummaryState((), (), 10, 6, 2)
        assert sm.transition(s, sm.SummaryAction((), 15), 20).segment_len == 4

    def test_subset_outside_segment(self):
        s, _ = sm.initial_state(30)
        with pytest.raises(InvalidAction):
            sm.transition(s, sm.SummaryAction((12,), 5), 30)

    def test_pure(self):
        s, _ = sm.initial_state(40)
        a = sm.SummaryAction((1, 4), 7)
        assert sm.transition(s, a, 40) == sm.transition(s, a, 40)


class TestPolicyDistribution:
    def test_joint_uniform_example(self):
        feats = np.eye(2)
        s = sm.SummaryState((), (), 0, 2, 1)
        dist = sm.policy_distribution(identity_params(2), feats, s)
        joint = dist.joint()
        assert joint.shape == (4, 11)
        np.testing.assert_allclose(joint, 1 / 44, atol=1e-15)

    def test_fixed_is_dirac(self, rng):
        p = small_params(rng, lengths=tuple(range(5, 16)))
        s, _ = sm.initial_state(30)
        dist = sm.policy_distribution(p, rng.random((30, 6)), s, sm.Policy(sm.PolicyKind.fixed(10)))
        assert dist.length_probs[p.length_index(10)] == 1.0

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_joint_sums_to_one(self, seed):
        rng = np.random.default_rng(seed)
        p = small_params(rng)
        F = rng.random((12, 6))
        s = sm.SummaryState((0, 1), (1,), 4, 5, 3)
        assert sm.policy_distribution(p, F, s).joint().sum() == pytest.approx(1.0, abs=1e-9)

    def test_markov_locality(self, rng):
        p = small_params(rng)
        F = rng.random((14, 6))
        s = sm.SummaryState((0, 2, 6), (6,), 8, 4, 3)
        G = F.copy()
        G[[0, 2]] = rng.random((2, 6))
        a = sm.policy_distribution(p, F, s).subsets.probs
        b = sm.policy_distribution(p, G, s).subsets.probs
        np.testing.assert_array_equal(a, b)


class TestActions:
    def test_point_mass(self, rng):
        p = small_params(rng)
        p.W[:] = 0.0
        p.softmax_weights[:] = 0.0
        p.softmax_bias[1] = 1000.0
        s, _ = sm.initial_state(12, 3)
        F = rng.random((12, 6))
        want = sm.SummaryAction((), 3)
        for seed in range(5):
            assert sm.sample_action(p, F, s, np.random.default_rng(seed))[0] == want
        assert sm.greedy_action(p, F, s) == want

    def test_seed_reproducible(self, rng):
        p = small_params(rng)
        F = rng.random((12, 6))
        s = sm.SummaryState((1,), (1,), 3, 4, 2)
        draws = [sm.sample_action(p, F, s, np.random.default_rng(9)) for _ in range(2)]
        assert draws[0] == draws[1]

    def test_greedy_uniform_policy(self):
        s = sm.SummaryState((), (), 0, 2, 1)
        assert sm.greedy_action(identity_params(2), np.eye(2), s) == sm.SummaryAction((), 5)

    def test_greedy_is_joint_argmax(self, rng):
        for _ in range(10):
            p = small_params(rng)
            p.W *= 3.0
            F = rng.random((10, 6))
            s = sm.SummaryState((0,), (0,), 2, 5, 2)
            dist = sm.policy_distribution(p, F, s)
            best = max(dist.actions(), key=lambda ap: ap[1])[1]
            assert dist.prob(sm.greedy_action(p, F, s)) == pytest.approx(best, rel=1e-12)

    def test_returned_log_probs(self, rng):
        p = small_params(rng)
        F = rng.random((12, 6))
        s = sm.SummaryState((1,), (1,), 3, 4, 2)
        a, lx, ll = sm.sample_action(p, F, s, rng)
        assert lx == pytest.approx(sm.subset_log_prob(p, F, s, a.subset), abs=1e-12)
        assert ll == pytest.approx(sm.length_log_prob(p, F, s, a.subset, a.next_len), abs=1e-12)

    def test_sampling_chi_squared(self):
        rng = np.random.default_rng(17)
        p = small_params(rng, d_f=3, lengths=(2, 3))
        p.W *= 2.0
        F = rng.random((6, 3))
        s = sm.SummaryState((0,), (0,), 2, 3, 2)
        dist = sm.policy_distribution(p, F, s)
        index = {a: i for i, (a, _) in enumerate(dist.actions())}
        expected = np.array([pr for _, pr in dist.actions()])
        n = 100_000
        counts = np.zeros(len(index))
        for _ in range(n):
            counts[index[sm.sample_action(p, F, s, rng)[0]]] += 1
        keep = expected > 0
        assert counts[~keep].sum() == 0
        assert stats.chisquare(counts[keep], expected[keep] * n / expected[keep].sum()).pvalue > 0.001


class TestRollout:
    def test_fixed_ten_on_25_shots(self, rng):
        p = small_params(rng, lengths=tuple(range(5, 16)))
        traj = sm.rollout(p, rng.random((25, 6)), "stochastic", rng, sm.Policy(sm.PolicyKind.fixed(10)))
        assert [b - a for a, b in traj.segments] == [10, 10, 5]

    @pytest.mark.parametrize("n,l", [(1, 5), (25, 10), (37, 6), (60, 15), (14, 7)])
    def test_fixed_step_count(self, rng, n, l):
        p = small_params(rng, lengths=tuple(range(5, 16)))
        traj = sm.rollout(p, rng.random((n, 6)), "greedy", policy=sm.Policy(sm.PolicyKind.fixed(l)))
        assert traj.T == math.ceil(n / l)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 40))
    def test_segments_partition_video(self, seed, n):
        rng = np.random.default_rng(seed)
        p = small_params(rng, lengths=(2, 3, 5))
        traj = sm.rollout(p, rng.random((n, 6)), "stochastic", rng)
        segs = traj.segments
        assert segs[0][0] == 0 and segs[-1][1] == n
        assert all(a[1] == b[0] for a, b in zip(segs, segs[1:]))
        # termination: the last segment starts inside the video and the proposals reach its end
        lens = [sm.initial_state(n)[1].next_len] + [s.action.next_len for s in traj.steps]
        assert sum(lens[:traj.T - 1]) < n <= sum(lens[:traj.T])
        summary = traj.summary
        assert list(summary) == sorted(set(summary))

    def test_greedy_deterministic(self, rng):
        p = small_params(rng)
        F = rng.random((20, 6))
        assert sm.rollout(p, F, "greedy").dump() == sm.rollout(p, F, "greedy").dump()

    def test_stochastic_needs_rng(self, rng):
        with pytest.raises(InvalidInput):
            sm.rollout(small_params(rng), rng.random((5, 6)), "stochastic")

    def test_forced_summary(self, rng):
        p = small_params(rng)
        F = rng.random((20, 6))
        traj = sm.rollout(p, F, "stochastic", rng, forced_summary=[1, 7, 12, 19])
        assert traj.summary == (1, 7, 12, 19)

    def test_dump_fields(self, rng):
        p = small_params(rng)
        line = sm.rollout(p, rng.random((12, 6)), "greedy").dump().splitlines()[0]
        assert [f.split("=")[0] for f in line.split(" ")] == \
            ["step", "segment", "subset", "length", "logp_subset", "logp_length", "reward"]


class TestTrajectoryLogProb:
    def test_matches_recorded(self, rng):
        p = small_params(rng)
        F = rng.random((15, 6))
        traj = sm.rollout(p, F, "stochastic", rng)
        assert sm.log_prob_trajectory(p, F, traj) == pytest.approx(traj.log_prob, abs=1e-10)

    def test_single_step(self, rng):
        p = small_params(rng)
        F = rng.random((4, 6))
        traj = sm.rollout(p, F, "stochastic", rng)
        assert traj.T == 1
        dist = sm.policy_distribution(p, F, traj.steps[0].state)
        assert sm.log_prob_trajectory(p, F, traj) == pytest.approx(np.log(dist.prob(traj.steps[0].action)),
                                                                   abs=1e-12)

    def test_enumeration_two_segments(self, rng):
        p = small_params(rng, lengths=(2, 3))
        F = rng.random((5, 6))
        pol = sm.Policy(initial_length=2)
        trajs = sm.enumerate_trajectories(p, F, pol)
        assert sum(pr for _, pr in trajs) == pytest.approx(1.0, abs=1e-9)
        for traj, pr in trajs:
            assert np.exp(sm.log_prob_trajectory(p, F, traj, pol)) == pytest.approx(pr, rel=1e-9)

    def test_tampered_trajectory(self, rng):
        p = small_params(rng)
        F = rng.random((15, 6))
        traj = sm.rollout(p, F, "stochastic", rng)
        with pytest.raises(InvalidTrajectory):
            sm.log_prob_trajectory(p, F[:10], traj)
        traj.steps.pop()
        with pytest.raises(InvalidTrajectory):
            sm.log_prob_trajectory(p, F, traj)


class TestTrajectoryGradient:
    def test_finite_differences(self, rng):
        from conftest import central_diff, rel_err
        p = kn.PolicyParams.init(3, rng, d_h1=4, d_h2=3, d_k=3, lengths=(2, 3))
        p.softmax_weights[:] = rng.normal(size=p.softmax_weights.shape)
        F = rng.random((7, 3))
        traj = sm.rollout(p, F, "stochastic", rng)
        g = sm.grad_log_prob_trajectory(p, F, traj)
        fd = central_diff(lambda v: sm.log_prob_trajectory(p.with_flat(v), F, traj), p.flat())
        assert rel_err(g.flat(), fd) <= 1e-4


def test_uniform_summary():
    assert sm.uniform_summary(10, 2) == (2, 7)
    assert sm.uniform_summary(5, 0) == ()
    assert sm.uniform_summary(3, 9) == (0, 1, 2)


def test_sequential_sampler_matches_enumeration():
    rng = np.random.default_rng(23)
    B = rng.standard_normal((5, 5))
    L = B @ B.T
    dist = dpp.enumerate_distribution(L, [2])
    n = 100_000
    counts = np.bincount([dist.mask(dpp.sample_conditional(L, [2], rng)) for _ in range(n)],
                         minlength=len(dist.probs))
    assert stats.chisquare(counts, dist.probs * n / dist.total()).pvalue > 0.001
