"""Policy-gradient training of the summarization policy.

The loss is ``J = -Q(s0, a0)``, the negative expected discounted summary quality.
Its gradient is estimated with the score-function identity from sampled
trajectories, each weighted by its discounted return. Parameters move by plain
gradient descent, one estimate per update.
"""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics
from . import seq_model as sm
from .data_io import VideoRecord
from .errors import DivergedError, InvalidInput, MissingAnnotation
from .kernel_net import ParamGradient, PolicyParams

FINAL_ONLY = None


@dataclass(frozen=True)
class RewardConfig:
    """How a (partial) summary is scored.

    ``gamma=None`` rewards only the final summary. ``protocol="matching"`` uses
    windowed concept matching; ``"overlap"`` uses temporal overlap of shot sets.
    """

    mode: str = "full"  # "full" | "partial"
    metric: str = "f1"  # "f1" | "precision" | "recall"
    gamma: float | None = FINAL_ONLY
    protocol: str = "matching"
    window: float = 12
    matching: str = "weighted"
    hamming_threshold: int = 0

    def __post_init__(self):
        if self.mode not in ("full", "partial"):
            raise InvalidInput(f"reward mode must be 'full' or 'partial', got {self.mode!r}")
        if self.metric not in ("f1", "precision", "recall"):
            raise InvalidInput(f"unknown reward metric {self.metric!r}")
        if self.gamma is not None and not 0.0 < self.gamma < 1.0:
            raise InvalidInput("gamma must lie in (0, 1); use None for final-summary-only rewards")
        if self.protocol not in ("matching", "overlap"):
            raise InvalidInput(f"unknown reward protocol {self.protocol!r}")


@dataclass(frozen=True)
class TrainConfig:
    num_trajectories: int = 8
    learning_rate: float = 1e-3
    num_updates: int = 100
    master_seed: int = 0
    sampling: str = "stochastic"  # "stochastic" | "greedy"
    phi_mode: str = "concat"
    oracle_forced: bool = False
    surrogate: str = "trajectory"  # "trajectory" | "per_step"
    clip_norm: float | None = 10.0
    batch_size: int = 1
    fixed_length: int | None = None
    initial_length: int = sm.DEFAULT_INITIAL_LENGTH
    budget_fraction: float = metrics.DEFAULT_BUDGET_FRACTION
    workers: int = 1

    def __post_init__(self):
        if self.num_trajectories < 1:
            raise InvalidInput("num_trajectories must be at least 1")
        if not self.learning_rate >= 0.0:
            raise InvalidInput("learning_rate must be non-negative")
        if self.sampling not in ("stochastic", "greedy"):
            raise InvalidInput(f"unknown sampling mode {self.sampling!r}")
        if self.surrogate not in ("trajectory", "per_step"):
            raise InvalidInput(f"unknown surrogate {self.surrogate!r}")
        if self.batch_size < 1:
            raise InvalidInput("batch_size must be at least 1")

    @property
    def policy(self) -> sm.Policy:
        kind = sm.PolicyKind.fixed(self.fixed_length) if self.fixed_length else sm.PolicyKind.dynamic()
        return sm.Policy(kind, self.phi_mode, self.initial_length)


def discount_weight(gamma: float | None, t: int, T: int) -> float:
    """``gamma ** (T - t)`` for steps ``1 <= t <= T``; final-only when ``gamma`` is None."""
    if not 1 <= t <= T:
        raise InvalidInput(f"step {t} outside 1..{T}")
    if gamma is None:
        return 1.0 if t == T else 0.0
    return float(gamma ** (T - t))


def discount_schedule(gamma: float | None, T: int) -> np.ndarray:
    return np.array([discount_weight(gamma, t, T) for t in range(1, T + 1)])


def _pick(score: metrics.MatchScore, metric: str) -> float:
    return {"f1": score.f1, "precision": score.precision, "recall": score.recall}[metric]


def step_reward(config: RewardConfig, system_partial, video: VideoRecord, segment_end: int) -> float:
    """Score of the summary so far against every user summary, averaged.

    In partial mode each user summary is cut to shots before ``segment_end``;
    an empty cut reference scores 0.
    """
    if not video.user_summaries:
        raise MissingAnnotation(f"video {video.id} has no user summaries")
    if config.protocol == "matching" and video.concepts is None:
        raise MissingAnnotation(f"video {video.id} has no concept annotations")
    values = []
    for user in video.user_summaries:
        ref = [i for i in user if i < segment_end] if config.mode == "partial" else user
        if config.mode == "partial" and not ref:
            values.append(0.0)
            continue
        if config.protocol == "matching":
            score = metrics.bipartite_match_f1(system_partial, ref, video.concepts, config.window,
                                               config.matching, config.hamming_threshold)
        else:
            score = metrics.temporal_overlap_f1(system_partial, ref)
        values.append(_pick(score, config.metric))
    return float(np.mean(values))


def attach_rewards(traj: sm.Trajectory, video: VideoRecord, config: RewardConfig) -> sm.Trajectory:
    """Fill each step's reward from the cumulative summary at that step."""
    summary: list[int] = []
    final_only = config.gamma is None
    for t, step in enumerate(traj.steps, start=1):
        summary.extend(step.action.subset)
        if final_only and t < traj.T:
            step.reward = 0.0
        else:
            step.reward = step_reward(config, summary, video, step.state.segment_end)
    return traj


def trajectory_return(traj: sm.Trajectory, gamma: float | None) -> float:
    w = discount_schedule(gamma, traj.T)
    return float(np.dot(w, traj.rewards))


def _score_weights(traj: sm.Trajectory, gamma, surrogate: str) -> np.ndarray:
    """Per-step multipliers of ∇log π(a_t|s_t) in ``-∇J`` for one trajectory."""
    w = discount_schedule(gamma, traj.T) * np.asarray(traj.rewards, dtype=float)
    if surrogate == "per_step":
        return w
    return np.full(traj.T, w.sum())


def trajectory_gradient(params: PolicyParams, video: VideoRecord, traj: sm.Trajectory, gamma,
                        policy: sm.Policy, surrogate: str = "trajectory") -> ParamGradient:
    """-(Σ_t g_t r_t) ∇log p(τ), or the per-step variant -Σ_t g_t r_t ∇log π_t."""
    weights = _score_weights(traj, gamma, surrogate)
    if not np.any(weights):
        return params.zeros_like()
    return sm.grad_log_prob_trajectory(params, video.features(), traj, policy, -weights)


def estimate_from_trajectories(params, video, trajectories: Sequence[sm.Trajectory], gamma, policy,
                               weights: Sequence[float] | None = None,
                               surrogate: str = "trajectory") -> ParamGradient:
    """Weighted sum of per-trajectory gradients (default weights ``1/K``)."""
    if weights is None:
        weights = np.full(len(trajectories), 1.0 / len(trajectories))
    total = params.zeros_like()
    for traj, w in zip(trajectories, weights):
        total.iadd(trajectory_gradient(params, video, traj, gamma, policy, surrogate), float(w))
    return total


def rollout_seed(master_seed: int, update: int, item: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(update, item, k)))


@dataclass
class BatchResult:
    gradient: ParamGradient
    mean_return: float
    mean_steps: float
    trajectories: list = field(default_factory=list)


def _video_job(params, video, train: TrainConfig, reward: RewardConfig, update: int, item: int):
    """Rollouts and gradient for one video; returns (grad sum, returns, step counts)."""
    policy = train.policy
    feats = video.features()
    grad = params.zeros_like()
    returns, steps = [], []
    for k in range(train.num_trajectories):
        rng = rollout_seed(train.master_seed, update, item, k)
        if train.oracle_forced:
            traj = sm.rollout(params, feats, "stochastic", rng, policy, forced_summary=_oracle(video))
            r = forced_reward(params, video, reward, train.budget_fraction)
            for s in traj.steps:
                s.reward = 0.0
            traj.steps[-1].reward = r
            gamma = None
        else:
            traj = sm.rollout(params, feats, train.sampling, rng, policy)
            attach_rewards(traj, video, reward)
            gamma = reward.gamma
        returns.append(trajectory_return(traj, gamma))
        steps.append(traj.T)
        if train.oracle_forced and traj.log_prob == -math.inf:
            # an oracle the kernel cannot represent has zero probability and no score function
            continue
        grad.iadd(trajectory_gradient(params, video, traj, gamma, policy, train.surrogate))
    return grad, returns, steps


def policy_gradient_estimate(params: PolicyParams, videos: Sequence[VideoRecord], train: TrainConfig,
                             reward: RewardConfig, update: int = 0,
                             executor: ProcessPoolExecutor | None = None) -> BatchResult:
    """Sampled estimate of ∇J averaged over K trajectories per video and over the batch."""
    jobs = [(params, v, train, reward, update, i) for i, v in enumerate(videos)]
    if executor is not None and len(jobs) > 1:
        results = list(executor.map(_video_job_star, jobs))
    else:
        results = [_video_job(*j) for j in jobs]
    grad = params.zeros_like()
    returns, steps = [], []
    for g, r, s in results:
        grad.iadd(g)
        returns += r
        steps += s
    grad = grad * (1.0 / (len(videos) * train.num_trajectories))
    return BatchResult(grad, float(np.mean(returns)), float(np.mean(steps)))


def _video_job_star(args):
    return _video_job(*args)


# -- exact oracle --------------------------------------------------------------

@dataclass
class OracleGradient:
    exact: ParamGradient
    finite_difference: ParamGradient
    expected_return: float
    num_trajectories: int


def expected_return(params, video: VideoRecord, trajectories: Sequence[sm.Trajectory], gamma,
                    policy: sm.Policy) -> float:
    """Σ_τ p(τ; params) G(τ) over a fixed trajectory set (rewards already attached)."""
    feats = video.features()
    return float(sum(math.exp(sm.log_prob_trajectory(params, feats, t, policy)) * trajectory_return(t, gamma)
                     for t in trajectories))


def exact_gradient_oracle(params: PolicyParams, video: VideoRecord, reward: RewardConfig,
                          policy: sm.Policy = sm.Policy(), *, limit: int = 10_000, fd_step: float = 1e-5,
                          finite_differences: bool = True) -> OracleGradient:
    """∇J by exhaustive enumeration of trajectories, cross-checked by central differences."""
    enum = sm.enumerate_trajectories(params, video.features(), policy, limit=limit)
    trajs = [attach_rewards(t, video, reward) for t, _ in enum]
    probs = [p for _, p in enum]
    exact = estimate_from_trajectories(params, video, trajs, reward.gamma, policy, probs)
    fd = params.zeros_like()
    if finite_differences:
        theta = params.flat()
        out = np.zeros_like(theta)
        for i in range(theta.size):
            plus, minus = theta.copy(), theta.copy()
            plus[i] += fd_step
            minus[i] -= fd_step
            up = expected_return(params.with_flat(plus), video, trajs, reward.gamma, policy)
            down = expected_return(params.with_flat(minus), video, trajs, reward.gamma, policy)
            out[i] = -(up - down) / (2 * fd_step)
        fd = params.with_flat(out)
    return OracleGradient(exact, fd, expected_return(params, video, trajs, reward.gamma, policy), len(trajs))


# -- oracle-forced variant -----------------------------------------------------

def _oracle(video: VideoRecord) -> list[int]:
    if video.oracle is None:
        raise MissingAnnotation(f"video {video.id} has no oracle summary")
    return video.oracle


def forced_reward(params: PolicyParams, video: VideoRecord, reward: RewardConfig,
                  budget_fraction: float = metrics.DEFAULT_BUDGET_FRACTION) -> float:
    """F1 of the knapsack summary built from kernel-diagonal shot scores, averaged over users."""
    if video.scene_boundaries is None:
        raise MissingAnnotation(f"video {video.id} has no scene boundaries")
    if not video.user_summaries:
        raise MissingAnnotation(f"video {video.id} has no user summaries")
    scores = metrics.shot_scores_from_kernel(params, video.features())
    summary = metrics.summarize_by_scores(scores, video.scene_boundaries, video.shot_duration_seconds,
                                          budget_fraction)
    return _pick(metrics.overlap_f1_users(summary, video.user_summaries), reward.metric)


def oracle_forced_update(params: PolicyParams, video: VideoRecord, train: TrainConfig,
                         reward: RewardConfig, update: int = 0) -> ParamGradient:
    """Gradient from trajectories whose subsets are pinned to the oracle summary."""
    forced = TrainConfig(**{**asdict(train), "oracle_forced": True})
    return policy_gradient_estimate(params, [video], forced, reward, update).gradient


# -- training loop ---------------------------------------------------------------

@dataclass
class LogRecord:
    update: int
    mean_return: float
    mean_steps: float
    grad_norm: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def train(params: PolicyParams, dataset: Sequence[VideoRecord], train_config: TrainConfig,
          reward_config: RewardConfig, *, callback: Callable[[int, PolicyParams, LogRecord], None] | None = None,
          timings: list | None = None) -> tuple[PolicyParams, list[LogRecord]]:
    """Estimate the gradient, take one descent step, repeat ``num_updates`` times.

    Videos are visited in a seeded random order, ``batch_size`` per update.
    Wall-clock times go to ``timings`` (if given) so the log stays reproducible.
    """
    if not dataset:
        raise InvalidInput("training set is empty")
    params = params.copy()
    order_rng = np.random.default_rng(np.random.SeedSequence(train_config.master_seed, spawn_key=(2**31,)))
    order: list[int] = []
    log: list[LogRecord] = []
    executor = ProcessPoolExecutor(train_config.workers) if train_config.workers > 1 else None
    try:
        for u in range(train_config.num_updates):
            t0 = time.perf_counter()
            batch = []
            while len(batch) < train_config.batch_size:
                if not order:
                    order = list(order_rng.permutation(len(dataset)))
                batch.append(dataset[order.pop()])
            res = policy_gradient_estimate(params, batch, train_config, reward_config, u, executor)
            grad = res.gradient
            norm = grad.norm()
            if train_config.clip_norm is not None and norm > train_config.clip_norm:
                grad = grad * (train_config.clip_norm / norm)
            if train_config.learning_rate != 0.0:
                params.iadd(grad, -train_config.learning_rate)
            if not params.is_finite():
                raise DivergedError(f"parameters became non-finite at update {u}")
            rec = LogRecord(u, res.mean_return, res.mean_steps, norm)
            log.append(rec)
            if timings is not None:
                timings.append(time.perf_counter() - t0)
            if callback is not None:
                callback(u, params, rec)
    finally:
        if executor is not None:
            executor.shutdown()
    return params, log


def evaluate_policy(params: PolicyParams, videos: Sequence[VideoRecord], policy: sm.Policy,
                    window: float = 12, mode: str = "greedy", seed: int = 0) -> float:
    """Mean matching F1 (averaged over users) of rollouts on ``videos``."""
    scores = []
    for i, v in enumerate(videos):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        traj = sm.rollout(params, v.features(), mode, rng, policy)
        scores.append(metrics.match_f1_users(traj.summary, v.user_summaries, v.concepts, window).f1)
    return float(np.mean(scores))

