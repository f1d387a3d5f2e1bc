"""Summarization as an MDP: states, actions, deterministic transitions and rollouts.

At step ``t`` the policy sees the shots selected so far and the current segment.
It picks a subset of the segment from a conditional DPP whose ground set is the
previous step's selection plus the segment, then proposes the next segment's
length from a softmax. ``PolicyKind.fixed(l)`` replaces the length softmax by a
point mass, which recovers the fixed-partition SeqDPP.

Shot indices in states, actions and trajectories are global (positions in the video).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import dpp
from . import kernel_net as kn
from .errors import CapacityExceeded, InvalidAction, InvalidInput, InvalidLength, InvalidTrajectory

PHI_MODES = ("concat", "seg", "video")
DEFAULT_INITIAL_LENGTH = 10
MAX_SEGMENT = 20


@dataclass(frozen=True)
class PolicyKind:
    """``fixed_length=None`` is the dynamic policy; an integer pins every segment to that length."""

    fixed_length: int | None = None

    @classmethod
    def dynamic(cls) -> "PolicyKind":
        return cls(None)

    @classmethod
    def fixed(cls, length: int) -> "PolicyKind":
        return cls(int(length))

    @property
    def is_fixed(self) -> bool:
        return self.fixed_length is not None

    @property
    def name(self) -> str:
        return f"FixedSeqDPP({self.fixed_length})" if self.is_fixed else "DySeqDPP"


@dataclass(frozen=True)
class Policy:
    kind: PolicyKind = PolicyKind()
    phi_mode: str = "concat"
    initial_length: int = DEFAULT_INITIAL_LENGTH

    def __post_init__(self):
        if self.phi_mode not in PHI_MODES:
            raise InvalidInput(f"phi_mode must be one of {PHI_MODES}, got {self.phi_mode!r}")
        if self.initial_length < 1:
            raise InvalidInput("initial_length must be positive")

    @property
    def first_length(self) -> int:
        # the fixed baseline partitions uniformly from the first shot on
        return self.kind.fixed_length if self.kind.is_fixed else self.initial_length


@dataclass(frozen=True)
class SummaryState:
    selected: tuple[int, ...]
    last_selection: tuple[int, ...]
    segment_start: int
    segment_len: int
    step: int = 1

    @property
    def segment_end(self) -> int:
        return self.segment_start + self.segment_len

    @property
    def segment(self) -> range:
        return range(self.segment_start, self.segment_end)

    @property
    def ground(self) -> list[int]:
        """Global shot indices of this step's DPP ground set, previous selection first."""
        return list(self.last_selection) + list(self.segment)


@dataclass(frozen=True)
class SummaryAction:
    subset: tuple[int, ...]
    next_len: int


@dataclass
class Step:
    state: SummaryState
    action: SummaryAction
    log_prob_subset: float
    log_prob_length: float
    reward: float | None = None


@dataclass
class Trajectory:
    steps: list[Step]
    video_len: int

    @property
    def T(self) -> int:
        return len(self.steps)

    @property
    def summary(self) -> tuple[int, ...]:
        return tuple(i for s in self.steps for i in s.action.subset)

    @property
    def segments(self) -> list[tuple[int, int]]:
        return [(s.state.segment_start, s.state.segment_end) for s in self.steps]

    @property
    def log_prob(self) -> float:
        return float(sum(s.log_prob_subset + s.log_prob_length for s in self.steps))

    @property
    def rewards(self) -> list[float]:
        return [s.reward for s in self.steps]

    def key(self) -> tuple:
        return tuple((s.action.subset, s.action.next_len) for s in self.steps)

    def dump(self) -> str:
        """One line per step, fixed field order."""
        lines = []
        for s in self.steps:
            reward = "nan" if s.reward is None else repr(float(s.reward))
            subset = ",".join(str(i) for i in s.action.subset)
            lines.append(f"step={s.state.step} segment={s.state.segment_start}:{s.state.segment_end} "
                         f"subset=[{subset}] length={s.action.next_len} "
                         f"logp_subset={s.log_prob_subset!r} logp_length={s.log_prob_length!r} "
                         f"reward={reward}")
        return "\n".join(lines) + ("\n" if lines else "")


def initial_state(video_len: int, initial_length: int = DEFAULT_INITIAL_LENGTH
                  ) -> tuple[SummaryState, SummaryAction]:
    """First state (nothing selected, first segment clamped to the video) and the fixed a_0."""
    if video_len < 1:
        raise InvalidInput("video must contain at least one shot")
    state = SummaryState((), (), 0, min(initial_length, video_len), 1)
    return state, SummaryAction((), initial_length)


def _check_action(s: SummaryState, a: SummaryAction) -> None:
    if list(a.subset) != sorted(set(a.subset)):
        raise InvalidAction(f"subset {a.subset} must be strictly increasing")
    if a.subset and (a.subset[0] < s.segment_start or a.subset[-1] >= s.segment_end):
        raise InvalidAction(f"subset {a.subset} is not inside segment {s.segment_start}:{s.segment_end}")
    if a.next_len < 1:
        raise InvalidAction(f"next length {a.next_len} must be positive")


def transition(s: SummaryState, a: SummaryAction, video_len: int) -> SummaryState | None:
    """Deterministic successor, or ``None`` once the segment reaches the end of the video."""
    _check_action(s, a)
    if s.segment_end >= video_len:
        return None
    start = s.segment_end
    return SummaryState(s.selected + tuple(a.subset), tuple(a.subset), start,
                        min(a.next_len, video_len - start), s.step + 1)


def pooled_features(features: np.ndarray, state: SummaryState, subset: Sequence[int],
                    mode: str = "concat") -> np.ndarray:
    seg = features[state.segment_start:state.segment_end]
    if mode == "concat":
        return kn.phi_pool(features[list(state.selected) + list(subset)], seg)
    if mode == "seg":
        return kn.phi_pool(seg[:0], seg)
    if mode == "video":
        return kn.phi_pool(seg[:0], features[:state.segment_end])
    raise InvalidInput(f"unknown phi mode {mode!r}")


def _length_probs(params: kn.PolicyParams, features, state, subset, policy: Policy) -> np.ndarray:
    if policy.kind.is_fixed:
        probs = np.zeros(len(params.lengths))
        probs[params.length_index(policy.kind.fixed_length)] = 1.0
        return probs
    return kn.length_distribution(params, pooled_features(features, state, subset, policy.phi_mode))


@dataclass
class ActionDistribution:
    """Joint law of (subset, next length) at one state.

    ``length_probs[k]`` is P(lengths[k] | subset). Max-pooling over a union that
    already contains the whole segment makes it the same for every subset.
    """

    state: SummaryState
    subsets: dpp.SubsetDistribution
    length_probs: np.ndarray
    lengths: tuple[int, ...]

    def joint(self) -> np.ndarray:
        return self.subsets.probs[:, None] * self.length_probs[None, :]

    def prob(self, action: SummaryAction) -> float:
        if action.next_len not in self.lengths:
            return 0.0
        return self.subsets.prob(action.subset) * float(self.length_probs[self.lengths.index(action.next_len)])

    def actions(self):
        for m, p in enumerate(self.subsets.probs):
            for k, q in enumerate(self.length_probs):
                yield SummaryAction(self.subsets.subset(m), self.lengths[k]), float(p * q)


def _check_policy(params: kn.PolicyParams, policy: Policy) -> None:
    if policy.kind.is_fixed and policy.kind.fixed_length not in params.lengths:
        raise InvalidLength(f"fixed length {policy.kind.fixed_length} is not in the menu {params.lengths}")


def policy_distribution(params: kn.PolicyParams, features, state: SummaryState,
                        policy: Policy = Policy()) -> ActionDistribution:
    features = np.asarray(features, dtype=float)
    _check_policy(params, policy)
    if state.segment_len > MAX_SEGMENT:
        raise CapacityExceeded(f"segment of {state.segment_len} shots exceeds {MAX_SEGMENT}")
    ground = state.ground
    L = kn.build_kernel(params, features[ground])
    local = dpp.enumerate_distribution(L, range(len(state.last_selection)), det_floor=kn.DET_FLOOR)
    subsets = dpp.SubsetDistribution(tuple(ground[i] for i in local.items), local.probs,
                                     state.last_selection)
    return ActionDistribution(state, subsets, _length_probs(params, features, state, (), policy),
                              params.lengths)


def _local(state: SummaryState, subset: Iterable[int]) -> list[int]:
    off = len(state.last_selection) - state.segment_start
    return [i + off for i in subset]


def subset_log_prob(params, features, state: SummaryState, subset) -> float:
    features = np.asarray(features, dtype=float)
    return kn.log_cond_prob(params, features[state.ground], _local(state, subset),
                            range(len(state.last_selection)))


def length_log_prob(params, features, state: SummaryState, subset, length: int,
                    policy: Policy = Policy()) -> float:
    if policy.kind.is_fixed:
        return 0.0 if length == policy.kind.fixed_length else -math.inf
    probs = _length_probs(params, np.asarray(features, dtype=float), state, subset, policy)
    return float(np.log(probs[params.length_index(length)]))


def sample_action(params, features, state: SummaryState, rng: np.random.Generator,
                  policy: Policy = Policy()) -> tuple[SummaryAction, float, float]:
    """Draw a subset from the conditional DPP, then a length given that subset.

    The subset comes from the exact sequential sampler, so no subset table is built.
    """
    features = np.asarray(features, dtype=float)
    _check_policy(params, policy)
    if state.segment_len > MAX_SEGMENT:
        raise CapacityExceeded(f"segment of {state.segment_len} shots exceeds {MAX_SEGMENT}")
    ground = state.ground
    L = kn.build_kernel(params, features[ground])
    local = dpp.sample_conditional(L, range(len(state.last_selection)), rng)
    subset = tuple(ground[i] for i in local)
    lp_subset = subset_log_prob(params, features, state, subset)
    if lp_subset == -math.inf:
        # numerically null subsets carry no mass under the policy; redraw from the enumerated law
        subset = dpp.sample_subset(policy_distribution(params, features, state, policy).subsets, rng)
        lp_subset = subset_log_prob(params, features, state, subset)
    probs = _length_probs(params, features, state, subset, policy)
    cdf = np.cumsum(probs)
    k = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(cdf) - 1)
    action = SummaryAction(subset, params.lengths[k])
    return action, lp_subset, length_log_prob(params, features, state, subset, action.next_len, policy)


def greedy_action(params, features, state: SummaryState, policy: Policy = Policy()) -> SummaryAction:
    """Most probable subset, then most probable length (ties: smallest bitmask, shortest length)."""
    dist = policy_distribution(params, features, state, policy)
    return SummaryAction(dpp.map_subset(dist.subsets), dist.lengths[int(np.argmax(dist.length_probs))])


def rollout(params, features, mode: str = "stochastic", rng: np.random.Generator | None = None,
            policy: Policy = Policy(), forced_summary: Iterable[int] | None = None) -> Trajectory:
    """Run the policy from the initial state to the end of the video.

    ``forced_summary`` pins each step's subset to the given shots inside the
    segment; only the lengths are then drawn from the policy.
    """
    features = np.asarray(features, dtype=float)
    _check_policy(params, policy)
    n = features.shape[0]
    if mode not in ("stochastic", "greedy"):
        raise InvalidInput(f"unknown rollout mode {mode!r}")
    if mode == "stochastic" and rng is None:
        raise InvalidInput("stochastic rollouts need an rng")
    forced = None if forced_summary is None else sorted(set(int(i) for i in forced_summary))
    state, _ = initial_state(n, policy.first_length)
    steps = []
    while state is not None:
        if forced is not None:
            subset = tuple(i for i in forced if state.segment_start <= i < state.segment_end)
            probs = _length_probs(params, features, state, subset, policy)
            if mode == "greedy":
                k = int(np.argmax(probs))
            else:
                cdf = np.cumsum(probs)
                k = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(cdf) - 1)
            action = SummaryAction(subset, params.lengths[k])
        elif mode == "greedy":
            action = greedy_action(params, features, state, policy)
        else:
            action, lp_subset, lp_length = sample_action(params, features, state, rng, policy)
            steps.append(Step(state, action, lp_subset, lp_length))
            state = transition(state, action, n)
            continue
        steps.append(Step(state, action, subset_log_prob(params, features, state, action.subset),
                          length_log_prob(params, features, state, action.subset, action.next_len, policy)))
        state = transition(state, action, n)
    return Trajectory(steps, n)


def _replay(params, features, traj: Trajectory, policy: Policy):
    n = np.asarray(features).shape[0]
    if traj.video_len != n:
        raise InvalidTrajectory(f"trajectory covers {traj.video_len} shots, video has {n}")
    state, _ = initial_state(n, policy.first_length)
    for step in traj.steps:
        if state is None:
            raise InvalidTrajectory("trajectory continues past the end of the video")
        if step.state != state:
            raise InvalidTrajectory(f"step {step.state.step}: recorded state does not follow from its actions")
        if step.action.next_len not in params.lengths:
            raise InvalidTrajectory(f"length {step.action.next_len} is not in the menu")
        yield step
        state = transition(state, step.action, n)
    if state is not None:
        raise InvalidTrajectory("trajectory stops before the end of the video")


def log_prob_trajectory(params, features, traj: Trajectory, policy: Policy = Policy()) -> float:
    """Sum over steps of log P(x_t|s_t) + log P(l_t|x_t,s_t); transitions add nothing."""
    total = 0.0
    for step in _replay(params, features, traj, policy):
        total += subset_log_prob(params, features, step.state, step.action.subset)
        total += length_log_prob(params, features, step.state, step.action.subset, step.action.next_len, policy)
    return total


def grad_log_prob_trajectory(params, features, traj: Trajectory, policy: Policy = Policy(),
                             step_weights: Sequence[float] | None = None) -> kn.ParamGradient:
    """Σ_t w_t ∇[log P(x_t|s_t) + log P(l_t|x_t,s_t)] with unit weights by default."""
    features = np.asarray(features, dtype=float)
    grad = params.zeros_like()
    for t, step in enumerate(_replay(params, features, traj, policy)):
        w = 1.0 if step_weights is None else float(step_weights[t])
        if w == 0.0:
            continue
        s = step.state
        grad.iadd(kn.grad_log_cond_prob(params, features[s.ground], _local(s, step.action.subset),
                                        range(len(s.last_selection))), w)
        if not policy.kind.is_fixed:
            pooled = pooled_features(features, s, step.action.subset, policy.phi_mode)
            grad.iadd(kn.grad_log_length_prob(params, pooled, step.action.next_len), w)
    return grad


def enumerate_trajectories(params, features, policy: Policy = Policy(), limit: int = 10_000
                           ) -> list[tuple[Trajectory, float]]:
    """Every trajectory with positive probability, with its probability."""
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    out: list[tuple[Trajectory, float]] = []

    def visit(state, steps, prob):
        if state is None:
            out.append((Trajectory(list(steps), n), prob))
            if len(out) > limit:
                raise CapacityExceeded(f"more than {limit} trajectories")
            return
        dist = policy_distribution(params, features, state, policy)
        for action, p in dist.actions():
            if p <= 0.0:
                continue
            step = Step(state, action, subset_log_prob(params, features, state, action.subset),
                        length_log_prob(params, features, state, action.subset, action.next_len, policy))
            visit(transition(state, action, n), steps + [step], prob * p)

    visit(initial_state(n, policy.first_length)[0], [], 1.0)
    return out


def uniform_summary(video_len: int, size: int) -> tuple[int, ...]:
    """``size`` shots spread evenly over the video (centre of each equal-width bin)."""
    size = max(0, min(int(size), video_len))
    return tuple(int((i + 0.5) * video_len / size) for i in range(size))
