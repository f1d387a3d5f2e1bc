"""Brute-force and finite-difference oracle suites behind ``dyseqdpp verify``.

Every suite draws from its own seeded generator, so reports are reproducible.
A suite stops at its first violated invariant and names it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import chain, combinations, permutations
from typing import Callable

import numpy as np
from scipy import stats

from . import dpp, metrics
from . import kernel_net as kn
from . import rl
from . import seq_model as sm
from .data_io import VideoRecord
from .errors import DySeqError

LEVELS = ("quick", "full")
STAT_SAMPLES = 100_000


class InvariantFailure(AssertionError):
    pass


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    detail: str
    skipped: bool = False

    def line(self) -> str:
        status = "SKIP" if self.skipped else ("PASS" if self.passed else "FAIL")
        return f"{status} {self.name}: {self.detail}"


@dataclass(frozen=True)
class VerifyOptions:
    level: str = "full"
    seed: int = 0
    inject_asymmetry: bool = False


def _check(ok: bool, invariant: str) -> None:
    if not ok:
        raise InvariantFailure(invariant)


def powerset(items):
    items = list(items)
    return chain.from_iterable(combinations(items, k) for k in range(len(items) + 1))


def random_psd(rng: np.random.Generator, n: int) -> np.ndarray:
    B = rng.standard_normal((n, n))
    return B.T @ B


def rel_err(analytic, numeric) -> float:
    """Normwise relative error ``max|a - n| / max|n|``."""
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-12))


def central_diff(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        out[i] = (fn(x + e) - fn(x - e)) / (2 * step)
    return out


# -- dpp-core -----------------------------------------------------------------

WORKED_L = np.array([[2.0, 1.0], [1.0, 2.0]])
WORKED_K = np.array([[0.625, 0.125], [0.125, 0.625]])


def suite_normalization(rng, opts: VerifyOptions) -> str:
    worst = 0.0
    for trial in range(200):
        n = int(rng.integers(2, 13))
        L = random_psd(rng, n)
        if opts.inject_asymmetry:
            L[0, 1] += 1e-3 * (1.0 + abs(L[0, 1]))
        try:
            dpp.validate_kernel(L)
        except DySeqError as exc:
            raise InvariantFailure(f"kernel {trial} rejected: {exc}") from None
        total = dpp.subset_determinants(L, list(range(n)), []).sum()
        norm = dpp.det(L + np.eye(n))
        worst = max(worst, abs(total - norm) / norm)
        _check(worst <= 1e-9, f"sum of det(L_y) equals det(L+I) (rel err {worst:.3e} on kernel {trial})")
    return f"200 kernels, worst rel err {worst:.2e}"


def suite_conditional(rng, opts: VerifyOptions) -> str:
    d = dpp.enumerate_distribution(WORKED_L, [0]).as_dict()
    _check(abs(d[frozenset()] - 0.4) <= 1e-12 and abs(d[frozenset({1})] - 0.6) <= 1e-12,
           "worked 2x2 conditional splits 0.4/0.6")
    worst = 0.0
    for trial in range(100):
        n = int(rng.integers(1, 11))
        L = random_psd(rng, n)
        y0 = [i for i in range(n) if rng.random() < 0.3]
        dist = dpp.enumerate_distribution(L, y0)
        _check(abs(dist.total() - 1.0) <= 1e-9, f"conditional distribution {trial} sums to 1")
        for mask in range(len(dist.probs)):
            ref = dpp.conditional_prob(L, dist.subset(mask), y0)
            worst = max(worst, abs(dist.probs[mask] - ref))
        _check(worst <= 1e-9, f"enumerated probability equals determinant ratio (kernel {trial})")
    return f"100 kernels, worst abs err {worst:.2e}"


def suite_marginal(rng, opts: VerifyOptions) -> str:
    _check(np.abs(dpp.to_marginal_kernel(WORKED_L) - WORKED_K).max() <= 1e-12, "worked marginal kernel")
    worst = 0.0
    for n in range(1, 11):
        L = random_psd(rng, n)
        K = dpp.to_marginal_kernel(L)
        dist = dpp.enumerate_distribution(L)
        # superset sums over bitmasks: P(Y ⊇ y) = Σ_{m ⊇ y} p(m)
        sup = dist.probs.copy()
        for bit in range(n):
            for m in range(len(sup)):
                if not m >> bit & 1:
                    sup[m] += sup[m | 1 << bit]
        checks = list(range(len(sup))) if n <= 8 else rng.integers(0, len(sup), size=200).tolist()
        for m in checks:
            worst = max(worst, abs(dpp.marginal_prob(K, dist.subset(m)) - sup[m]))
        _check(worst <= 1e-8, f"marginal kernel matches superset sums (N={n})")
    return f"N=1..10, worst abs err {worst:.2e}"


def suite_sampling(rng, opts: VerifyOptions) -> str:
    L = random_psd(rng, 4)
    y0 = [0]
    dist = dpp.enumerate_distribution(L, y0)
    counts = np.zeros(len(dist.probs))
    for _ in range(STAT_SAMPLES):
        counts[dist.mask(dpp.sample_conditional(L, y0, rng))] += 1
    p = stats.chisquare(counts, dist.probs * STAT_SAMPLES / dist.total()).pvalue
    _check(p > 1e-3, f"sequential sampler frequencies match enumeration (chi-squared p={p:.2e})")
    return f"{STAT_SAMPLES} draws, chi-squared p={p:.3f}"


# -- kernel-net ----------------------------------------------------------------

def _uniform_params(rng, d_f=4, d_h=5, lengths=(2, 3, 4)) -> kn.PolicyParams:
    u = lambda *s: rng.uniform(-0.5, 0.5, size=s)
    return kn.PolicyParams(V=u(d_h, d_f), U=u(d_h, d_h), W=u(d_h, d_h), softmax_weights=u(len(lengths), d_f),
                           softmax_bias=u(len(lengths)), lengths=lengths)


def cond_prob_instance(rng):
    """Random (params, ground features, x_t, x_prev) with a non-degenerate conditioning shot."""
    while True:
        p = _uniform_params(rng)
        F = rng.random((5, 4))
        prev = [0] if rng.random() < 0.5 else []
        if prev and kn.build_kernel(p, F)[0, 0] < 1e-6:
            continue
        x = [i for i in range(len(prev), 5) if rng.random() < 0.5][:3]
        if math.isfinite(kn.log_cond_prob(p, F, x, prev)):
            return p, F, x, prev


def gradient_errors(rng, count: int = 20) -> tuple[list[float], list[float]]:
    """Relative FD errors of the subset and length log-prob gradients over ``count`` instances each."""
    cond, length = [], []
    for _ in range(count):
        p, F, x, prev = cond_prob_instance(rng)
        g = kn.grad_log_cond_prob(p, F, x, prev).flat()
        fd = central_diff(lambda th: kn.log_cond_prob(p.with_flat(th), F, x, prev), p.flat())
        cond.append(rel_err(g, fd))
        p = _uniform_params(rng)
        pooled = rng.random(4)
        l = int(rng.choice(p.lengths))
        g = kn.grad_log_length_prob(p, pooled, l).flat()
        k = p.length_index(l)
        fd = central_diff(lambda th: math.log(kn.length_distribution(p.with_flat(th), pooled)[k]), p.flat())
        length.append(rel_err(g, fd))
    return cond, length


def w_scale_derivative(params: kn.PolicyParams, F, x, prev) -> float:
    """Directional derivative of ``log_cond_prob`` along ``W -> (1 + eps) W``."""
    g = kn.grad_log_cond_prob(params, F, x, prev)
    return float(np.sum(g.W * params.W))


def suite_gradient(rng, opts: VerifyOptions) -> str:
    cond, length = gradient_errors(rng)
    _check(max(cond) <= 1e-4, f"subset log-prob gradient matches central differences (rel err {max(cond):.2e})")
    _check(max(length) <= 1e-4, f"length log-prob gradient matches central differences (rel err {max(length):.2e})")
    return f"20+20 instances, worst rel err {max(cond):.2e} / {max(length):.2e}"


# -- rl-train ------------------------------------------------------------------

TINY_POLICY = sm.Policy(initial_length=2)


def tiny_mdp(rng, n: int = 6, d: int = 3) -> tuple[kn.PolicyParams, VideoRecord]:
    """Eight-or-fewer-shot MDP with lengths {2, 3}, small enough to enumerate."""
    video = VideoRecord(id="tiny", shot_features=rng.random((n, d)), user_summaries=[[1, 4], [0, 3, 5]],
                        concepts=rng.integers(0, 2, size=(n, 6)), scene_boundaries=[(0, 2), (2, 4), (4, n)],
                        oracle_summary=[1, 3, 5])
    params = kn.PolicyParams.init(d, rng, d_h1=3, d_h2=3, d_k=3, lengths=(2, 3))
    params.W *= 2.0
    params.softmax_weights[:] = rng.normal(size=params.softmax_weights.shape)
    return params, video


def sampled_estimate(params, video, reward: rl.RewardConfig, num: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error of ``num`` sampled single-trajectory gradients.

    Draws are grouped by trajectory so each distinct gradient is computed once.
    """
    feats = video.features()
    counts: dict[tuple, list] = {}
    for _ in range(num):
        traj = sm.rollout(params, feats, "stochastic", rng, TINY_POLICY)
        entry = counts.setdefault(traj.key(), [traj, 0])
        entry[1] += 1
    grads, weights = [], []
    for traj, c in counts.values():
        rl.attach_rewards(traj, video, reward)
        grads.append(rl.trajectory_gradient(params, video, traj, reward.gamma, TINY_POLICY).flat())
        weights.append(c)
    G, w = np.array(grads), np.array(weights, dtype=float)
    mean = w @ G / num
    var = w @ (G - mean) ** 2 / (num - 1)
    return mean, np.sqrt(var / num)


def suite_estimator(rng, opts: VerifyOptions) -> str:
    params, video = tiny_mdp(rng)
    details = []
    for reward in (rl.RewardConfig(), rl.RewardConfig(mode="partial", gamma=0.5)):
        o = rl.exact_gradient_oracle(params, video, reward, TINY_POLICY)
        err = rel_err(o.exact.flat(), o.finite_difference.flat())
        _check(err <= 1e-4, f"exact expected gradient matches finite differences (rel err {err:.2e})")
        details.append(f"fd rel err {err:.1e}")
        if opts.level == "full" and reward.gamma is not None:
            mean, se = sampled_estimate(params, video, reward, STAT_SAMPLES, rng)
            dev = np.abs(mean - o.exact.flat())
            bad = int(np.sum(dev > 3 * se + 1e-12))
            _check(bad == 0, f"sampled estimator within 3 standard errors ({bad} of {dev.size} components outside)")
            details.append(f"{STAT_SAMPLES} samples all within 3 SE")
    return ", ".join(details)


# -- eval-metrics ----------------------------------------------------------------

def exhaustive_match(system, user, concepts, window) -> float:
    C = concepts.shape[1]

    def w(i, j):
        return 0.0 if abs(i - j) > window else 1.0 - np.sum(concepts[i] != concepts[j]) / C

    small, large, flip = (system, user, False) if len(system) <= len(user) else (user, system, True)
    return max(sum(w(b, a) if flip else w(a, b) for a, b in zip(small, perm))
               for perm in permutations(large, len(small)))


def _match_instance(rng, n_shots=14, C=8):
    concepts = rng.integers(0, 2, size=(n_shots, C), dtype=np.uint8)
    system = sorted(rng.choice(n_shots, size=rng.integers(1, 7), replace=False).tolist())
    user = sorted(rng.choice(n_shots, size=rng.integers(1, 7), replace=False).tolist())
    return system, user, concepts


def suite_matching(rng, opts: VerifyOptions) -> str:
    concepts = np.zeros((10, 54), dtype=np.uint8)
    concepts[9, :27] = 1
    s = metrics.bipartite_match_f1([2, 5], [2, 9], concepts, 4)
    _check(abs(s.f1 - 0.75) <= 1e-12, "worked matching example gives F1 0.75")
    for trial in range(100):
        system, user, concepts = _match_instance(rng)
        window = [0, 1, 3, 6, math.inf][int(rng.integers(5))]
        got = metrics.bipartite_match_f1(system, user, concepts, window).size
        _check(abs(got - exhaustive_match(system, user, concepts, window)) <= 1e-12,
               f"matching weight equals exhaustive optimum (instance {trial})")
    for trial in range(100):
        system, user, concepts = _match_instance(rng)
        sizes = [metrics.bipartite_match_f1(system, user, concepts, k).size for k in (0, 2, 4, 8, 12, math.inf)]
        _check(all(b >= a - 1e-12 for a, b in zip(sizes, sizes[1:])), f"matching size monotone in K ({trial})")
    return "worked example, 100 exhaustive, 100 monotonicity"


def brute_knapsack(scores, durations, budget) -> list[int]:
    best = None
    for subset in powerset(range(len(scores))):
        if sum(durations[i] for i in subset) > budget:
            continue
        key = (-sum(scores[i] for i in subset), len(subset), subset)
        if best is None or key < best:
            best = key
    return list(best[2])


def suite_knapsack(rng, opts: VerifyOptions) -> str:
    count = 0
    for n in range(1, 16):
        for _ in range(4 if n < 12 else 1):
            scores = rng.integers(0, 6, size=n).astype(float)
            durations = rng.integers(1, 9, size=n)
            budget = int(rng.integers(1, durations.sum() + 1))
            scenes = metrics.SceneScoreSet([(i, i + 1) for i in range(n)], list(scores), list(durations))
            _check(metrics.knapsack_select(scenes, budget) == brute_knapsack(scores, durations, budget),
                   f"knapsack selection equals brute force ({n} scenes)")
            count += 1
    return f"{count} instances up to 15 scenes"


SUITES: dict[str, tuple[Callable, bool]] = {
    # name -> (suite, statistical: skipped at level quick)
    "normalization": (suite_normalization, False),
    "conditional": (suite_conditional, False),
    "marginal": (suite_marginal, False),
    "gradient": (suite_gradient, False),
    "estimator": (suite_estimator, False),
    "matching": (suite_matching, False),
    "knapsack": (suite_knapsack, False),
    "sampling": (suite_sampling, True),
}


def run_suites(opts: VerifyOptions = VerifyOptions(), names=None) -> list[SuiteResult]:
    if opts.level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}")
    results = []
    for i, (name, (fn, statistical)) in enumerate(SUITES.items()):
        if names is not None and name not in names:
            continue
        if statistical and opts.level == "quick":
            results.append(SuiteResult(name, True, f"skipped at level quick ({STAT_SAMPLES} samples)", True))
            continue
        rng = np.random.default_rng(np.random.SeedSequence(opts.seed, spawn_key=(i,)))
        try:
            results.append(SuiteResult(name, True, fn(rng, opts)))
        except InvariantFailure as exc:
            results.append(SuiteResult(name, False, str(exc)))
        except DySeqError as exc:
            results.append(SuiteResult(name, False, f"{type(exc).__name__}: {exc}"))
    return results
