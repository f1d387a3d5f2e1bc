"""Summary evaluation.

Two protocols are supported:

* windowed bipartite matching over per-shot concept vectors (precision, recall
  and F1 from the weight of a maximum-weight matching whose edges only join
  shots at most ``window`` positions apart);
* temporal overlap of a knapsack-selected set of scenes, with scene scores
  averaged from per-shot importance scores.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernel_net as kn
from .errors import InvalidInput, ShapeError

DEFAULT_WINDOWS = (8, 12, 16, math.inf)
DEFAULT_BUDGET_FRACTION = 0.15


@dataclass
class MatchScore:
    precision: float
    recall: float
    f1: float
    matching: list[tuple[int, int]] = field(default_factory=list)
    size: float = 0.0


def f1_score(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def hamming(a, b) -> int:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"concept vectors differ in shape: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a != b))


def _edge_weights(system: Sequence[int], user: Sequence[int], concepts: np.ndarray, window: float,
                  mode: str, threshold: int) -> np.ndarray:
    C = concepts.shape[1]
    s = np.asarray(system, dtype=int)
    u = np.asarray(user, dtype=int)
    ham = np.count_nonzero(concepts[s][:, None, :] != concepts[u][None, :, :], axis=2)
    near = np.abs(s[:, None] - u[None, :]) <= window
    if mode == "weighted":
        w = 1.0 - ham / C
    elif mode == "cardinality":
        w = (ham <= threshold).astype(float)
    else:
        raise InvalidInput(f"unknown matching mode {mode!r}")
    return np.where(near, w, 0.0)


def bipartite_match_f1(system: Iterable[int], user: Iterable[int], concepts, window: float = math.inf,
                       mode: str = "weighted", threshold: int = 0) -> MatchScore:
    """Precision/recall/F1 from the maximum-weight matching between two summaries.

    Edges join system shot ``i`` and user shot ``j`` when ``|i - j| <= window``.
    ``mode="weighted"`` weighs an edge by ``1 - hamming/C``; ``mode="cardinality"``
    gives weight 1 to edges with ``hamming <= threshold`` and drops the rest.
    """
    system = sorted(set(int(i) for i in system))
    user = sorted(set(int(i) for i in user))
    if not system and not user:
        return MatchScore(1.0, 1.0, 1.0)
    if not system or not user:
        return MatchScore(0.0, 0.0, 0.0)
    concepts = np.asarray(concepts)
    if concepts.ndim != 2:
        raise ShapeError("concepts must be a (shots, C) array")
    w = _edge_weights(system, user, concepts, window, mode, threshold)
    rows, cols = linear_sum_assignment(w, maximize=True)
    keep = w[rows, cols] > 0
    size = float(w[rows, cols][keep].sum())
    p = size / len(system)
    r = size / len(user)
    pairs = [(system[i], user[j]) for i, j in zip(rows[keep], cols[keep])]
    return MatchScore(p, r, f1_score(p, r), pairs, size)


def average_scores(scores: Sequence[MatchScore]) -> MatchScore:
    if not scores:
        raise InvalidInput("no scores to average")
    return MatchScore(float(np.mean([s.precision for s in scores])), float(np.mean([s.recall for s in scores])),
                      float(np.mean([s.f1 for s in scores])), [], float(np.mean([s.size for s in scores])))


def match_f1_users(system, users: Sequence[Iterable[int]], concepts, window: float = math.inf,
                   mode: str = "weighted", threshold: int = 0) -> MatchScore:
    """Matching scores averaged over several user summaries."""
    return average_scores([bipartite_match_f1(system, u, concepts, window, mode, threshold) for u in users])


# -- scene / knapsack protocol -------------------------------------------------

@dataclass
class SceneScoreSet:
    boundaries: list[tuple[int, int]]
    scores: list[float]
    durations: list[float]


def check_scenes(boundaries: Sequence[tuple[int, int]], n_shots: int) -> list[tuple[int, int]]:
    bounds = [(int(a), int(b)) for a, b in boundaries]
    pos = 0
    for a, b in bounds:
        if a != pos:
            raise InvalidInput(f"scenes must be consecutive; expected start {pos}, got {a}")
        if b <= a:
            raise InvalidInput(f"empty scene {a}:{b}")
        pos = b
    if pos != n_shots:
        raise InvalidInput(f"scenes cover {pos} shots, video has {n_shots}")
    return bounds


def shot_scores_from_kernel(params: kn.PolicyParams, features,
                            segments: Sequence[tuple[int, int]] | None = None) -> np.ndarray:
    """Diagonal of each segment's kernel, i.e. ``||W z_i||^2`` for every shot."""
    features = np.asarray(features, dtype=float)
    if segments is None:
        segments = [(0, features.shape[0])]
    out = np.empty(features.shape[0])
    for a, b in segments:
        out[a:b] = np.diag(kn.build_kernel(params, features[a:b]))
    return out


def scene_scores(shot_scores, boundaries: Sequence[tuple[int, int]], shot_duration: float = 5.0,
                 shot_frames: Sequence[int] | None = None) -> SceneScoreSet:
    """Mean shot score per scene, weighted by frame counts when shots differ in length."""
    shot_scores = np.asarray(shot_scores, dtype=float)
    bounds = check_scenes(boundaries, len(shot_scores))
    frames = np.ones(len(shot_scores)) if shot_frames is None else np.asarray(shot_frames, dtype=float)
    scores = [float(np.average(shot_scores[a:b], weights=frames[a:b])) for a, b in bounds]
    durations = [float((b - a) * shot_duration) for a, b in bounds]
    return SceneScoreSet(bounds, scores, durations)


def knapsack_select(scenes: SceneScoreSet, budget_seconds: float) -> list[int]:
    """Exact 0/1 knapsack over integer-second durations.

    Maximizes the total scene score under the budget; among equal scores it
    prefers fewer scenes, then the lexicographically smallest index list.
    """
    weights = [int(round(d)) for d in scenes.durations]
    cap = int(math.floor(budget_seconds + 1e-9))
    if cap < 0:
        return []
    # best[c] = (score, -count, chosen); appending the newest (largest) index keeps lex order
    best: list[tuple[float, int, tuple[int, ...]]] = [(0.0, 0, ())] * (cap + 1)

    def better(a, b):
        if a[0] != b[0]:
            return a[0] > b[0]
        if a[1] != b[1]:
            return a[1] > b[1]
        return a[2] < b[2]

    for i, (w, v) in enumerate(zip(weights, scenes.scores)):
        if w > cap:
            continue
        new = best[:]
        for c in range(w, cap + 1):
            prev = best[c - w]
            cand = (prev[0] + v, prev[1] - 1, prev[2] + (i,))
            if better(cand, new[c]):
                new[c] = cand
        best = new
    winner = best[0]
    for cand in best[1:]:
        if better(cand, winner):
            winner = cand
    return list(winner[2])


def scenes_to_shots(boundaries: Sequence[tuple[int, int]], selected: Iterable[int]) -> list[int]:
    return [i for s in sorted(selected) for i in range(boundaries[s][0], boundaries[s][1])]


def summarize_by_scores(shot_scores, boundaries, shot_duration: float = 5.0,
                        budget_fraction: float = DEFAULT_BUDGET_FRACTION) -> list[int]:
    """Shot-level summary from importance scores: scene means, then knapsack under the budget."""
    scenes = scene_scores(shot_scores, boundaries, shot_duration)
    budget = budget_fraction * len(shot_scores) * shot_duration
    return scenes_to_shots(scenes.boundaries, knapsack_select(scenes, budget))


def temporal_overlap_f1(system: Iterable[int], user: Iterable[int]) -> MatchScore:
    system = set(int(i) for i in system)
    user = set(int(i) for i in user)
    if not system and not user:
        return MatchScore(1.0, 1.0, 1.0)
    if not system or not user:
        return MatchScore(0.0, 0.0, 0.0)
    inter = len(system & user)
    p = inter / len(system)
    r = inter / len(user)
    return MatchScore(p, r, f1_score(p, r), [(i, i) for i in sorted(system & user)], float(inter))


def overlap_f1_users(system, users: Sequence[Iterable[int]]) -> MatchScore:
    return average_scores([temporal_overlap_f1(system, u) for u in users])


def _window_label(k: float) -> str:
    return "inf" if math.isinf(k) else str(int(k))


def matching_report(video_id: str, system, users, concepts, windows: Sequence[float] = DEFAULT_WINDOWS,
                    mode: str = "weighted", threshold: int = 0) -> dict:
    """Per-window P/R/F1 (averaged over users) plus each user's matched pairs."""
    rows = []
    for k in windows:
        per_user = [bipartite_match_f1(system, u, concepts, k, mode, threshold) for u in users]
        avg = average_scores(per_user)
        rows.append({"K": _window_label(k), "precision": avg.precision, "recall": avg.recall, "f1": avg.f1,
                     "size": avg.size,
                     "matchings": [[list(p) for p in s.matching] for s in per_user]})
    return {"video": video_id, "protocol": "matching", "mode": mode, "summary": sorted(int(i) for i in system),
            "windows": rows}
