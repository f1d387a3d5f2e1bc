"""Exact L-ensemble DPP computations for ground sets small enough to enumerate.

Subsets are given as iterables of local (row/column) indices into the kernel.
Enumerated distributions index subsets by bitmask: bit ``i`` of a mask stands
for the ``i``-th free item of the distribution.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from typing import Iterable

import numpy as np

from .errors import CapacityExceeded, InvalidKernel, InvalidSubset, NumericalFailure

SYM_TOL = 1e-9
PSD_TOL = 1e-8
UNDERFLOW_TOL = 1e-12
MAX_ENUM = 20


def validate_kernel(L, *, sym_tol: float = SYM_TOL, psd_tol: float = PSD_TOL) -> np.ndarray:
    """Return ``L`` as a float array after checking it is a symmetric PSD matrix."""
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise InvalidKernel(f"kernel must be square, got shape {L.shape}")
    if not np.all(np.isfinite(L)):
        raise InvalidKernel("kernel has non-finite entries")
    if L.size and np.max(np.abs(L - L.T)) > sym_tol:
        raise InvalidKernel(f"kernel is not symmetric (max |L - L^T| = {np.max(np.abs(L - L.T)):.3g})")
    if L.size and np.linalg.eigvalsh(L)[0] < -psd_tol:
        raise InvalidKernel("kernel is not positive semidefinite")
    return L


def validate_marginal_kernel(K) -> np.ndarray:
    K = validate_kernel(K)
    if K.size and np.linalg.eigvalsh(K)[-1] > 1.0 + PSD_TOL:
        raise InvalidKernel("marginal kernel has an eigenvalue above 1")
    return K


def _index_list(y: Iterable[int], n: int) -> list[int]:
    idx = sorted(int(i) for i in y)
    if len(set(idx)) != len(idx):
        raise InvalidSubset(f"subset has repeated items: {idx}")
    if idx and (idx[0] < 0 or idx[-1] >= n):
        raise InvalidSubset(f"subset {idx} out of range for ground set of size {n}")
    return idx


def det(A: np.ndarray) -> float:
    """Determinant by pivoted LU; the empty matrix has determinant 1."""
    if A.shape[0] == 0:
        return 1.0
    d = float(np.linalg.det(A))
    if not np.isfinite(d):
        raise NumericalFailure("non-finite determinant")
    return d


def _clamp(p: float) -> float:
    # tiny negative values are round-off on singular minors
    if -UNDERFLOW_TOL <= p < 0.0:
        return 0.0
    return p


def elementary_prob(L, y: Iterable[int]) -> float:
    """P(Y = y) = det(L_y) / det(L + I)."""
    L = validate_kernel(L)
    idx = _index_list(y, L.shape[0])
    num = _clamp(det(L[np.ix_(idx, idx)]))
    return _clamp(num / det(L + np.eye(L.shape[0])))


def marginal_prob(K, y: Iterable[int]) -> float:
    """P(y ⊆ Y) = det(K_y)."""
    K = np.asarray(K, dtype=float)
    idx = _index_list(y, K.shape[0])
    return _clamp(det(K[np.ix_(idx, idx)]))


def to_marginal_kernel(L) -> np.ndarray:
    """K = L (L + I)^{-1}, symmetrized."""
    L = validate_kernel(L)
    n = L.shape[0]
    try:
        # L and (L+I)^{-1} commute, so solving (L+I) K = L gives the same K
        K = np.linalg.solve(L + np.eye(n), L)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"singular solve: {exc}") from exc
    return 0.5 * (K + K.T)


def conditional_prob(L, y1: Iterable[int], y0: Iterable[int]) -> float:
    """P(Y = y1 ∪ y0 | y0 ⊆ Y) = det(L_{y1∪y0}) / det(L + I_{Y∖y0})."""
    L = validate_kernel(L)
    n = L.shape[0]
    a = _index_list(y1, n)
    b = _index_list(y0, n)
    if set(a) & set(b):
        raise InvalidSubset(f"conditioning sets overlap: {sorted(set(a) & set(b))}")
    both = sorted(a + b)
    shift = np.ones(n)
    shift[b] = 0.0
    num = _clamp(det(L[np.ix_(both, both)]))
    return _clamp(num / det(L + np.diag(shift)))


@lru_cache(maxsize=32)
def _subset_tables(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Per subset size k: (bitmasks, member index array of shape (C(n,k), k))."""
    out = []
    for k in range(n + 1):
        combos = np.array(list(combinations(range(n), k)), dtype=np.intp).reshape(-1 if k else 1, k)
        masks = np.left_shift(1, combos).sum(axis=1)
        out.append((masks.astype(np.int64), combos))
    return tuple(out)


def subset_determinants(L: np.ndarray, free: list[int], fixed: list[int]) -> np.ndarray:
    """det(L_{A ∪ fixed}) for every A ⊆ free, indexed by bitmask over ``free``."""
    n = len(free)
    out = np.empty(1 << n)
    free_arr = np.asarray(free, dtype=np.intp)
    fixed_arr = np.asarray(fixed, dtype=np.intp)
    for k, (masks, combos) in enumerate(_subset_tables(n)):
        size = k + len(fixed_arr)
        if size == 0:
            out[masks] = 1.0
            continue
        idx = np.concatenate([np.broadcast_to(fixed_arr, (len(combos), len(fixed_arr))),
                              free_arr[combos]], axis=1)
        out[masks] = np.linalg.det(L[idx[:, :, None], idx[:, None, :]])
    if not np.all(np.isfinite(out)):
        raise NumericalFailure("non-finite subset determinant")
    return out


@dataclass(frozen=True)
class SubsetDistribution:
    """Probabilities of every subset of ``items``; ``probs[mask]`` for bitmask ``mask``."""

    items: tuple[int, ...]
    probs: np.ndarray
    conditioned_on: tuple[int, ...] = ()

    def subset(self, mask: int) -> tuple[int, ...]:
        return tuple(it for i, it in enumerate(self.items) if mask >> i & 1)

    def mask(self, subset: Iterable[int]) -> int:
        pos = {it: i for i, it in enumerate(self.items)}
        try:
            return sum(1 << pos[s] for s in set(subset))
        except KeyError as exc:
            raise InvalidSubset(f"item {exc.args[0]} is not free in this distribution") from None

    def prob(self, subset: Iterable[int]) -> float:
        return float(self.probs[self.mask(subset)])

    def as_dict(self) -> dict[frozenset, float]:
        return {frozenset(self.subset(m)): float(p) for m, p in enumerate(self.probs)}

    def total(self) -> float:
        return float(self.probs.sum())


def point_mass(items: Iterable[int], support: Iterable[int]) -> SubsetDistribution:
    items = tuple(items)
    probs = np.zeros(1 << len(items))
    dist = SubsetDistribution(items, probs)
    probs[dist.mask(support)] = 1.0
    return dist


def enumerate_distribution(L, conditioned_on: Iterable[int] = (), *,
                           det_floor: float | None = None) -> SubsetDistribution:
    """Exact conditional DPP over all subsets of the items not in ``conditioned_on``.

    With ``det_floor`` set, numerator determinants at or below it count as zero
    probability (used by the policy, whose kernels can be numerically rank deficient).
    """
    L = validate_kernel(L)
    n = L.shape[0]
    fixed = _index_list(conditioned_on, n)
    free = [i for i in range(n) if i not in set(fixed)]
    if len(free) > MAX_ENUM:
        raise CapacityExceeded(f"{len(free)} free items exceeds the enumeration cap of {MAX_ENUM}")
    shift = np.ones(n)
    shift[fixed] = 0.0
    denom = det(L + np.diag(shift))
    if denom <= 0.0:
        raise NumericalFailure("conditioning set has zero probability")
    dets = subset_determinants(L, free, fixed)
    if det_floor is not None:
        dets[dets <= det_floor] = 0.0
    else:
        dets[(dets < 0.0) & (dets >= -UNDERFLOW_TOL)] = 0.0
    if np.any(dets < 0.0):
        raise NumericalFailure("negative subset determinant; kernel is not PSD")
    return SubsetDistribution(tuple(free), dets / denom, tuple(fixed))


def sample_subset(dist: SubsetDistribution, rng: np.random.Generator) -> tuple[int, ...]:
    """Inverse-CDF draw over the enumerated subsets."""
    cdf = np.cumsum(dist.probs)
    u = rng.random() * cdf[-1]
    mask = int(np.searchsorted(cdf, u, side="right"))
    return dist.subset(min(mask, len(cdf) - 1))


def conditional_marginal_kernel(L, conditioned_on: Iterable[int] = ()) -> tuple[tuple[int, ...], np.ndarray]:
    """Marginal kernel of the DPP over the free items given ``conditioned_on`` is included.

    Returns ``(free, K)`` with ``K = I - [(L + I_free)^-1]_free``.
    """
    L = validate_kernel(L)
    n = L.shape[0]
    fixed = _index_list(conditioned_on, n)
    free = [i for i in range(n) if i not in set(fixed)]
    shift = np.ones(n)
    shift[fixed] = 0.0
    try:
        inv = np.linalg.inv(L + np.diag(shift))
    except np.linalg.LinAlgError:
        raise NumericalFailure("conditioning set has zero probability") from None
    K = np.eye(len(free)) - inv[np.ix_(free, free)]
    return tuple(free), (K + K.T) / 2.0


def sample_conditional(L, conditioned_on: Iterable[int], rng: np.random.Generator) -> tuple[int, ...]:
    """Exact draw from the conditional DPP without enumerating subsets.

    Visits the free items in order, including each with its current marginal
    probability and conditioning the marginal kernel on the outcome.
    """
    free, K = conditional_marginal_kernel(L, conditioned_on)
    K = K.copy()
    picked = []
    for i in range(len(free)):
        p = min(max(K[i, i], 0.0), 1.0)
        if rng.random() < p:
            picked.append(free[i])
            K -= np.outer(K[:, i], K[i, :]) / p
        elif p < 1.0:
            K -= np.outer(K[:, i], K[i, :]) / (p - 1.0)
    return tuple(picked)


def map_subset(dist: SubsetDistribution) -> tuple[int, ...]:
    """Most probable subset; ties go to the smallest bitmask."""
    return dist.subset(int(np.argmax(dist.probs)))
