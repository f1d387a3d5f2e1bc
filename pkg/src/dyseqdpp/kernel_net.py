"""Feature network that builds per-step L-ensemble kernels, plus the length softmax.

Kernel: ``L_ij = z_i^T W^T W z_j`` with ``z = relu(U relu(V f))``.
Length head: ``P(l) = softmax_l(w_l . pooled + b_l)`` over the length menu.
Gradients are written out by hand; no autodiff framework is involved.
"""
from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInput, InvalidLength, InvalidSubset, ShapeError, SingularKernel, VersionError

DEFAULT_LENGTHS: tuple[int, ...] = tuple(range(5, 16))
DET_FLOOR = 1e-12
CHECKPOINT_VERSION = 1
_ARRAYS = ("V", "U", "W", "softmax_weights", "softmax_bias")


def check_length_menu(lengths: Iterable[int]) -> tuple[int, ...]:
    lengths = tuple(int(l) for l in lengths)
    if not lengths or any(l <= 0 for l in lengths) or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise InvalidInput(f"length menu must be strictly increasing positive integers, got {lengths}")
    if lengths[-1] > 20:
        raise InvalidInput(f"length menu maximum {lengths[-1]} exceeds 20")
    return lengths


@dataclass
class PolicyParams:
    """Kernel network weights and the per-length softmax head.

    Row ``k`` of ``softmax_weights``/``softmax_bias`` belongs to ``lengths[k]``.
    The same container holds gradients (see ``ParamGradient``).
    """

    V: np.ndarray  # (d_h1, d_f)
    U: np.ndarray  # (d_h2, d_h1)
    W: np.ndarray  # (d_k, d_h2)
    softmax_weights: np.ndarray  # (n_lengths, d_f)
    softmax_bias: np.ndarray  # (n_lengths,)
    lengths: tuple[int, ...] = DEFAULT_LENGTHS

    def __post_init__(self):
        self.lengths = check_length_menu(self.lengths)
        d_h1, d_f = self.V.shape
        d_h2 = self.U.shape[0]
        expected = {"V": (d_h1, d_f), "U": (d_h2, d_h1), "W": (self.W.shape[0], d_h2),
                    "softmax_weights": (len(self.lengths), d_f),
                    "softmax_bias": (len(self.lengths),)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @classmethod
    def init(cls, feature_dim: int, rng: np.random.Generator, *, d_h1: int = 256, d_h2: int = 128,
             d_k: int = 128, lengths: Sequence[int] = DEFAULT_LENGTHS) -> "PolicyParams":
        """Glorot-uniform network weights; zero softmax head."""
        def glorot(fan_out, fan_in):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-a, a, size=(fan_out, fan_in))

        lengths = check_length_menu(lengths)
        return cls(V=glorot(d_h1, feature_dim), U=glorot(d_h2, d_h1), W=glorot(d_k, d_h2),
                   softmax_weights=np.zeros((len(lengths), feature_dim)),
                   softmax_bias=np.zeros(len(lengths)), lengths=lengths)

    @property
    def feature_dim(self) -> int:
        return self.V.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _ARRAYS}

    def _map(self, fn, *others) -> "PolicyParams":
        return PolicyParams(**{n: fn(getattr(self, n), *(getattr(o, n) for o in others)) for n in _ARRAYS},
                            lengths=self.lengths)

    def zeros_like(self) -> "PolicyParams":
        return self._map(np.zeros_like)

    def copy(self) -> "PolicyParams":
        return self._map(np.copy)

    def __add__(self, other: "PolicyParams") -> "PolicyParams":
        return self._map(np.add, other)

    def __sub__(self, other: "PolicyParams") -> "PolicyParams":
        return self._map(np.subtract, other)

    def __mul__(self, c: float) -> "PolicyParams":
        return self._map(lambda a: a * c)

    __rmul__ = __mul__

    def iadd(self, other: "PolicyParams", scale: float = 1.0) -> None:
        """In-place ``self += scale * other``."""
        for n in _ARRAYS:
            getattr(self, n).__iadd__(scale * getattr(other, n))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays().values()])

    def with_flat(self, vec: np.ndarray) -> "PolicyParams":
        out, pos = {}, 0
        for n, a in self.arrays().items():
            out[n] = np.asarray(vec[pos:pos + a.size], dtype=float).reshape(a.shape).copy()
            pos += a.size
        return PolicyParams(**out, lengths=self.lengths)

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays().values())))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())

    def length_index(self, l: int) -> int:
        try:
            return self.lengths.index(int(l))
        except ValueError:
            raise InvalidLength(f"length {l} is not in the menu {self.lengths}") from None


ParamGradient = PolicyParams


def _features(params: PolicyParams, features) -> np.ndarray:
    F = np.asarray(features, dtype=float)
    if F.ndim == 1:
        F = F[None, :]
    if F.ndim != 2 or F.shape[1] != params.feature_dim:
        raise ShapeError(f"features of shape {F.shape} do not match feature dim {params.feature_dim}")
    return F


def _forward(params: PolicyParams, F: np.ndarray):
    a1 = params.V @ F.T
    h = np.maximum(a1, 0.0)
    a2 = params.U @ h
    z = np.maximum(a2, 0.0)
    G = params.W @ z
    return a1, h, a2, z, G


def embed(params: PolicyParams, f) -> np.ndarray:
    """z = relu(U relu(V f)); rows of a 2-D input are embedded independently."""
    F = _features(params, f)
    z = _forward(params, F)[3].T
    return z[0] if np.ndim(f) == 1 else z


def build_kernel(params: PolicyParams, features) -> np.ndarray:
    """Gram matrix of the projected embeddings ``W z_i``."""
    F = _features(params, features)
    if F.shape[0] == 0:
        raise InvalidInput("empty feature list")
    G = _forward(params, F)[4]
    return G.T @ G


def _split(m: int, x_t: Iterable[int], x_prev: Iterable[int]) -> tuple[list[int], list[int], list[int]]:
    prev = sorted(set(int(i) for i in x_prev))
    cur = sorted(set(int(i) for i in x_t))
    if any(i < 0 or i >= m for i in prev + cur):
        raise InvalidSubset(f"subset indices out of range for ground set of size {m}")
    if set(prev) & set(cur):
        raise InvalidSubset("x_t overlaps the previous selection")
    segment = [i for i in range(m) if i not in set(prev)]
    return sorted(prev + cur), prev, segment


def _log_terms(L: np.ndarray, chosen: list[int], segment: list[int]):
    shift = np.zeros(L.shape[0])
    shift[segment] = 1.0
    sign_d, logdet_d = np.linalg.slogdet(L + np.diag(shift))
    if sign_d <= 0:
        raise SingularKernel("conditioning set has zero probability")
    L_A = L[np.ix_(chosen, chosen)]
    det_a = np.linalg.det(L_A) if chosen else 1.0
    return L_A, det_a, logdet_d, shift


def log_cond_prob(params: PolicyParams, ground_features, x_t: Iterable[int],
                  x_prev: Iterable[int] = ()) -> float:
    """log P(x_t | x_prev) for the conditional DPP on the ground set ``x_prev ∪ segment``.

    Indices are local rows of ``ground_features``; every row not in ``x_prev``
    belongs to the current segment.
    """
    L = build_kernel(params, ground_features)
    chosen, _, segment = _split(L.shape[0], x_t, x_prev)
    try:
        L_A, det_a, logdet_d, _ = _log_terms(L, chosen, segment)
    except SingularKernel:
        # the previous selection itself has no mass, so nothing after it does either
        return -np.inf
    if det_a <= DET_FLOOR:
        return -np.inf
    return float(np.log(det_a) - logdet_d)


def grad_log_cond_prob(params: PolicyParams, ground_features, x_t: Iterable[int],
                       x_prev: Iterable[int] = ()) -> ParamGradient:
    F = _features(params, ground_features)
    a1, h, a2, z, G = _forward(params, F)
    L = G.T @ G
    chosen, _, segment = _split(L.shape[0], x_t, x_prev)
    L_A, det_a, _, shift = _log_terms(L, chosen, segment)
    if det_a <= DET_FLOOR:
        raise SingularKernel("restricted kernel is singular; log-probability is -inf")
    # d log P / dL = pad(L_A^{-1}) - (L + I_seg)^{-1}
    M = -np.linalg.inv(L + np.diag(shift))
    if chosen:
        M[np.ix_(chosen, chosen)] += np.linalg.inv(L_A)
    M = 0.5 * (M + M.T)
    dG = 2.0 * G @ M
    dW = dG @ z.T
    da2 = (params.W.T @ dG) * (a2 > 0)
    dU = da2 @ h.T
    da1 = (params.U.T @ da2) * (a1 > 0)
    dV = da1 @ F
    return PolicyParams(V=dV, U=dU, W=dW, softmax_weights=np.zeros_like(params.softmax_weights),
                        softmax_bias=np.zeros_like(params.softmax_bias), lengths=params.lengths)


def phi_pool(features_selected, features_segment) -> np.ndarray:
    """Coordinatewise max over the union of both feature lists."""
    parts = [np.asarray(x, dtype=float).reshape(-1, np.shape(x)[-1]) for x in (features_selected, features_segment)
             if np.size(x)]
    if not parts:
        raise InvalidInput("cannot pool an empty set of shots")
    return np.max(np.concatenate(parts, axis=0), axis=0)


def length_logits(params: PolicyParams, pooled) -> np.ndarray:
    pooled = np.asarray(pooled, dtype=float)
    if pooled.shape != (params.feature_dim,):
        raise ShapeError(f"pooled vector of shape {pooled.shape}, expected ({params.feature_dim},)")
    return params.softmax_weights @ pooled + params.softmax_bias


def length_distribution(params: PolicyParams, pooled) -> np.ndarray:
    """Softmax over the length menu; entry ``k`` is the probability of ``params.lengths[k]``."""
    logits = length_logits(params, pooled)
    e = np.exp(logits - logits.max())
    return e / e.sum()


def grad_log_length_prob(params: PolicyParams, pooled, l: int) -> ParamGradient:
    k = params.length_index(l)
    pooled = np.asarray(pooled, dtype=float)
    coef = -length_distribution(params, pooled)
    coef[k] += 1.0
    return PolicyParams(V=np.zeros_like(params.V), U=np.zeros_like(params.U), W=np.zeros_like(params.W),
                        softmax_weights=np.outer(coef, pooled), softmax_bias=coef, lengths=params.lengths)


# -- checkpoints ---------------------------------------------------------------

def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(params: PolicyParams, path) -> None:
    """Write an ``.npz`` archive with fixed member timestamps so equal params give equal bytes."""
    members = {"format_version": np.array(CHECKPOINT_VERSION, dtype=np.int64),
               "lengths": np.array(params.lengths, dtype=np.int64)}
    members.update({n: np.asarray(a, dtype="<f8") for n, a in params.arrays().items()})
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in members.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, _npy_bytes(arr))


def load_checkpoint(path) -> PolicyParams:
    with np.load(path, allow_pickle=False) as data:
        version = int(np.ravel(data["format_version"])[0])
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"checkpoint format {version}, expected {CHECKPOINT_VERSION}")
        return PolicyParams(**{n: data[n].astype(float) for n in _ARRAYS},
                            lengths=tuple(int(l) for l in data["lengths"]))

