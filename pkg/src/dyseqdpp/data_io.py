"""Dataset files, frame-to-shot pooling and the synthetic planted-event generator.

On-disk layout::

    <dir>/manifest.json        {"schema_version": 1, "videos": ["<id>.json", ...]}
    <dir>/<id>.json            one document per video

Shot features are stored as base64 of little-endian float32 with an explicit
``[num_shots, feature_dim]`` shape. Concept vectors are strings of 0/1.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInput, ParseError, VersionError

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"


@dataclass
class VideoRecord:
    id: str
    shot_features: np.ndarray
    user_summaries: list[list[int]] = field(default_factory=list)
    concepts: np.ndarray | None = None
    scene_boundaries: list[tuple[int, int]] | None = None
    shot_duration_seconds: float = 5.0
    oracle_summary: list[int] | None = None

    def __post_init__(self):
        self.shot_features = np.ascontiguousarray(self.shot_features, dtype="<f4")
        if self.shot_features.ndim != 2:
            raise InvalidInput(f"video {self.id}: shot features must be 2-D")
        n = self.num_shots
        self.user_summaries = [sorted(int(i) for i in u) for u in self.user_summaries]
        for u in self.user_summaries + ([self.oracle_summary] if self.oracle_summary is not None else []):
            if any(i < 0 or i >= n for i in u):
                raise InvalidInput(f"video {self.id}: summary index out of range")
        if self.oracle_summary is not None:
            self.oracle_summary = sorted(int(i) for i in self.oracle_summary)
        if self.concepts is not None:
            self.concepts = np.asarray(self.concepts, dtype=np.uint8)
            if self.concepts.shape[0] != n or not np.all(self.concepts <= 1):
                raise InvalidInput(f"video {self.id}: need one binary concept vector per shot")
        if self.scene_boundaries is not None:
            self.scene_boundaries = [(int(a), int(b)) for a, b in self.scene_boundaries]
        if not self.shot_duration_seconds > 0:
            raise InvalidInput(f"video {self.id}: shot duration must be positive")

    @property
    def num_shots(self) -> int:
        return self.shot_features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.shot_features.shape[1]

    @property
    def oracle(self) -> list[int] | None:
        if self.oracle_summary is not None:
            return self.oracle_summary
        return self.user_summaries[0] if self.user_summaries else None

    def features(self) -> np.ndarray:
        return self.shot_features.astype(float)

    def __eq__(self, other):
        if not isinstance(other, VideoRecord):
            return NotImplemented
        def same(a, b):
            if a is None or b is None:
                return a is b
            return np.array_equal(np.asarray(a), np.asarray(b))
        return (self.id == other.id and same(self.shot_features, other.shot_features)
                and self.user_summaries == other.user_summaries and same(self.concepts, other.concepts)
                and self.scene_boundaries == other.scene_boundaries
                and self.shot_duration_seconds == other.shot_duration_seconds
                and self.oracle_summary == other.oracle_summary)


def record_to_doc(rec: VideoRecord) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "id": rec.id,
        "num_shots": rec.num_shots,
        "feature_dim": rec.feature_dim,
        "features": {"dtype": "float32", "byte_order": "little", "shape": [rec.num_shots, rec.feature_dim],
                     "data": base64.b64encode(rec.shot_features.tobytes()).decode("ascii")},
        "shot_duration_seconds": rec.shot_duration_seconds,
        "user_summaries": rec.user_summaries,
    }
    if rec.oracle_summary is not None:
        doc["oracle_summary"] = rec.oracle_summary
    if rec.concepts is not None:
        doc["concepts"] = ["".join(str(int(b)) for b in row) for row in rec.concepts]
    if rec.scene_boundaries is not None:
        doc["scene_boundaries"] = [list(b) for b in rec.scene_boundaries]
    return doc


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ParseError(f"{where}: missing required field '{key}'")
    return doc[key]


def doc_to_record(doc: dict, where: str = "<document>") -> VideoRecord:
    if not isinstance(doc, dict):
        raise ParseError(f"{where}: expected a JSON object")
    version = _require(doc, "schema_version", where)
    if version != SCHEMA_VERSION:
        raise VersionError(f"{where}: schema version {version}, expected {SCHEMA_VERSION}")
    feats = _require(doc, "features", where)
    shape = _require(feats, "shape", f"{where}: field 'features'")
    try:
        raw = base64.b64decode(_require(feats, "data", f"{where}: field 'features'"), validate=True)
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    except (ValueError, TypeError) as exc:
        raise ParseError(f"{where}: field 'features': {exc}") from None
    concepts = doc.get("concepts")
    if concepts is not None:
        try:
            concepts = np.array([[int(c) for c in row] for row in concepts], dtype=np.uint8)
        except ValueError:
            raise ParseError(f"{where}: field 'concepts' must hold strings of 0/1") from None
    try:
        return VideoRecord(id=str(_require(doc, "id", where)), shot_features=arr,
                           user_summaries=_require(doc, "user_summaries", where), concepts=concepts,
                           scene_boundaries=doc.get("scene_boundaries"),
                           shot_duration_seconds=float(doc.get("shot_duration_seconds", 5.0)),
                           oracle_summary=doc.get("oracle_summary"))
    except InvalidInput as exc:
        raise ParseError(f"{where}: {exc}") from None


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_json(path: Path):
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def save_dataset(records: Sequence[VideoRecord], path, metadata: dict | None = None) -> None:
    """Write one document per video plus the manifest; ``metadata`` is stored in the manifest as is."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for rec in records:
        name = f"{rec.id}.json"
        _dump(record_to_doc(rec), path / name)
        names.append(name)
    manifest = {"schema_version": SCHEMA_VERSION, "videos": names}
    if metadata is not None:
        manifest["metadata"] = metadata
    _dump(manifest, path / MANIFEST)


def load_dataset(path) -> list[VideoRecord]:
    """Load every video listed in the manifest; an empty manifest file gives an empty list."""
    path = Path(path)
    manifest_path = path / MANIFEST if path.is_dir() else path
    if manifest_path.exists() and manifest_path.stat().st_size == 0:
        return []
    manifest = _load_json(manifest_path)
    where = str(manifest_path)
    if not isinstance(manifest, dict):
        raise ParseError(f"{where}: expected a JSON object")
    version = _require(manifest, "schema_version", where)
    if version != SCHEMA_VERSION:
        raise VersionError(f"{where}: schema version {version}, expected {SCHEMA_VERSION}")
    root = manifest_path.parent
    return [doc_to_record(_load_json(root / name), str(root / name))
            for name in _require(manifest, "videos", where)]


def pool_frames_to_shots(frame_features, shot_len_frames: int) -> np.ndarray:
    """Coordinatewise max over consecutive blocks of frames; a short last block is pooled as is."""
    frames = np.asarray(frame_features, dtype=float)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise InvalidInput("need a non-empty (frames, dim) array")
    if shot_len_frames < 1:
        raise InvalidInput("shot length must be at least one frame")
    n = math.ceil(frames.shape[0] / shot_len_frames)
    return np.stack([frames[i * shot_len_frames:(i + 1) * shot_len_frames].max(axis=0) for i in range(n)])


# -- synthetic corpus ----------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Planted-event video: consecutive events, each a noisy cluster of shots.

    ``repeat_far_events`` lets a cluster recur once the previous occurrence of
    that cluster ended at least ``repeat_min_gap`` shots earlier.
    """

    num_events: int = 12
    event_length_range: tuple[int, int] = (2, 9)
    feature_dim: int = 64
    within_event_spread: float = 0.1
    cross_event_separation: float = 1.0
    repeat_far_events: bool = True
    seed: int = 0
    num_clusters: int = 8
    repeat_min_gap: int = 16
    num_users: int = 3
    concept_dim: int = 54
    shot_duration_seconds: float = 5.0

    def validate(self) -> None:
        lo, hi = self.event_length_range
        if self.num_events < 1 or lo < 1 or hi < lo or self.feature_dim < 1 or self.num_clusters < 1:
            raise InvalidInput("synthetic spec needs positive sizes and a valid event length range")
        if not 0 <= self.within_event_spread < self.cross_event_separation:
            raise InvalidInput("within_event_spread must be non-negative and below cross_event_separation")


def _cluster_sequence(spec: SynthSpec, lengths: np.ndarray, rng: np.random.Generator) -> list[int]:
    last_end: dict[int, int] = {}
    seq: list[int] = []
    pos = 0
    fresh = iter(range(spec.num_clusters))
    for length in lengths:
        prev = seq[-1] if seq else None
        reusable = [c for c, end in last_end.items()
                    if c != prev and pos - end >= spec.repeat_min_gap] if spec.repeat_far_events else []
        c = next(fresh, None)
        if c is None or (reusable and rng.random() < 0.5):
            pool = reusable or [c for c in range(spec.num_clusters) if c != prev and c not in last_end] \
                or [c for c in range(spec.num_clusters) if c != prev] or [0]
            c = int(rng.choice(pool))
        seq.append(c)
        pos += int(length)
        last_end[c] = pos
    return seq


def generate_synthetic(spec: SynthSpec, video_id: str | None = None) -> VideoRecord:
    """Synthetic video whose oracle summary is one medoid shot per event occurrence."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.feature_dim
    # sparse non-negative centres; disjoint supports sit exactly `separation` apart
    support = max(1, d // 8)
    centres = np.zeros((spec.num_clusters, d))
    for c in range(spec.num_clusters):
        idx = rng.choice(d, size=support, replace=False)
        v = rng.uniform(0.5, 1.0, size=support)
        centres[c, idx] = v / np.linalg.norm(v) * spec.cross_event_separation / np.sqrt(2.0)
    bits = rng.integers(0, 2, size=(spec.num_clusters, spec.concept_dim), dtype=np.uint8)
    lo, hi = spec.event_length_range
    lengths = rng.integers(lo, hi + 1, size=spec.num_events)
    clusters = _cluster_sequence(spec, lengths, rng)

    feats, concepts, scenes, oracle = [], [], [], []
    users: list[list[int]] = [[] for _ in range(spec.num_users)]
    pos = 0
    for c, length in zip(clusters, lengths):
        length = int(length)
        x = centres[c] + rng.standard_normal((length, d)) * (spec.within_event_spread / np.sqrt(d))
        x = x.astype("<f4").astype(float)
        feats.append(x)
        concepts.append(np.repeat(bits[c][None, :], length, axis=0))
        dist = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2).sum(axis=1)
        oracle.append(pos + int(np.argmin(dist)))
        for u in users:
            u.append(pos + int(rng.integers(0, length)))
        scenes.append((pos, pos + length))
        pos += length
    return VideoRecord(id=video_id or f"synth-{spec.seed}", shot_features=np.concatenate(feats),
                       user_summaries=users, concepts=np.concatenate(concepts), scene_boundaries=scenes,
                       shot_duration_seconds=spec.shot_duration_seconds, oracle_summary=oracle)


def generate_corpus(spec: SynthSpec, count: int, prefix: str = "synth") -> list[VideoRecord]:
    """``count`` videos with seeds derived from ``spec.seed``."""
    seeds = np.random.SeedSequence(spec.seed).generate_state(count)
    return [generate_synthetic(SynthSpec(**{**spec.__dict__, "seed": int(s)}), f"{prefix}-{i:03d}")
            for i, s in enumerate(seeds)]
