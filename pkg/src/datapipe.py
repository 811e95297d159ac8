#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Dataset ingestion, observation sampling, label noise and the synthetic
grammar corpus.

On-disk layout of a split root::

    mapping.txt              "id action_name" per line, ids 0..K-1
    groundTruth/<id>.txt     one action name per frame
    features/<id>.feat       "AFV1", u32 rows, u32 cols, float32 row-major (little-endian)
    bundles/<split>.txt      one video id per line
    predicted/<id>.txt       optional, same shape as groundTruth

Frame convention: frames [0, αT) are observed and frames [αT, (α+β)T) form
the prediction horizon (0-based, half-open), with αT and (α+β)T floored.
"""

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from src.adapters import Vocabulary
from src.config import FEATURE_MAGIC
from src.errors import ConsistencyError, EmptyObservationError, InputError, ParseError

logger = logging.getLogger(__name__)

_FLOOR_EPS = 1e-9
_FEATURE_HEADER = struct.Struct("<4sII")


@dataclass
class VideoRecord:
    id: str
    gt_labels: np.ndarray
    features: np.ndarray
    predicted_labels: np.ndarray = None

    @property
    def num_frames(self):
        return len(self.gt_labels)

    def validate(self, num_classes):
        if self.num_frames < 1:
            raise ConsistencyError(f"video {self.id}: no frames")
        if self.features.shape[0] != self.num_frames:
            raise ConsistencyError(
                f"video {self.id}: {self.features.shape[0]} feature rows but {self.num_frames} labels"
            )
        if self.predicted_labels is not None and len(self.predicted_labels) != self.num_frames:
            raise ConsistencyError(
                f"video {self.id}: {len(self.predicted_labels)} predicted labels but {self.num_frames} frames"
            )
        for track in (self.gt_labels, self.predicted_labels):
            if track is not None and (np.any(track < 0) or np.any(track >= num_classes)):
                raise ConsistencyError(f"video {self.id}: class id out of range [0, {num_classes})")
        return self


@dataclass
class ObservationSpec:
    alpha: float
    beta: float
    sample_rate: int = 1
    start: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta < 0 or self.alpha + self.beta > 1.0 + _FLOOR_EPS:
            raise InputError(f"need alpha > 0, beta >= 0 and alpha + beta <= 1 (got {self.alpha}, {self.beta})")
        if self.sample_rate < 1:
            raise InputError(f"sample rate must be >= 1, got {self.sample_rate}")
        if not 0 <= self.start < self.sample_rate:
            raise InputError(f"start frame must lie in [0, {self.sample_rate}), got {self.start}")


@dataclass
class Observation:
    """
    Attributes:
        features: θ₀ x L_D sampled visual features
        input_labels: θ₀ ids feeding the text stream (predicted or noisy)
        gt_labels: θ₀ clean GT ids at the same positions
        frames: the sampled frame indices
        segments: run-length (class, length) encoding of the horizon
        horizon: prediction frame count
        observed: number of observed frames ⌊αT⌋
    """

    features: np.ndarray
    input_labels: np.ndarray
    gt_labels: np.ndarray
    frames: np.ndarray
    segments: list
    horizon: int
    observed: int

    @property
    def theta0(self):
        return len(self.frames)


# ---------------------------------------------------------------------------
# run-length encoding
# ---------------------------------------------------------------------------

@numba.njit(cache=False)
def _run_starts(labels):
    n = labels.shape[0]
    starts = np.empty(n, dtype=np.int64)
    count = 0
    for i in range(n):
        if i == 0 or labels[i] != labels[i - 1]:
            starts[count] = i
            count += 1
    return starts[:count]


def run_length_encode(labels):
    """Frame track -> list of (class id, length)."""
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if labels.size == 0:
        return []
    starts = _run_starts(labels)
    ends = np.append(starts[1:], labels.size)
    return [(int(labels[s]), int(e - s)) for s, e in zip(starts, ends)]


def expand_segments(segments):
    if not segments:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.full(length, cls, dtype=np.int64) for cls, length in segments])


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _floor(x):
    return int(math.floor(x + _FLOOR_EPS))


def observation_count(num_frames, alpha, sample_rate):
    """θ₀ = ⌊αT / μ₀⌋."""
    return _floor(alpha * num_frames / sample_rate)


def sample_observation(v, spec, input_labels=None):
    """
    Sample θ₀ positions s, s+μ₀, ... inside the first ⌊αT⌋ frames.

    Args:
        v: VideoRecord
        spec: ObservationSpec
        input_labels: optional full-length track for the text stream; GT when omitted

    Returns:
        Observation
    """
    T = v.num_frames
    theta0 = observation_count(T, spec.alpha, spec.sample_rate)
    if theta0 < 1:
        raise EmptyObservationError(
            f"video {v.id}: ⌊{spec.alpha}·{T}/{spec.sample_rate}⌋ = 0 observed positions"
        )
    observed = _floor(spec.alpha * T)
    end = min(_floor((spec.alpha + spec.beta) * T), T)
    frames = spec.start + spec.sample_rate * np.arange(theta0)
    # θ₀·μ₀ <= αT and start < μ₀ keep every sample strictly inside the observation
    frames = frames[frames < observed]
    if input_labels is None:
        input_labels = v.gt_labels
    horizon_track = v.gt_labels[observed:end]
    return Observation(
        features=v.features[frames],
        input_labels=np.asarray(input_labels)[frames].astype(np.int64),
        gt_labels=v.gt_labels[frames].astype(np.int64),
        frames=frames,
        segments=run_length_encode(horizon_track),
        horizon=int(end - observed),
        observed=observed,
    )


def inject_label_noise(labels, p, num_classes, rng):
    """Replace each label, with probability p, by a uniformly drawn different class."""
    if not 0.0 <= p <= 1.0:
        raise InputError(f"noise probability must lie in [0, 1], got {p}")
    labels = np.asarray(labels, dtype=np.int64)
    if p == 0.0 or num_classes < 2 or labels.size == 0:
        return labels.copy()
    flip = rng.random(labels.shape) < p
    offsets = rng.integers(1, num_classes, size=labels.shape)
    return np.where(flip, (labels + offsets) % num_classes, labels)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def read_mapping(path, token_buckets=None):
    path = Path(path)
    names = {}
    seen_names = set()
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ParseError(f"cannot read mapping: {e}", path=path) from e
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(maxsplit=1)
        if len(parts) != 2:
            raise ParseError(f"expected 'id action_name', got {raw!r}", path=path, line=lineno)
        try:
            idx = int(parts[0])
        except ValueError:
            raise ParseError(f"bad class id {parts[0]!r}", path=path, line=lineno) from None
        if idx in names:
            raise ParseError(f"duplicate class id {idx}", path=path, line=lineno)
        if parts[1] in seen_names:
            raise ParseError(f"duplicate action name {parts[1]!r}", path=path, line=lineno)
        names[idx] = parts[1]
        seen_names.add(parts[1])
    if sorted(names) != list(range(len(names))):
        raise ParseError(f"class ids must be dense in [0, {len(names)})", path=path)
    kwargs = {} if token_buckets is None else {"token_buckets": token_buckets}
    return Vocabulary([names[i] for i in range(len(names))], **kwargs)


def write_mapping(path, vocab):
    Path(path).write_text("".join(f"{i} {name}\n" for i, name in enumerate(vocab.names)), encoding="utf-8")


def read_label_file(path, vocab):
    path = Path(path)
    ids = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ParseError(f"cannot read labels: {e}", path=path) from e
    for lineno, raw in enumerate(lines, 1):
        name = raw.strip()
        if not name:
            continue
        if name not in vocab:
            raise ParseError(f"unknown action name {name!r}", path=path, line=lineno)
        ids.append(vocab.id_of(name))
    return np.asarray(ids, dtype=np.int64)


def write_label_file(path, labels, vocab):
    Path(path).write_text("".join(f"{vocab.name_of(int(i))}\n" for i in labels), encoding="utf-8")


def read_features(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise ParseError(f"cannot read features: {e}", path=path) from e
    if len(blob) < _FEATURE_HEADER.size:
        raise ParseError("truncated feature header", path=path)
    magic, rows, cols = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise ParseError(f"bad feature magic {magic!r}", path=path)
    expected = _FEATURE_HEADER.size + 4 * rows * cols
    if len(blob) != expected:
        raise ParseError(f"feature file is {len(blob)} bytes, expected {expected}", path=path)
    data = np.frombuffer(blob, dtype="<f4", offset=_FEATURE_HEADER.size)
    return data.reshape(rows, cols).astype(np.float32)


def write_features(path, features):
    features = np.ascontiguousarray(features, dtype="<f4")
    rows, cols = features.shape
    with open(path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, rows, cols))
        f.write(features.tobytes())


def read_bundle(path):
    path = Path(path)
    try:
        return [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    except OSError as e:
        raise ParseError(f"cannot read bundle: {e}", path=path) from e


@dataclass
class SplitPaths:
    """Where one split's files live; ``from_root`` gives the standard layout."""

    mapping: Path
    bundle: Path
    ground_truth: Path
    features: Path
    predicted: Path = None

    @classmethod
    def from_root(cls, root, split):
        root = Path(root)
        predicted = root / "predicted"
        return cls(
            mapping=root / "mapping.txt",
            bundle=root / "bundles" / f"{split}.txt",
            ground_truth=root / "groundTruth",
            features=root / "features",
            predicted=predicted if predicted.is_dir() else None,
        )


def load_split(mapping, bundle, ground_truth, features, predicted=None, token_buckets=None, workers=4):
    """
    Args:
        mapping: mapping.txt path
        bundle: bundle file listing the split's video ids
        ground_truth: directory of per-video label files
        features: directory of per-video .feat files
        predicted: optional directory of predicted-label files
        token_buckets: tokenizer bucket count for the returned vocabulary
        workers: loader threads

    Returns:
        (Vocabulary, list of VideoRecord) in bundle order
    """
    vocab = read_mapping(mapping, token_buckets)
    ids = read_bundle(bundle)

    def load_one(video_id):
        gt = read_label_file(Path(ground_truth) / f"{video_id}.txt", vocab)
        feats = read_features(Path(features) / f"{video_id}.feat")
        pred = None
        if predicted is not None:
            pred_path = Path(predicted) / f"{video_id}.txt"
            if pred_path.exists():
                pred = read_label_file(pred_path, vocab)
        return VideoRecord(video_id, gt, feats, pred).validate(vocab.num_classes)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = list(pool.map(load_one, ids))
    logger.info("loaded %d videos from %s (%d classes)", len(records), bundle, vocab.num_classes)
    return vocab, records


def load_split_root(root, split, token_buckets=None, workers=4):
    p = SplitPaths.from_root(root, split)
    return load_split(p.mapping, p.bundle, p.ground_truth, p.features, p.predicted, token_buckets, workers)


def write_split(root, vocab, splits):
    """
    Write a dataset in the standard layout.

    Args:
        root: output directory
        vocab: Vocabulary
        splits: mapping split name -> list of VideoRecord
    """
    root = Path(root)
    for sub in ("groundTruth", "features", "bundles"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_mapping(root / "mapping.txt", vocab)
    for split, records in splits.items():
        (root / "bundles" / f"{split}.txt").write_text("".join(f"{r.id}\n" for r in records), encoding="utf-8")
        for r in records:
            write_label_file(root / "groundTruth" / f"{r.id}.txt", r.gt_labels, vocab)
            write_features(root / "features" / f"{r.id}.feat", r.features)
            if r.predicted_labels is not None:
                (root / "predicted").mkdir(exist_ok=True)
                write_label_file(root / "predicted" / f"{r.id}.txt", r.predicted_labels, vocab)
    logger.info("wrote %s", root)
    return root


# ---------------------------------------------------------------------------
# synthetic grammar
# ---------------------------------------------------------------------------

SYNTH_ACTION_NAMES = (
    "crack_egg", "pour_milk", "stir_dough", "fry_pancake", "cut_bread", "spread_butter",
    "take_plate", "add_salt", "peel_cucumber", "cut_tomato", "mix_dressing", "serve_salad",
    "pour_coffee", "add_sugar", "butter_pan", "take_cup",
)


@dataclass
class SynthGrammar:
    """
    Attributes:
        num_classes: K
        successor: next-class table, a permutation of range(K) forming one cycle
        durations: per-class (min, max) segment length in frames
        seed: generator seed for videos and features
    """

    num_classes: int
    successor: list
    durations: list
    seed: int = 0
    names: list = field(default=None)

    def __post_init__(self):
        if sorted(self.successor) != list(range(self.num_classes)):
            raise InputError("successor table must be a permutation of the classes")
        if len(self.durations) != self.num_classes:
            raise InputError("one duration range per class is required")
        for lo, hi in self.durations:
            if not 1 <= lo <= hi:
                raise InputError(f"bad duration range ({lo}, {hi})")
        if self.names is None:
            self.names = synth_names(self.num_classes)

    @classmethod
    def generate(cls, num_classes, seed=0, min_len=20, max_len=60, fixed=True):
        """A single-cycle permutation and per-class durations drawn once from ``seed``."""
        rng = np.random.default_rng(seed)
        order = rng.permutation(num_classes)
        successor = [0] * num_classes
        for a, b in zip(order, np.roll(order, -1)):
            successor[int(a)] = int(b)
        durations = []
        for _ in range(num_classes):
            lo = int(rng.integers(min_len, max_len + 1))
            durations.append((lo, lo) if fixed else (min_len, max_len))
        return cls(num_classes, successor, durations, seed)

    def vocabulary(self, token_buckets=None):
        kwargs = {} if token_buckets is None else {"token_buckets": token_buckets}
        return Vocabulary(self.names, **kwargs)


def synth_names(num_classes):
    if num_classes <= len(SYNTH_ACTION_NAMES):
        return list(SYNTH_ACTION_NAMES[:num_classes])
    return [f"action_{i}" for i in range(num_classes)]


def class_directions(num_classes, feature_dim, seed):
    """Unit mean direction per class for the synthetic features."""
    rng = np.random.default_rng(seed + 104729)
    dirs = rng.normal(size=(num_classes, feature_dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def synth_corpus(g, videos, frame_range, feature_dim, noise=0.3, prefix="video", offset=0, partial_start=False):
    """
    Deterministic corpus following the grammar's transition table.

    Args:
        g: SynthGrammar
        videos: number of videos
        frame_range: (min T, max T)
        feature_dim: L_D
        noise: std of the Gaussian added to each class direction
        prefix: video id prefix
        offset: index of the first video (keeps ids and streams distinct across splits)
        partial_start: open each video part-way through its first segment instead of
            on a segment boundary

    Returns:
        list of VideoRecord
    """
    lo, hi = frame_range
    if not 1 <= lo <= hi:
        raise InputError(f"bad frame range {frame_range}")
    dirs = class_directions(g.num_classes, feature_dim, g.seed)
    records = []
    for index in range(offset, offset + videos):
        rng = np.random.default_rng([g.seed, index])
        T = int(rng.integers(lo, hi + 1))
        cls = int(rng.integers(g.num_classes))
        lo_d, hi_d = g.durations[cls]
        remaining = int(rng.integers(1 if partial_start else lo_d, hi_d + 1))
        labels = []
        while len(labels) < T:
            labels.extend([cls] * remaining)
            cls = g.successor[cls]
            lo_d, hi_d = g.durations[cls]
            remaining = int(rng.integers(lo_d, hi_d + 1))
        labels = np.asarray(labels[:T], dtype=np.int64)
        feats = dirs[labels] + noise * rng.normal(size=(T, feature_dim))
        records.append(VideoRecord(f"{prefix}_{index:04d}", labels, feats.astype(np.float32)))
    return records
