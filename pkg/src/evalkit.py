#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Decoding query predictions into frame sequences, the mean-over-classes
metric, the α x β evaluation grid and timeline rendering.

Aggregation: MoC is computed per video (classes present in that video's GT
horizon), then averaged over videos for each grid cell.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numba
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.colors import to_hex  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402

from src.config import EVAL_ALPHAS, EVAL_BETAS
from src.datapipe import ObservationSpec, run_length_encode, sample_observation
from src.errors import DimensionError, EmptyObservationError, InputError

logger = logging.getLogger(__name__)

_FLOOR_EPS = 1e-9
AGGREGATION = "classes-within-video, then mean over videos"


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def decode_predictions(class_logits, durations, horizon, none_id=None):
    """
    Expand parallel query predictions into exactly ``horizon`` frame labels.

    Queries are read up to (excluding) the first one whose argmax is None;
    their durations are renormalised (uniform when all are ~0) and segment
    boundaries sit at ⌊cumsum · horizon⌋ with the last forced to ``horizon``.
    If the first query already predicts None, the best non-None class of that
    query fills the whole horizon.
    """
    if horizon < 1:
        raise InputError(f"horizon must be >= 1, got {horizon}")
    class_logits = np.asarray(class_logits, dtype=np.float64)
    if none_id is None:
        none_id = class_logits.shape[1] - 1
    pred = np.argmax(class_logits, axis=1)
    stops = np.flatnonzero(pred == none_id)
    stop = int(stops[0]) if stops.size else len(pred)
    if stop == 0:
        best = int(np.argmax(class_logits[0, :none_id]))
        return np.full(horizon, best, dtype=np.int64)

    classes = pred[:stop]
    d = np.clip(np.asarray(durations, dtype=np.float64)[:stop], 0.0, None)
    total = d.sum()
    d = np.full(stop, 1.0 / stop) if total <= 1e-12 else d / total
    bounds = np.floor(np.cumsum(d) * horizon + _FLOOR_EPS).astype(np.int64)
    bounds = np.maximum.accumulate(np.clip(bounds, 0, horizon))
    bounds[-1] = horizon
    lengths = np.diff(np.concatenate([[0], bounds]))
    return np.repeat(classes, lengths).astype(np.int64)


# ---------------------------------------------------------------------------
# MoC
# ---------------------------------------------------------------------------

@numba.njit(cache=False)
def _class_hits(pred, gt, num_classes):
    totals = np.zeros(num_classes, dtype=np.int64)
    hits = np.zeros(num_classes, dtype=np.int64)
    for i in range(gt.shape[0]):
        totals[gt[i]] += 1
        if pred[i] == gt[i]:
            hits[gt[i]] += 1
    return totals, hits


def moc(pred, gt):
    """Per-class frame accuracy averaged over the classes present in ``gt``."""
    pred = np.ascontiguousarray(pred, dtype=np.int64)
    gt = np.ascontiguousarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise DimensionError(f"moc: prediction length {pred.shape} vs ground truth {gt.shape}")
    if gt.size == 0:
        raise InputError("moc needs at least one frame")
    num_classes = int(max(pred.max(), gt.max())) + 1
    totals, hits = _class_hits(pred, gt, num_classes)
    present = totals > 0
    return float(np.mean(hits[present] / totals[present]))


# ---------------------------------------------------------------------------
# grid evaluation
# ---------------------------------------------------------------------------

@dataclass
class GridJob:
    alphas: tuple = EVAL_ALPHAS
    betas: tuple = EVAL_BETAS
    sample_rate: int = 1
    start: int = 0
    use_predicted: bool = False

    @property
    def decode_beta(self):
        return max(self.betas)


@dataclass
class VideoScore:
    video_id: str
    cells: dict = field(default_factory=dict)
    skipped_alphas: list = field(default_factory=list)
    predictions: dict = field(default_factory=dict)


def _prefix_length(num_frames, observed, alpha, beta):
    end = min(int(math.floor((alpha + beta) * num_frames + _FLOOR_EPS)), num_frames)
    return max(end - observed, 0)


def input_track(record, use_predicted):
    """Label track fed to the text stream: recognizer output when asked for and present, else GT."""
    if use_predicted and record.predicted_labels is not None:
        return record.predicted_labels
    return record.gt_labels


def score_video(model, record, job, keep_predictions=False):
    """Decode once per α at the widest β and score every β as a prefix."""
    score = VideoScore(record.id)
    for alpha in job.alphas:
        decode_beta = min(job.decode_beta, 1.0 - alpha)
        spec = ObservationSpec(alpha, decode_beta, job.sample_rate, job.start)
        try:
            obs = sample_observation(record, spec, input_labels=input_track(record, job.use_predicted))
        except EmptyObservationError as e:
            logger.warning("skipping %s at alpha=%s: %s", record.id, alpha, e)
            score.skipped_alphas.append(alpha)
            continue
        if obs.horizon < 1:
            logger.warning("skipping %s at alpha=%s: empty prediction horizon", record.id, alpha)
            score.skipped_alphas.append(alpha)
            continue
        pack = model.predict(obs.features, obs.input_labels)
        full = decode_predictions(pack.class_logits, pack.durations, obs.horizon, model.vocab.none_id)
        gt_full = record.gt_labels[obs.observed:obs.observed + obs.horizon]
        if keep_predictions:
            score.predictions[alpha] = (full, gt_full)
        for beta in job.betas:
            n = min(_prefix_length(record.num_frames, obs.observed, alpha, beta), obs.horizon)
            if n < 1:
                continue
            score.cells[(alpha, beta)] = moc(full[:n], gt_full[:n])
    return score


@dataclass
class EvalReport:
    alphas: tuple
    betas: tuple
    cells: dict
    counts: dict
    skipped: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def average(self):
        values = [self.cells[k] for k in self._keys() if k in self.cells]
        return float(np.mean(values)) if values else float("nan")

    def row_average(self, alpha):
        values = [self.cells[(alpha, b)] for b in self.betas if (alpha, b) in self.cells]
        return float(np.mean(values)) if values else float("nan")

    def column_average(self, beta):
        values = [self.cells[(a, beta)] for a in self.alphas if (a, beta) in self.cells]
        return float(np.mean(values)) if values else float("nan")

    def _keys(self):
        return [(a, b) for a in self.alphas for b in self.betas]

    @property
    def shape(self):
        return len(self.alphas), len(self.betas)

    def to_table(self, method="ActionLLM", delimiter=" | "):
        """Delimited text mirroring the published tables, values in percent."""
        head0 = ["alpha"] + [f"{a:g}" for a, _ in self._keys()] + [""]
        head1 = ["method"] + [f"{b:g}" for _, b in self._keys()] + ["Average"]
        row = [method] + [_pct(self.cells.get(k)) for k in self._keys()] + [_pct(self.average)]
        return "\n".join(delimiter.join(r).rstrip() for r in (head0, head1, row)) + "\n"

    def to_key_values(self):
        lines = [f"moc.alpha={a:g}.beta={b:g}={self.cells[(a, b)]:.6f}" for a, b in self._keys() if (a, b) in self.cells]
        lines += [f"videos.alpha={a:g}.beta={b:g}={self.counts.get((a, b), 0)}" for a, b in self._keys()]
        lines.append(f"moc.average={self.average:.6f}")
        lines.append(f"skipped={self.skipped}")
        lines += [f"{k}={v}" for k, v in sorted(self.metadata.items())]
        return "\n".join(lines) + "\n"

    def write(self, path, method="ActionLLM"):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_table(method) + "\n" + self.to_key_values(), encoding="utf-8")
        return path


def _pct(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{100.0 * value:.2f}"


def reduce_scores(scores, job, metadata=None):
    """Single-owner reduction of per-video scores into an EvalReport."""
    sums, counts = {}, {}
    skipped = 0
    for s in scores:
        skipped += len(s.skipped_alphas)
        for key, value in s.cells.items():
            sums[key] = sums.get(key, 0.0) + value
            counts[key] = counts.get(key, 0) + 1
    cells = {k: sums[k] / counts[k] for k in sums}
    meta = {"aggregation": AGGREGATION, "videos": len(scores)}
    meta.update(metadata or {})
    return EvalReport(tuple(job.alphas), tuple(job.betas), cells, counts, skipped, meta)


def evaluate_grid(model, records, alphas=EVAL_ALPHAS, betas=EVAL_BETAS, sample_rate=1,
                  backend=None, metadata=None, use_predicted=False):
    """
    Args:
        model: trained ActionLLM
        records: evaluation VideoRecords
        alphas: observation ratios
        betas: prediction ratios (decoded once at the largest, scored as prefixes)
        sample_rate: μ₀ of the dataset preset (start frame 0)
        backend: an EvalBackend; serial when omitted
        metadata: extra key=value pairs (config hash, seed, split)
        use_predicted: feed recognizer output to the text stream where a video has it

    Returns:
        EvalReport
    """
    job = GridJob(tuple(alphas), tuple(betas), sample_rate, 0, use_predicted)
    owned = backend is None
    if owned:
        from src.backends import get_backend
        backend = get_backend("serial")
        backend.init()
    try:
        scores = backend.score_videos(model, records, job)
    finally:
        if owned:
            backend.cleanup()
    report = reduce_scores(scores, job, metadata)
    logger.info("evaluated %d videos, average MoC %.4f (%d skipped)", len(records), report.average, report.skipped)
    return report


# ---------------------------------------------------------------------------
# timelines
# ---------------------------------------------------------------------------

_TRACKS = ("gt", "pred")
_SVG_SALT = "actionllm-timeline"


def class_color(class_id):
    cmap = matplotlib.colormaps["tab20"]
    return to_hex(cmap(int(class_id) % cmap.N))


def _segments_with_bounds(track):
    out, start = [], 0
    for cls, length in run_length_encode(track):
        out.append((cls, start, start + length))
        start += length
    return out


def _draw_timeline(tracks, num_frames, name, svg_path):
    with plt.rc_context({"svg.hashsalt": _SVG_SALT}):
        fig, ax = plt.subplots(1, 1, figsize=(max(4.0, num_frames / 25.0), 1.2 + 0.5 * len(tracks)))
        try:
            seen = {}
            for row, (label, segs) in enumerate(tracks):
                ax.broken_barh(
                    [(s, e - s) for _, s, e in segs],
                    (row + 0.1, 0.8),
                    facecolors=[class_color(c) for c, _, _ in segs],
                    gid=f"track-{label}",
                )
                for c, _, _ in segs:
                    seen.setdefault(c, class_color(c))
            ax.set_xlim(0, num_frames)
            ax.set_ylim(0, len(tracks))
            ax.set_yticks([row + 0.5 for row in range(len(tracks))])
            ax.set_yticklabels([label for label, _ in tracks])
            ax.invert_yaxis()
            ax.set_xlabel("frame")
            handles = [Patch(facecolor=color, label=name(c)) for c, color in sorted(seen.items())]
            ax.legend(handles=handles, loc="upper left", bbox_to_anchor=(1.0, 1.0), fontsize="small", frameon=False)
            fig.tight_layout()
            fig.savefig(svg_path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)


def emit_timeline(pred, gt, path, vocab=None):
    """
    Write ``<path>.txt`` (one line per track of (class, start, end)) and
    ``<path>.svg`` (one broken bar per track, coloured by class).

    Returns:
        (text path, svg path)
    """
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise DimensionError(f"timeline tracks differ in length: {pred.shape} vs {gt.shape}")
    name = (lambda c: vocab.name_of(c)) if vocab is not None else str
    tracks = [(label, _segments_with_bounds(track)) for label, track in zip(_TRACKS, (gt, pred))]

    base = Path(path)
    if base.suffix in (".txt", ".svg"):
        base = base.with_suffix("")
    txt_path = base.with_name(base.name + ".txt")
    svg_path = base.with_name(base.name + ".svg")

    lines = [label + "\t" + " ".join(f"({name(c)},{s},{e})" for c, s, e in segs) for label, segs in tracks]
    try:
        txt_path.parent.mkdir(parents=True, exist_ok=True)
        txt_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        _draw_timeline(tracks, len(gt), name, svg_path)
    except OSError as e:
        raise InputError(f"cannot write timeline to {base}: {e}") from e
    return txt_path, svg_path
