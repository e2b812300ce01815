"""
Probability curve -> event intervals.

Chain: smooth -> median filter -> adjusted threshold -> binarize ->
change points -> score -> merge runs of events -> re-extract -> NMS ->
minimum length -> seconds. Intervals are half-open frame ranges
[start, end) until ``frames_to_seconds``.
"""

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .audio_io import EventInterval
from .exceptions import DataError

logger = logging.getLogger(__name__)


@dataclass
class ProbCurve:
    probs: np.ndarray
    frame_rate: float
    file_id: str = ''
    offset_s: float = 0.0

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1:
            raise DataError(f'probability curve must be 1-D, got shape {probs.shape}')
        if probs.size and (not np.all(np.isfinite(probs)) or probs.min() < -1e-9 or probs.max() > 1 + 1e-9):
            raise DataError(f'{self.file_id}: probabilities outside [0, 1]')
        self.probs = np.clip(probs, 0.0, 1.0)

    def __len__(self):
        return self.probs.size

    def with_probs(self, probs):
        return replace(self, probs=probs)


def smooth(curve, window=5):
    """Centered moving average; windows shrink at the edges."""
    p = curve.probs
    if window <= 1 or p.size == 0:
        return curve.with_probs(p.copy())
    half = window // 2
    kernel = np.ones(window)
    start = window - 1 - half
    sums = np.convolve(p, kernel)[start:start + p.size]
    counts = np.convolve(np.ones(p.size), kernel)[start:start + p.size]
    return curve.with_probs(np.clip(sums / counts, 0.0, 1.0))


def median_filter(curve, k=3):
    if k % 2 == 0:
        raise DataError(f'median filter size must be odd, got {k}')
    if curve.probs.size == 0:
        return curve.with_probs(curve.probs.copy())
    return curve.with_probs(ndimage.median_filter(curve.probs, size=k, mode='nearest'))


def adjust_threshold(t, delta=0.05, floor=0.5):
    return max(round(t - delta, 12), floor)


def binarize(curve, threshold):
    return (curve.probs > threshold).astype(np.int8)


def change_points(binary):
    """Runs of ones as [start, end) pairs, found from the +1/-1 edges of the padded sequence."""
    b = np.asarray(binary, dtype=np.int8)
    edges = np.diff(np.concatenate([[0], b, [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [(int(s), int(e)) for s, e in zip(starts, ends)]


def iou_1d(a, b):
    """IoU of two (onset, offset) intervals; 0 when the union is empty."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def score_events(curve, intervals):
    return [
        EventInterval(file_id=curve.file_id, onset=start, offset=end, score=float(curve.probs[start:end].mean()))
        for start, end in intervals
        if end > start
    ]


def nms(events, iou=0.7):
    """Greedy suppression by score; ties go to the earlier, then the longer event. Output sorted by onset."""
    order = sorted(events, key=lambda e: (-e.score, e.onset, -(e.offset - e.onset)))
    kept = []
    for event in order:
        if all(iou_1d((event.onset, event.offset), (k.onset, k.offset)) <= iou for k in kept):
            kept.append(event)
    return sorted(kept, key=lambda e: (e.onset, e.offset))


def merge_runs(curve, events, mfl_frames, gap_frames=87, min_prob=0.5, length_factor=2.0):
    """Spans [first onset, last offset) of consecutive events that qualify for merging.

    Applies only when the mean event length exceeds ``length_factor * mfl_frames``;
    a run links events whose gap is shorter than ``gap_frames`` and qualifies when
    the mean probability over its whole span exceeds ``min_prob``.
    """
    events = sorted(events, key=lambda e: e.onset)
    if len(events) < 2:
        return []
    mean_length = float(np.mean([e.offset - e.onset for e in events]))
    if not mean_length > length_factor * mfl_frames:
        return []
    runs, current = [], [events[0]]
    for prev, nxt in zip(events, events[1:]):
        if nxt.onset - prev.offset < gap_frames:
            current.append(nxt)
        else:
            runs.append(current)
            current = [nxt]
    runs.append(current)
    spans = []
    for run in runs:
        if len(run) < 2:
            continue
        start, end = int(run[0].onset), int(run[-1].offset)
        if curve.probs[start:end].mean() > min_prob:
            spans.append((start, end))
    return spans


def merge_short_events(curve, events, cfg, mfl_frames):
    spans = merge_runs(curve, events, mfl_frames, cfg.merge_gap_frames, cfg.merge_prob, cfg.merge_length_factor)
    if not spans:
        return curve
    probs = curve.probs.copy()
    for start, end in spans:
        probs[start:end] = 1.0
    logger.debug('%s: merged %d run(s) of events', curve.file_id, len(spans))
    return curve.with_probs(probs)


def min_length_filter(events, mfl_frames):
    return [e for e in events if e.offset - e.onset >= mfl_frames]


def derive_mfl(support_events, frame_rate, cfg):
    """Minimum event length in frames: the configured value, else a fraction of the shortest support event."""
    if cfg.mfl_frames is not None:
        return cfg.mfl_frames
    durations = [e.offset_s - e.onset_s for e in support_events]
    if not durations:
        return cfg.mfl_min_frames
    shortest = min(durations) * frame_rate
    return max(cfg.mfl_min_frames, int(math.floor(cfg.mfl_support_fraction * shortest)))


def frames_to_seconds(event, frame_rate, offset_s=0.0):
    if frame_rate <= 0:
        raise DataError(f'frame rate must be positive, got {frame_rate}')
    return replace(event, onset=event.onset / frame_rate + offset_s, offset=event.offset / frame_rate + offset_s)


def run_pipeline(curve, cfg, mfl_frames=None, threshold=None, class_name=''):
    """Full post-processing of one curve into events in seconds, sorted by onset.

    ``threshold`` replaces ``cfg.base_threshold`` before adjustment.
    """
    mfl = mfl_frames or cfg.mfl_frames or cfg.mfl_min_frames
    t = adjust_threshold(cfg.base_threshold if threshold is None else threshold,
                         cfg.threshold_delta, cfg.threshold_floor)
    if cfg.smooth_first:
        work = median_filter(smooth(curve, cfg.smooth_window), cfg.median_kernel)
        binary = binarize(work, t)
    else:
        work = curve
        raw = curve.with_probs(binarize(curve, t).astype(np.float64))
        binary = binarize(median_filter(smooth(raw, cfg.smooth_window), cfg.median_kernel), 0.5)
    events = score_events(work, change_points(binary))
    merged = merge_short_events(work, events, cfg, mfl)
    if merged is not work:
        binary = np.where(merged.probs != work.probs, 1, binary).astype(np.int8)
        work = merged
        events = score_events(work, change_points(binary))
    events = min_length_filter(nms(events, cfg.nms_iou), mfl)
    logger.debug('%s: %d event(s) at threshold %.3f, mfl %d', curve.file_id, len(events), t, mfl)
    return [
        replace(frames_to_seconds(e, curve.frame_rate, curve.offset_s), class_name=class_name)
        for e in events
    ]
