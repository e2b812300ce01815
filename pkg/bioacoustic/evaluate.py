"""
Event-based precision / recall / F-measure.

Only POS events of a file's target class are references. With
``skip_support`` the support events and everything before the end of the
last support event are left out of scoring, for references and predictions
alike. Predictions that match an UNK event are neither TP nor FP.
"""

import csv
import logging
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .audio_io import load_events, parse_detections, support_cutoff, target_class
from .exceptions import DataError, EvaluationError
from .postproc import iou_1d

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ('subset', 'TP', 'FP', 'FN', 'precision', 'recall', 'f1')
OVERALL = 'overall'


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list = field(default_factory=list)


def _interval(event):
    return (event.onset, event.offset) if hasattr(event, 'onset') else (event.onset_s, event.offset_s)


def _onset(event):
    return _interval(event)[0]


def match_events(pred, ref, min_iou=0.3, method='greedy'):
    """One-to-one matching of predictions to references at IoU >= ``min_iou``.

    ``greedy`` takes references in onset order and gives each the earliest
    unmatched eligible prediction; ``optimal`` maximises the number of
    matches. ``pairs`` holds (pred index, ref index) into the onset-sorted lists.
    """
    pred = sorted(pred, key=_onset)
    ref = sorted(ref, key=_onset)
    eligible = np.zeros((len(pred), len(ref)), dtype=bool)
    for i, p in enumerate(pred):
        for j, r in enumerate(ref):
            eligible[i, j] = iou_1d(_interval(p), _interval(r)) >= min_iou
    if method == 'optimal':
        if eligible.size:
            rows, cols = linear_sum_assignment(-eligible.astype(np.float64))
            pairs = sorted((int(i), int(j)) for i, j in zip(rows, cols) if eligible[i, j])
        else:
            pairs = []
    elif method == 'greedy':
        used, pairs = set(), []
        for j in range(len(ref)):
            for i in range(len(pred)):
                if i not in used and eligible[i, j]:
                    used.add(i)
                    pairs.append((i, j))
                    break
    else:
        raise EvaluationError(f'unknown matching method {method!r}')
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(pred) - tp, fn=len(ref) - tp, pairs=pairs)


def prf(tp, fp, fn):
    """Precision, recall and F1 in percent; a zero denominator gives 0."""
    precision = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    recall = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    @property
    def scores(self):
        return prf(self.tp, self.fp, self.fn)


@dataclass
class EvalReport:
    per_file: dict = field(default_factory=OrderedDict)
    subsets: dict = field(default_factory=dict)

    @property
    def per_subset(self):
        pooled = defaultdict(Counts)
        for file_id, counts in self.per_file.items():
            pooled[self.subsets.get(file_id, '')].add(counts)
        return OrderedDict(sorted(pooled.items()))

    @property
    def total(self):
        pooled = Counts()
        for counts in self.per_file.values():
            pooled.add(counts)
        return pooled

    def rows(self):
        rows = []
        for subset, counts in list(self.per_subset.items()) + [(OVERALL, self.total)]:
            p, r, f = counts.scores
            rows.append((subset, counts.tp, counts.fp, counts.fn, round(p, 2), round(r, 2), round(f, 2)))
        return rows

    def format_table(self):
        lines = [f'{"subset":<12}{"TP":>7}{"FP":>7}{"FN":>7}{"P(%)":>9}{"R(%)":>9}{"F1(%)":>9}']
        for subset, tp, fp, fn, p, r, f in self.rows():
            lines.append(f'{subset:<12}{tp:>7}{fp:>7}{fn:>7}{p:>9.2f}{r:>9.2f}{f:>9.2f}')
        return '\n'.join(lines)

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('w', newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(REPORT_COLUMNS)
            for subset, tp, fp, fn, p, r, f in self.rows():
                writer.writerow([subset, tp, fp, fn, f'{p:.2f}', f'{r:.2f}', f'{f:.2f}'])


def score_file(pred, events, cfg, n_support=5):
    """Counts for one file's predictions against its annotation events.

    Predictions that straddle the support cutoff are scored from the cutoff on.
    """
    class_name = target_class(events)
    cutoff = support_cutoff(events, class_name, n_support) if cfg.skip_support else float('-inf')
    ref = [e for e in events if e.label == 'POS' and e.class_name == class_name and e.onset_s >= cutoff]
    unknown = [e for e in events if e.label == 'UNK' and e.class_name == class_name and e.onset_s >= cutoff]
    pred = sorted((replace(p, onset=max(p.onset, cutoff)) for p in pred if p.offset > cutoff), key=_onset)
    result = match_events(pred, ref, cfg.min_iou, cfg.matching)
    matched = {i for i, _ in result.pairs}
    leftover = [p for i, p in enumerate(pred) if i not in matched]
    ignored = match_events(leftover, unknown, cfg.min_iou, cfg.matching).tp if unknown else 0
    return Counts(tp=result.tp, fp=result.fp - ignored, fn=result.fn)


def evaluate_run(pred_csv, ref_manifest, cfg, n_support=5):
    """Micro-averaged report of a detection CSV against an annotated manifest."""
    predictions = parse_detections(pred_csv)
    entries = {e.file_id: e for e in ref_manifest.entries if e.annotation_path is not None}
    unknown = sorted({p.file_id for p in predictions} - set(entries))
    if unknown:
        raise EvaluationError(f'predictions for files missing from the references: {", ".join(unknown)}')
    by_file = defaultdict(list)
    for p in predictions:
        by_file[p.file_id].append(p)
    report = EvalReport()
    for file_id in sorted(entries):
        entry = entries[file_id]
        try:
            counts = score_file(by_file.get(file_id, []), load_events(entry), cfg, n_support)
        except DataError as exc:
            logger.warning('%s: not scored (%s)', file_id, exc)
            continue
        report.per_file[file_id] = counts
        report.subsets[file_id] = entry.subset
        logger.debug('%s: TP=%d FP=%d FN=%d', file_id, counts.tp, counts.fp, counts.fn)
    p, r, f = report.total.scores
    logger.info('evaluated %d file(s): P=%.2f R=%.2f F1=%.2f', len(report.per_file), p, r, f)
    return report
