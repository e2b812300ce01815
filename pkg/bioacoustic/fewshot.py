"""
Few-shot training and inference.

Training samples episodes of ``n_classes`` classes from a TrainingCorpus,
relabels them 1..n (0 = background) and takes one Adam step on l1 + l2.
Inference builds class prototypes from the support frames of a file and
optionally refines the decision with a binary SED head fitted with
pseudo-label cycles, or with an FBC head fitted through the transferred
encoder on a POS-center token.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .audio_io import target_class
from .augment import masked_view, noisy_view
from .exceptions import EpisodeError, ShapeError, TrainingDivergedError
from .features import BACKGROUND, event_frame_range, frame_labels, frame_windows, stitch_windows
from .layers import Linear, softmax
from .losses import masked_cross_entropy
from .optim import Adam
from .params import ModelParams
from .seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)


@dataclass
class CorpusFile:
    file_id: str
    features: object
    events: list
    subset: str = ''


class TrainingCorpus:
    """Windowed, labelled training files with an index of the windows holding each class."""

    def __init__(self, files, window_frames=431, window_shift=86):
        self.files = sorted(files, key=lambda f: f.file_id)
        self.window_frames = window_frames
        self.window_shift = window_shift
        self.class_names = sorted({e.class_name for f in self.files for e in f.events if e.label == 'POS'})
        self.class_index = {name: i + 1 for i, name in enumerate(self.class_names)}
        self.batches = [
            frame_windows(f.features, f.events, self.class_index, window_frames, window_shift) for f in self.files
        ]
        self.by_class = {name: [] for name in self.class_names}
        for fi, batch in enumerate(self.batches):
            for wi in range(len(batch)):
                present = np.unique(batch.frame_labels[wi][batch.masks[wi] > 0])
                for class_id in present[present != BACKGROUND]:
                    self.by_class[self.class_names[class_id - 1]].append((fi, wi))

    def extended(self, files):
        return TrainingCorpus(self.files + list(files), self.window_frames, self.window_shift)

    def window(self, ref):
        fi, wi = ref
        batch = self.batches[fi]
        return batch.windows[wi], batch.frame_labels[wi], batch.masks[wi]

    @property
    def n_bins(self):
        return self.files[0].features.n_bins


@dataclass
class Episode:
    support_windows: np.ndarray
    support_labels: np.ndarray
    support_fg_labels: np.ndarray
    mask: np.ndarray
    query_windows: np.ndarray
    query_labels: np.ndarray
    query_mask: np.ndarray
    class_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.mask.sum() <= 0:
            raise EpisodeError('episode has no unmasked support frames')
        if self.support_labels.min() < 0 or self.support_labels.max() > self.n_classes:
            raise EpisodeError(f'support labels outside [0, {self.n_classes}]')

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def n_frames(self):
        return int(self.mask.sum())


@dataclass
class PrototypeMatrix:
    W: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.W)):
            raise EpisodeError('prototype matrix has non-finite rows')


@dataclass
class SupportSet:
    """Support of one file: labels cover the annotated region up to the last support offset."""

    events: list
    labels: np.ndarray
    mask: np.ndarray
    query_start: int
    frame_rate: float
    class_name: str = ''


@dataclass
class SupportSplit:
    support1: list
    support2: list


@dataclass
class EpisodeLoss:
    l1: float
    l2: float
    total: float
    query_accuracy: Optional[float] = None


def _relabel(labels, mask, local):
    out = np.zeros_like(labels)
    keep = mask.copy()
    for class_id in np.unique(labels):
        if class_id == BACKGROUND:
            continue
        if class_id in local:
            out[labels == class_id] = local[class_id]
        else:
            keep[labels == class_id] = 0.0
    return out, keep


def build_episode(corpus, n_classes, seed, windows_per_class=2, queries_per_class=1):
    """Sample ``n_classes`` classes and their windows; labels of unsampled classes are masked out."""
    eligible = [name for name in corpus.class_names if corpus.by_class[name]]
    if len(eligible) < n_classes:
        raise EpisodeError(f'episode needs {n_classes} classes with POS events, corpus has {len(eligible)}')
    rng = derive_rng(seed, 'episode')
    chosen = sorted(str(name) for name in rng.choice(eligible, size=n_classes, replace=False))
    local = {corpus.class_index[name]: j + 1 for j, name in enumerate(chosen)}
    support, query = [], []
    for name in chosen:
        refs = corpus.by_class[name]
        order = rng.permutation(len(refs))
        support += [refs[i] for i in order[:windows_per_class]]
        query += [refs[i] for i in order[windows_per_class:windows_per_class + queries_per_class]]

    def stack(refs):
        win, n_bins = corpus.window_frames, corpus.n_bins
        if not refs:
            return np.zeros((0, win, n_bins)), np.zeros((0, win), dtype=np.int64), np.zeros((0, win))
        windows, labels, masks = [], [], []
        for ref in refs:
            window, label, mask = corpus.window(ref)
            label, mask = _relabel(label, mask, local)
            windows.append(window)
            labels.append(label)
            masks.append(mask)
        return np.stack(windows), np.stack(labels), np.stack(masks)

    s_windows, s_labels, s_mask = stack(support)
    q_windows, q_labels, q_mask = stack(query)
    return Episode(
        support_windows=s_windows,
        support_labels=s_labels,
        support_fg_labels=(s_labels != BACKGROUND).astype(np.int64),
        mask=s_mask,
        query_windows=q_windows,
        query_labels=q_labels,
        query_mask=q_mask,
        class_names=chosen,
    )


def loss_l1(sed_logits, Y, M):
    """Masked multi-class CE over background + classes; returns (loss, grad_logits)."""
    return masked_cross_entropy(sed_logits, Y, M)


def loss_l2(fbc_logits, A, M):
    """Masked foreground/background CE; an empty mask gives (0.0, zero gradient)."""
    if np.asarray(M).sum() <= 0:
        return 0.0, np.zeros_like(fbc_logits)
    return masked_cross_entropy(fbc_logits, A, M)


def loss_total(l1, l2):
    total = l1 + l2
    if not np.isfinite(total):
        raise TrainingDivergedError(f'non-finite loss: l1={l1}, l2={l2}')
    return total


def compute_W(frame_embeddings, Y, M, n_rows=None):
    """Row j is the mean embedding of the unmasked frames labelled j."""
    d = frame_embeddings.shape[-1]
    E = np.asarray(frame_embeddings, dtype=np.float64).reshape(-1, d)
    y = np.asarray(Y).reshape(-1)
    keep = np.asarray(M).reshape(-1) > 0
    if E.shape[0] != y.size or y.size != keep.size:
        raise ShapeError('compute_W', (E.shape[0],), (y.shape, keep.shape))
    if n_rows is None:
        n_rows = int(y[keep].max()) + 1 if keep.any() else 0
    W = np.zeros((n_rows, d))
    for j in range(n_rows):
        sel = keep & (y == j)
        if not sel.any():
            raise EpisodeError(f'class {j} has no unmasked support frames')
        W[j] = E[sel].mean(axis=0)
    return PrototypeMatrix(W)


def predict_query(query_embeddings, W):
    W = W.W if isinstance(W, PrototypeMatrix) else np.asarray(W)
    if query_embeddings.shape[-1] != W.shape[1]:
        raise ShapeError('predict_query', f'(..., {W.shape[1]})', query_embeddings.shape)
    return softmax(np.asarray(query_embeddings, dtype=np.float64) @ W.T)


def _query_accuracy(model, params, episode):
    if len(episode.query_windows) == 0 or episode.query_mask.sum() == 0:
        return None
    support = model.embed(params, episode.support_windows)
    try:
        W = compute_W(support, episode.support_labels, episode.mask, episode.n_classes + 1)
    except EpisodeError:
        return None
    pred = predict_query(model.embed(params, episode.query_windows), W).argmax(axis=-1)
    keep = episode.query_mask > 0
    return float((pred[keep] == episode.query_labels[keep]).mean())


def train_episode(model, params, episode, optimizer, augment_cfg=None, seed=0, monitor=False):
    """One Adam step on l_total. Params are left untouched when the loss or a gradient is non-finite."""
    dtype = params[model.cnn.blocks[0].layers[0].name + '.weight'].dtype
    windows = episode.support_windows.astype(dtype)
    if augment_cfg is None:
        plain, masked = windows, windows.copy()
    else:
        plain = np.stack([
            noisy_view(w, augment_cfg, derive_seed(seed, 'plain', i)) for i, w in enumerate(windows)
        ])
        masked = np.stack([
            masked_view(w, augment_cfg, derive_seed(seed, 'masked', i)) for i, w in enumerate(plain)
        ])
    (sed_logits, fbc_logits, _), cache = model.forward_multitask(params, plain, masked, 'train')
    l1, g1 = loss_l1(sed_logits, episode.support_labels, episode.mask)
    l2, g2 = loss_l2(fbc_logits, episode.support_fg_labels, episode.mask)
    total = loss_total(l1, l2)
    _, grads = model.backward(cache, (g1.astype(dtype), g2.astype(dtype), None))
    bad = sorted(name for name, g in grads.items() if not np.all(np.isfinite(g)))
    if bad:
        raise TrainingDivergedError(f'non-finite gradients in {", ".join(bad)} (l1={l1:.4f}, l2={l2:.4f})')
    optimizer.step(params, grads)
    accuracy = _query_accuracy(model, params, episode) if monitor else None
    return EpisodeLoss(l1=l1, l2=l2, total=total, query_accuracy=accuracy)


def split_supports(support_events):
    """Alternate support events by onset: 1st, 3rd, 5th... to Support1, the rest to Support2."""
    events = sorted(support_events, key=lambda e: (e.onset_s, e.offset_s))
    if len(events) < 2:
        raise EpisodeError(f'splitting supports needs >= 2 POS events, got {len(events)}')
    return SupportSplit(support1=events[0::2], support2=events[1::2])


def build_support_set(events, n_frames, frame_rate, n_support=5, class_name=None):
    """Frame labels for the first ``n_support`` POS events of the target class.

    The mask covers frames up to the last support offset; UNK events inside
    that region are masked as usual.
    """
    class_name = class_name or target_class(events)
    pos = sorted((e for e in events if e.label == 'POS' and e.class_name == class_name), key=lambda e: e.onset_s)
    if not pos:
        raise EpisodeError(f'no POS events of class {class_name}')
    support = pos[:n_support]
    if len(support) < n_support:
        logger.warning('only %d support event(s) of %s available', len(support), class_name)
    end = min(event_frame_range(support[-1].onset_s, support[-1].offset_s, frame_rate)[1], n_frames)
    region = [e for e in events if e.onset_s < support[-1].offset_s and (e.label != 'POS' or e in support)]
    labels, mask = frame_labels(n_frames, frame_rate, region, {class_name: 1})
    mask[end:] = 0.0
    return SupportSet(events=support, labels=labels, mask=mask, query_start=end, frame_rate=frame_rate,
                      class_name=class_name)


class BinaryHead:
    """Logistic (2-way softmax) classifier over frozen frame embeddings."""

    def __init__(self, dim, seed=0):
        self.layer = Linear('head', dim, 2)
        self.params = ModelParams(seed=seed)
        self.layer.init(self.params, derive_rng(seed, 'binary_head'), np.float64)

    def fit(self, X, y, steps=300, lr=0.05):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        n_pos = int((y == 1).sum())
        n_neg = y.size - n_pos
        if n_pos and n_neg:
            weights = np.where(y == 1, 0.5 / n_pos, 0.5 / n_neg) * y.size
        else:
            weights = np.ones(y.size)
        optimizer = Adam(lr=lr)
        for _ in range(steps):
            logits, cache = self.layer.forward(self.params, X)
            _, grad = masked_cross_entropy(logits, y, weights)
            _, grads = self.layer.backward(cache, grad)
            optimizer.step(self.params, grads)
        return self

    def probabilities(self, X):
        logits, _ = self.layer.forward(self.params, np.asarray(X, dtype=np.float64), 'eval')
        return softmax(logits)[..., 1]


def fit_binary_head(X, y, steps=300, lr=0.05, seed=0):
    return BinaryHead(X.shape[-1], seed).fit(X, y, steps, lr)


def select_pseudo_labels(probs, hi=0.85, lo=0.15):
    """Indices of confident frames and their labels (1 above ``hi``, 0 below ``lo``)."""
    probs = np.asarray(probs)
    index = np.flatnonzero((probs > hi) | (probs < lo))
    return index, (probs[index] > hi).astype(np.int64)


def finetune_sed(embeddings, support, query_embeddings, cfg, seed=0):
    """Fit a binary head on the support frames, then refit ``n_cycles`` times with query pseudo-labels.

    Returns (head, pseudo-label counts per cycle).
    """
    keep = support.mask > 0
    X_s = np.asarray(embeddings, dtype=np.float64)[keep]
    y_s = support.labels[keep].astype(np.int64)
    if not np.any(y_s == 1):
        raise EpisodeError('no POS frames in the supports')
    head = fit_binary_head(X_s, y_s, cfg.head_steps, cfg.head_lr, seed)
    history = []
    for cycle in range(cfg.n_cycles):
        index, pseudo = select_pseudo_labels(head.probabilities(query_embeddings), cfg.pseudo_hi, cfg.pseudo_lo)
        X = np.concatenate([X_s, np.asarray(query_embeddings, dtype=np.float64)[index]])
        head = fit_binary_head(X, np.concatenate([y_s, pseudo]), cfg.head_steps, cfg.head_lr, seed)
        history.append(len(index))
        logger.debug('sed cycle %d: %d pseudo-labelled frames (%d POS)', cycle + 1, len(index), int(pseudo.sum()))
    return head, history


def pos_center(embeddings, pos_mask):
    """Mean embedding over frames where ``pos_mask`` is set."""
    mask = np.asarray(pos_mask, dtype=np.float64)
    total = mask.sum()
    if total <= 0:
        raise EpisodeError('no POS frames to average')
    E = np.asarray(embeddings, dtype=np.float64)
    return (E * mask[..., None]).reshape(-1, E.shape[-1]).sum(axis=0) / total


def _event_frames(events, frame_rate, n_frames):
    ranges = []
    for event in events:
        start, end = event_frame_range(event.onset_s, event.offset_s, frame_rate)
        ranges.append((max(start, 0), min(end, n_frames)))
    return ranges


def _frames_in(origin, win, ranges):
    return [i for i, (start, end) in enumerate(ranges) if start < origin + win and end > origin]


@dataclass
class SfbcHead:
    center: np.ndarray
    head: BinaryHead
    n_blocks: int = 1

    def tokens(self, model, params, windows):
        light = model.embed(params, windows, n_blocks=self.n_blocks)
        token = np.broadcast_to(self.center.astype(light.dtype), (light.shape[0], 1, light.shape[2]))
        return model.encode(params, np.concatenate([token, light], axis=1))[:, 1:]

    def foreground_probabilities(self, model, params, batch, n_frames):
        fg = self.head.probabilities(self.tokens(model, params, batch.windows))
        return stitch_windows(fg, batch.window_origin, n_frames)


def finetune_sfbc(model, params, batch, support, split, cfg, seed=0, n_blocks=1):
    """FBC head on a POS-center token through the transferred encoder.

    ``batch`` holds the file's windows. The POS center is the mean lightweight
    embedding (first ``n_blocks`` CNN blocks) of the Support1 POS frames inside
    windows that hold two or more Support1 events. Support2 windows, prefixed
    with that token, are encoded and a binary head is fitted on the
    support-region frames. Returns None, leaving the model untouched, when no
    window qualifies.
    """
    n_frames = support.labels.size
    win = batch.windows.shape[1]
    ranges1 = _event_frames(split.support1, support.frame_rate, n_frames)
    ranges2 = _event_frames(split.support2, support.frame_rate, n_frames)
    multi = [i for i, o in enumerate(batch.window_origin) if len(_frames_in(o, win, ranges1)) >= 2]
    if not multi:
        logger.warning('no Support1 window holds two POS events; skipping SFBC fine-tuning')
        return None
    light = model.embed(params, batch.windows[multi], n_blocks=n_blocks)
    pos_mask = np.zeros(light.shape[:2])
    for k, i in enumerate(multi):
        origin = int(batch.window_origin[i])
        for start, end in ranges1:
            lo, hi = max(start - origin, 0), min(end - origin, win)
            if hi > lo:
                pos_mask[k, lo:hi] = 1.0
    center = pos_center(light, pos_mask)

    chosen = [i for i, o in enumerate(batch.window_origin) if _frames_in(o, win, ranges2)]
    if not chosen:
        logger.warning('no window holds a Support2 event; skipping SFBC fine-tuning')
        return None
    sfbc = SfbcHead(center=center, head=None, n_blocks=n_blocks)
    encoded = sfbc.tokens(model, params, batch.windows[chosen])
    X, y = [], []
    for k, i in enumerate(chosen):
        origin = int(batch.window_origin[i])
        end = min(origin + win, n_frames)
        keep = support.mask[origin:end] > 0
        X.append(encoded[k, :end - origin][keep])
        y.append(support.labels[origin:end][keep])
    X, y = np.concatenate(X), np.concatenate(y).astype(np.int64)
    if not np.any(y == 1):
        logger.warning('Support2 windows have no POS frames; skipping SFBC fine-tuning')
        return None
    sfbc.head = fit_binary_head(X, y, cfg.head_steps, cfg.head_lr, seed)
    return sfbc
