"""
Glue shared by the management commands: the feature cache, corpus loading,
training loop, model files and per-file detection.
"""

import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from tqdm import tqdm

from .audio_io import load_audio, load_events, target_class, write_annotations
from .augment import pseudo_label_enhance
from .config import load_run_config, write_config
from .exceptions import DataError, EpisodeError, ParamFileError
from .features import extract_features, frame_windows, load_features, save_features, stitch_windows
from .fewshot import (
    CorpusFile,
    TrainingCorpus,
    build_episode,
    build_support_set,
    compute_W,
    finetune_sed,
    finetune_sfbc,
    predict_query,
    split_supports,
    train_episode,
)
from .model import MultiTaskModel
from .optim import Adam
from .params import load_params, save_params
from .postproc import ProbCurve, derive_mfl, run_pipeline
from .seeding import derive_seed

logger = logging.getLogger(__name__)

CACHE_SUFFIX = '.fsbf'


def feature_key(audio_path, feature_cfg):
    """Content hash of the audio bytes and every feature setting."""
    digest = hashlib.sha256(Path(audio_path).read_bytes())
    digest.update(json.dumps(feature_cfg.model_dump(), sort_keys=True).encode('utf-8'))
    return digest.hexdigest()[:16]


def cache_path(cache_dir, audio_path, feature_cfg):
    return Path(cache_dir) / f'{Path(audio_path).stem}-{feature_key(audio_path, feature_cfg)}{CACHE_SUFFIX}'


def featurize_file(audio_path, feature_cfg, cache_dir):
    """Write the cached feature matrix unless an up-to-date one exists. Returns (path, written)."""
    target = cache_path(cache_dir, audio_path, feature_cfg)
    if target.is_file():
        return target, False
    feat = extract_features(load_audio(audio_path, feature_cfg.sample_rate), feature_cfg)
    save_features(feat, target)
    return target, True


def features_for(audio_path, feature_cfg, cache_dir=None):
    if cache_dir is not None:
        cached = cache_path(cache_dir, audio_path, feature_cfg)
        if cached.is_file():
            logger.debug('using cached features %s', cached.name)
            return load_features(cached)
    return extract_features(load_audio(audio_path, feature_cfg.sample_rate), feature_cfg)


def run_parallel(func, items, jobs=1):
    """``func`` over ``items`` with up to ``jobs`` threads, results in input order."""
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, items))


def load_corpus(manifest, config, cache_dir=None):
    def load(entry):
        features = features_for(entry.audio_path, config.features, cache_dir)
        return CorpusFile(entry.file_id, features, load_events(entry), entry.subset)

    files = run_parallel(load, manifest.entries, config.jobs)
    if not files:
        raise DataError('no training files found')
    return TrainingCorpus(files, config.features.window_frames, config.features.window_shift)


def sidecar(params_path, suffix):
    return Path(str(params_path) + suffix)


def save_model(params, config, class_names, path):
    save_params(params, path)
    write_config(config, sidecar(path, '.cfg'))
    sidecar(path, '.classes').write_text('\n'.join(class_names) + '\n', encoding='utf-8')


def load_model(path, config):
    """Rebuild the model from a params file; model and feature keys come from its ``.cfg`` sidecar."""
    path = Path(path)
    saved_cfg = sidecar(path, '.cfg')
    if saved_cfg.is_file():
        saved = load_run_config(saved_cfg, environ={})
        config = config.model_copy(update={'model': saved.model, 'features': saved.features})
        logger.info('model and feature settings taken from %s', saved_cfg.name)
    params = load_params(path)
    if 'sed_head.bias' not in params:
        raise ParamFileError(f'{path}: no sed_head tensors')
    model = MultiTaskModel.from_config(config, params['sed_head.bias'].shape[0] - 1)
    model.check(params, path)
    classes = sidecar(path, '.classes')
    class_names = classes.read_text(encoding='utf-8').split() if classes.is_file() else []
    return model, params, class_names, config


class PrototypeScorer:
    """Per-class foreground probability for pseudo-labelling.

    The SED head is trained on episode-local labels, so its columns carry no
    fixed class. Each class is instead scored against a two-row prototype
    matrix (background, class) built from the labelled training windows that
    hold the class, as ``detect_file`` does with a file's supports.
    """

    def __init__(self, model, params, corpus, config):
        self.model = model
        self.params = params
        self.corpus = corpus
        self.config = config
        self._prototypes = {}

    @property
    def class_names(self):
        return set(self.corpus.class_names)

    def prototypes(self, class_name):
        if class_name not in self._prototypes:
            refs = self.corpus.by_class[class_name]
            windows, labels, masks = zip(*(self.corpus.window(ref) for ref in refs))
            emb = self.model.embed(self.params, np.stack(windows))
            is_class = (np.stack(labels) == self.corpus.class_index[class_name]).astype(np.int64)
            self._prototypes[class_name] = compute_W(emb, is_class, np.stack(masks), n_rows=2)
        return self._prototypes[class_name]

    def class_probability(self, feat, class_name):
        f = self.config.features
        batch = frame_windows(feat, [], None, f.window_frames, f.window_shift)
        emb = stitch_windows(self.model.embed(self.params, batch.windows), batch.window_origin, feat.n_frames)
        return predict_query(emb, self.prototypes(class_name))[:, 1]


def train_loop(model, params, corpus, config, n_episodes, start=0, optimizer=None, loss_log=None,
               checkpoint=None):
    """Run ``n_episodes`` episodes numbered from ``start``; returns (optimizer, list of EpisodeLoss)."""
    t = config.train
    optimizer = optimizer or Adam(t.lr, t.beta1, t.beta2, t.adam_eps)
    trace = []
    progress = tqdm(range(start, start + n_episodes), desc='train', unit='ep', file=sys.stderr,
                    disable=not sys.stderr.isatty())
    for episode_no in progress:
        episode = build_episode(corpus, min(t.n_classes, len(corpus.class_names)),
                                derive_seed(config.seed, 'episode', episode_no),
                                t.windows_per_class, t.queries_per_class)
        monitor = (episode_no + 1) % t.log_every == 0
        loss = train_episode(model, params, episode, optimizer, config.augment,
                             derive_seed(config.seed, 'augment', episode_no), monitor=monitor)
        trace.append(loss)
        if loss_log is not None:
            loss_log.write(f'{episode_no},{loss.l1:.6f},{loss.l2:.6f},{loss.total:.6f}\n')
        if monitor:
            acc = '' if loss.query_accuracy is None else f' query_acc={loss.query_accuracy:.3f}'
            logger.info('episode %d: l1=%.4f l2=%.4f total=%.4f%s', episode_no + 1, loss.l1, loss.l2, loss.total, acc)
            progress.set_postfix(loss=f'{loss.total:.3f}')
        if checkpoint is not None and (episode_no + 1) % t.checkpoint_every == 0:
            checkpoint(episode_no + 1)
    return optimizer, trace


def pseudo_label_files(model, params, corpus, weak_manifest, config, cache_dir=None):
    """Pseudo POS events on weak files, and corpus files holding them."""
    scorer = PrototypeScorer(model, params, corpus, config)
    events = pseudo_label_enhance(scorer, weak_manifest, config.augment.pseudo_confidence, config)
    by_file = {}
    for event in events:
        by_file.setdefault(event.file_id, []).append(event)
    files = [
        CorpusFile(entry.file_id, features_for(entry.audio_path, config.features, cache_dir),
                   by_file[entry.file_id], entry.subset)
        for entry in weak_manifest.entries
        if entry.file_id in by_file
    ]
    return events, files


def write_pseudo_labels(events, path):
    write_annotations(events, path, with_provenance=True)


def detect_file(model, params, entry, config, cache_dir=None, use_sed=False, use_sfbc=False):
    """Detections (seconds) for one file from its first ``fewshot.n_support`` POS events."""
    fcfg, fs = config.features, config.fewshot
    feat = features_for(entry.audio_path, fcfg, cache_dir)
    events = load_events(entry)
    class_name = target_class(events)
    support = build_support_set(events, feat.n_frames, feat.frame_rate, fs.n_support, class_name)
    if support.query_start >= feat.n_frames:
        logger.info('%s: no query frames after the support', entry.file_id)
        return []
    batch = frame_windows(feat, [], None, fcfg.window_frames, fcfg.window_shift)
    emb = stitch_windows(model.embed(params, batch.windows), batch.window_origin, feat.n_frames)
    W = compute_W(emb, support.labels, support.mask, n_rows=2)
    probs = predict_query(emb, W)[:, 1]
    seed = derive_seed(config.seed, f'finetune:{entry.file_id}')
    if use_sed:
        head, history = finetune_sed(emb, support, emb[support.query_start:], fs, seed)
        probs = head.probabilities(emb)
        logger.debug('%s: pseudo-label counts per cycle %s', entry.file_id, history)
    if use_sfbc:
        try:
            sfbc = finetune_sfbc(model, params, batch, support, split_supports(support.events), fs, seed)
        except EpisodeError as exc:
            logger.warning('%s: %s; skipping SFBC fine-tuning', entry.file_id, exc)
            sfbc = None
        if sfbc is not None:
            probs = 0.5 * (probs + sfbc.foreground_probabilities(model, params, batch, feat.n_frames))
    threshold = None
    if config.postproc.threshold_from_support:
        pos = (support.labels == 1) & (support.mask > 0)
        threshold = float(probs[pos].mean())
    mfl = derive_mfl(support.events, feat.frame_rate, config.postproc)
    q = support.query_start
    curve = ProbCurve(np.clip(probs[q:], 0.0, 1.0), feat.frame_rate, entry.file_id, offset_s=q / feat.frame_rate)
    detections = run_pipeline(curve, config.postproc, mfl, threshold, class_name)
    logger.info('%s: %d detection(s) for %s', entry.file_id, len(detections), class_name)
    return detections
