"""Feature-space augmentation and pseudo-labelling of weakly annotated recordings."""

import logging

import numpy as np

from .audio_io import LabeledEvent, load_audio
from .exceptions import DataError, EpisodeError, ShapeError
from .features import extract_features
from .postproc import ProbCurve, run_pipeline
from .seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

FREQ_AXIS = -1
TIME_AXIS = -2


def gaussian_noise(feat, sigma, seed):
    if sigma < 0:
        raise DataError(f'noise sigma must be >= 0, got {sigma}')
    feat = np.asarray(feat)
    if sigma == 0:
        return feat.copy()
    noise = derive_rng(seed, 'gaussian_noise').normal(0.0, sigma, size=feat.shape)
    return (feat + noise).astype(feat.dtype)


def _band_mask(feat, axis, n_masks, max_width, rng):
    feat = np.asarray(feat)
    length = feat.shape[axis]
    if max_width < 1:
        raise DataError(f'mask width must be >= 1, got {max_width}')
    if max_width > length:
        raise DataError(f'mask width {max_width} exceeds axis length {length}')
    out = feat.copy()
    fill = feat.mean()
    moved = np.moveaxis(out, axis, 0)
    for _ in range(n_masks):
        width = int(rng.integers(1, max_width + 1))
        start = int(rng.integers(0, length - width + 1))
        moved[start:start + width] = fill
    return out


def freq_mask(feat, n_masks, max_width, seed):
    return _band_mask(feat, FREQ_AXIS, n_masks, max_width, derive_rng(seed, 'freq_mask'))


def time_mask(feat, n_masks, max_width, seed):
    return _band_mask(feat, TIME_AXIS, n_masks, max_width, derive_rng(seed, 'time_mask'))


def noisy_view(window, cfg, seed):
    """Window plus noise scaled to ``cfg.noise_sigma`` feature standard deviations."""
    sigma = cfg.noise_sigma * float(np.std(window))
    return gaussian_noise(window, sigma, seed)


def masked_view(window, cfg, seed):
    """Time- and frequency-masked copy of a window, the FBC branch input during training."""
    out = freq_mask(window, cfg.n_freq_masks, cfg.max_freq_width, derive_seed(seed, 'masked_view', 0))
    return time_mask(out, cfg.n_time_masks, cfg.max_time_width, derive_seed(seed, 'masked_view', 1))


def pseudo_label_enhance(scorer, weak_manifest, confidence, config):
    """Detect events in weakly labelled files and keep the confident ones as pseudo POS events.

    ``scorer`` provides ``class_names`` and ``class_probability(feature_matrix,
    class_name)`` returning the per-frame probability of the file-level class.
    """
    events = []
    for entry in weak_manifest.entries:
        if entry.class_name not in scorer.class_names:
            logger.warning('%s: class %r was not trained, skipping', entry.file_id, entry.class_name)
            continue
        feat = extract_features(load_audio(entry.audio_path, config.features.sample_rate), config.features)
        try:
            probs = np.asarray(scorer.class_probability(feat, entry.class_name))
        except EpisodeError as exc:
            logger.warning('%s: cannot score %r (%s), skipping', entry.file_id, entry.class_name, exc)
            continue
        if probs.shape != (feat.n_frames,):
            raise ShapeError('pseudo_label_enhance', (feat.n_frames,), probs.shape)
        curve = ProbCurve(probs, feat.frame_rate, entry.file_id)
        kept = 0
        for detected in run_pipeline(curve, config.postproc, class_name=entry.class_name):
            start = int(round(detected.onset * feat.frame_rate))
            end = max(start + 1, int(round(detected.offset * feat.frame_rate)))
            if curve.probs[start:end].mean() < confidence:
                continue
            events.append(LabeledEvent(
                file_id=entry.file_id,
                onset_s=detected.onset,
                offset_s=detected.offset,
                label='POS',
                class_name=entry.class_name,
                provenance='pseudo',
            ))
            kept += 1
        logger.info('%s: %d pseudo event(s) kept', entry.file_id, kept)
    return events
