"""
Spectral features and window segmentation.

STFT uses a periodic Hann window with reflect padding of n_fft/2 on both
sides, so frame t is centred on sample t * hop. Mel filters use the HTK mel
scale ``2595 * log10(1 + f / 700)``.

Feature cache container (little-endian)::

    offset  size  field
    0       4     magic b'FSBF'
    4       4     uint32 version (1)
    8       4     uint32 T (frames)
    12      4     uint32 F (bins)
    16      8     float64 frame_rate (frames per second)
    24      8     kind, ASCII, NUL padded ('logmel' or 'pcen')
    32      4*T*F float32 data, row-major (frame by frame)
"""

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .exceptions import DataError, FeatureError

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b'FSBF'
FEATURE_VERSION = 1
_HEADER = struct.Struct('<4sIIId8s')

BACKGROUND = 0


@dataclass
class FeatureMatrix:
    data: np.ndarray
    frame_rate: float
    kind: str

    def __post_init__(self):
        if self.data.ndim != 2:
            raise FeatureError(f'feature matrix must be 2-D, got shape {self.data.shape}')
        if not np.all(np.isfinite(self.data)):
            raise FeatureError('feature matrix contains non-finite values')

    @property
    def n_frames(self):
        return self.data.shape[0]

    @property
    def n_bins(self):
        return self.data.shape[1]


@dataclass
class WindowBatch:
    windows: np.ndarray
    frame_labels: np.ndarray
    masks: np.ndarray
    window_origin: np.ndarray

    def __len__(self):
        return len(self.windows)


def stft(wave, n_fft=1024, hop=256):
    """Complex STFT of shape (1 + len // hop, n_fft // 2 + 1)."""
    x = np.asarray(wave.samples, dtype=np.float64)
    if x.size == 0:
        raise FeatureError('cannot compute the STFT of an empty waveform')
    pad = n_fft // 2
    mode = 'reflect' if x.size > pad else 'constant'
    padded = np.pad(x, pad, mode=mode)
    frames = sliding_window_view(padded, n_fft)[::hop]
    window = signal.get_window('hann', n_fft)
    return np.fft.rfft(frames * window, axis=1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels=128, sr=22050, n_fft=1024, fmin=0.0, fmax=None):
    """Triangular HTK-mel filters of shape (n_mels, n_fft // 2 + 1), peak 1."""
    if n_mels < 1:
        raise FeatureError(f'n_mels must be >= 1, got {n_mels}')
    fmax = sr / 2.0 if fmax is None else fmax
    if not 0 <= fmin < fmax <= sr / 2.0:
        raise FeatureError(f'invalid mel range {fmin}..{fmax} Hz for sr={sr}')
    bin_hz = np.arange(n_fft // 2 + 1) * sr / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lower) / (center - lower)
    falling = (upper - bin_hz[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise FeatureError(
            f'{empty.size} empty mel filter(s) (first at index {empty[0]}); '
            f'n_mels={n_mels} is too large for n_fft={n_fft}'
        )
    return fb


def mel_power(wave, cfg):
    if wave.sample_rate != cfg.sample_rate:
        raise FeatureError(f'expected {cfg.sample_rate} Hz audio, got {wave.sample_rate} Hz')
    spec = stft(wave, cfg.n_fft, cfg.hop_length)
    fb = mel_filterbank(cfg.n_mels, cfg.sample_rate, cfg.n_fft, cfg.fmin, cfg.fmax)
    return (np.abs(spec) ** 2) @ fb.T


def log_mel(wave, cfg):
    power = mel_power(wave, cfg)
    return FeatureMatrix(data=np.log(power + cfg.log_floor), frame_rate=cfg.frame_rate, kind='logmel')


def pcen(mel_pow, cfg, frame_rate=None):
    """Per-channel energy normalisation over time (axis 0) of a mel power matrix.

    The smoother starts in steady state for the first frame, so the output at
    frame t only depends on frames 0..t.
    """
    m = np.asarray(mel_pow, dtype=np.float64)
    if np.any(m < 0):
        raise FeatureError('PCEN input must be non-negative')
    s = cfg.pcen_s
    b, a = [s], [1.0, s - 1.0]
    zi = signal.lfilter_zi(b, a)[:, None] * m[:1]
    smooth, _ = signal.lfilter(b, a, m, axis=0, zi=zi)
    gain = m / (cfg.pcen_eps + smooth) ** cfg.pcen_alpha
    data = (gain + cfg.pcen_delta) ** cfg.pcen_r - cfg.pcen_delta ** cfg.pcen_r
    return FeatureMatrix(
        data=data,
        frame_rate=cfg.frame_rate if frame_rate is None else frame_rate,
        kind='pcen',
    )


def extract_features(wave, cfg):
    if cfg.kind == 'pcen':
        return pcen(mel_power(wave, cfg), cfg)
    return log_mel(wave, cfg)


def event_frame_range(onset_s, offset_s, frame_rate):
    """Frames [start, end) inside an event: onset rounded up, offset rounded down.

    Events shorter than a frame keep the frame holding their midpoint.
    """
    start = math.ceil(onset_s * frame_rate - 1e-9)
    end = math.floor(offset_s * frame_rate + 1e-9)
    if end <= start:
        start = math.floor(0.5 * (onset_s + offset_s) * frame_rate)
        end = start + 1
    return start, end


def frame_labels(n_frames, frame_rate, events, class_index):
    """Per-frame class ids (0 = background) and loss mask for a whole file.

    POS events of classes in ``class_index`` set their class id and NEG
    events are background. UNK events zero the mask. POS events of classes
    missing from ``class_index`` stay background.
    """
    labels = np.full(n_frames, BACKGROUND, dtype=np.int64)
    mask = np.ones(n_frames, dtype=np.float64)
    ordered = sorted(events, key=lambda e: {'NEG': 0, 'POS': 1, 'UNK': 2}[e.label])
    for event in ordered:
        start, end = event_frame_range(event.onset_s, event.offset_s, frame_rate)
        start, end = max(start, 0), min(end, n_frames)
        if end <= start:
            continue
        if event.label == 'UNK':
            mask[start:end] = 0.0
        elif event.label == 'POS' and event.class_name in class_index:
            labels[start:end] = class_index[event.class_name]
        elif event.label == 'NEG':
            labels[start:end] = BACKGROUND
    return labels, mask


def window_origins(n_frames, win=431, shift=86):
    """Window start frames: ``1 + floor((T - win) / shift)`` windows.

    The last window is moved to end on the final frame, so a tail shorter
    than one shift is still covered without adding a window.
    """
    if n_frames <= win:
        return np.zeros(1, dtype=np.int64)
    count = 1 + (n_frames - win) // shift
    origins = np.arange(count, dtype=np.int64) * shift
    origins[-1] = n_frames - win
    return origins


def frame_windows(feat, events, class_index=None, win=431, shift=86):
    """Slice a feature matrix into fixed windows with per-frame labels.

    Files shorter than one window give a single zero-padded window whose
    padded frames are masked out.
    """
    class_index = {} if class_index is None else class_index
    labels, mask = frame_labels(feat.n_frames, feat.frame_rate, events, class_index)
    origins = window_origins(feat.n_frames, win, shift)
    total = int(origins[-1]) + win
    pad = total - feat.n_frames
    data = np.pad(feat.data, ((0, pad), (0, 0)))
    labels = np.pad(labels, (0, pad))
    mask = np.pad(mask, (0, pad))
    index = origins[:, None] + np.arange(win)[None, :]
    return WindowBatch(
        windows=data[index],
        frame_labels=labels[index],
        masks=mask[index],
        window_origin=origins,
    )


def stitch_windows(values, origins, n_frames):
    """Average per-window frame values (n_windows, win, ...) back onto a length-n_frames axis."""
    values = np.asarray(values)
    win = values.shape[1]
    total = np.zeros((n_frames,) + values.shape[2:], dtype=np.float64)
    counts = np.zeros(n_frames, dtype=np.float64)
    for origin, chunk in zip(origins, values):
        end = min(int(origin) + win, n_frames)
        if end <= origin:
            continue
        total[origin:end] += chunk[:end - origin]
        counts[origin:end] += 1
    if np.any(counts == 0):
        raise FeatureError('stitch_windows: windows leave frames uncovered')
    return total / counts.reshape((-1,) + (1,) * (total.ndim - 1))


def save_features(feat, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = feat.kind.encode('ascii')
    if len(kind) > 8:
        raise FeatureError(f'feature kind {feat.kind!r} longer than 8 bytes')
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, feat.n_frames, feat.n_bins, float(feat.frame_rate), kind)
    with path.open('wb') as handle:
        handle.write(header)
        handle.write(np.ascontiguousarray(feat.data, dtype='<f4').tobytes())


def load_features(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f'{path}: truncated feature header')
    magic, version, n_frames, n_bins, frame_rate, kind = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DataError(f'{path}: not a feature file')
    if version != FEATURE_VERSION:
        raise DataError(f'{path}: feature file version {version}, expected {FEATURE_VERSION}')
    expected = _HEADER.size + 4 * n_frames * n_bins
    if len(raw) != expected:
        raise DataError(f'{path}: expected {expected} bytes, found {len(raw)}')
    data = np.frombuffer(raw, dtype='<f4', offset=_HEADER.size).reshape(n_frames, n_bins)
    return FeatureMatrix(data=data.astype(np.float32), frame_rate=frame_rate, kind=kind.rstrip(b'\0').decode('ascii'))
