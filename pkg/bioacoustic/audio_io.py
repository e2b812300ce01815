"""
Audio and annotation I/O.

Annotation CSVs follow the DCASE few-shot bioacoustic convention:
``Audiofilename,Starttime,Endtime`` followed by one column per class whose
cells are POS, NEG, UNK or empty. An optional ``provenance`` column marks
pseudo-labelled rows.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import soundfile as sf
from scipy import signal

from .exceptions import (
    AnnotationError,
    AudioReadError,
    DataError,
    EmptyAudioError,
    UnsupportedEncodingError,
)

logger = logging.getLogger(__name__)

LABELS = ('POS', 'NEG', 'UNK')
REQUIRED_COLUMNS = ('Audiofilename', 'Starttime', 'Endtime')
PROVENANCE_COLUMN = 'provenance'
SUPPORTED_SUBTYPES = {'PCM_16', 'PCM_24', 'PCM_32', 'FLOAT', 'DOUBLE'}


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.sample_rate <= 0:
            raise DataError(f'sample rate must be positive, got {self.sample_rate}')
        if self.samples.ndim != 1:
            raise DataError(f'waveform must be mono, got shape {self.samples.shape}')

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class LabeledEvent:
    file_id: str
    onset_s: float
    offset_s: float
    label: str
    class_name: str
    provenance: str = 'annotation'


@dataclass(frozen=True)
class EventInterval:
    """A detected event. Units are seconds unless produced inside postproc (frames)."""

    file_id: str
    onset: float
    offset: float
    score: float = 1.0
    class_name: str = ''


@dataclass
class ManifestEntry:
    audio_path: Path
    annotation_path: Optional[Path]
    subset: str
    class_name: Optional[str] = None

    @property
    def file_id(self):
        return self.audio_path.name


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry] = field(default_factory=list)
    split: str = 'train'

    def by_file_id(self):
        return {entry.file_id: entry for entry in self.entries}


def read_wav(path):
    """Read a PCM/float WAV file, downmixing to mono by the channel mean."""
    path = Path(path)
    if not path.is_file():
        raise AudioReadError(f'audio file not found: {path}')
    try:
        info = sf.info(str(path))
    except (sf.SoundFileError, RuntimeError) as exc:
        raise AudioReadError(f'cannot read {path}: {exc}') from exc
    if info.format not in ('WAV', 'WAVEX') or info.subtype not in SUPPORTED_SUBTYPES:
        raise UnsupportedEncodingError(f'{path}: unsupported encoding {info.format}/{info.subtype}')
    try:
        data, sample_rate = sf.read(str(path), dtype='float64', always_2d=True)
    except (sf.SoundFileError, RuntimeError) as exc:
        raise AudioReadError(f'cannot read {path}: {exc}') from exc
    if data.shape[0] == 0:
        raise EmptyAudioError(f'{path} contains no samples')
    samples = data.mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise AudioReadError(f'{path} contains non-finite samples')
    return Waveform(samples=samples, sample_rate=int(sample_rate))


def write_wav(wave, path, subtype='PCM_16'):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), np.clip(wave.samples, -1.0, 1.0), wave.sample_rate, subtype=subtype, format='WAV')


def resample(wave, target_hz):
    """Band-limited polyphase resampling (Kaiser-windowed sinc, beta 5.0)."""
    if target_hz <= 0:
        raise DataError(f'target rate must be positive, got {target_hz}')
    if target_hz == wave.sample_rate:
        return Waveform(samples=wave.samples.copy(), sample_rate=wave.sample_rate)
    g = math.gcd(int(target_hz), int(wave.sample_rate))
    up, down = int(target_hz) // g, int(wave.sample_rate) // g
    out = signal.resample_poly(wave.samples, up, down, window=('kaiser', 5.0))
    return Waveform(samples=out, sample_rate=int(target_hz))


def load_audio(path, sample_rate):
    wave = read_wav(path)
    if wave.sample_rate != sample_rate:
        logger.debug('resampling %s from %d to %d Hz', path, wave.sample_rate, sample_rate)
        wave = resample(wave, sample_rate)
    return wave


def read_annotations(csv_path):
    """Return (events, row_errors); a missing required column raises AnnotationError."""
    csv_path = Path(csv_path)
    try:
        handle = csv_path.open(newline='', encoding='utf-8')
    except OSError as exc:
        raise AnnotationError(csv_path, [(0, str(exc))]) from exc
    events, row_errors = [], []
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise AnnotationError(csv_path, [(1, 'missing header row')])
        header = [column.strip() for column in header]
        missing = [column for column in REQUIRED_COLUMNS if column not in header]
        class_columns = [
            column for column in header if column not in REQUIRED_COLUMNS and column != PROVENANCE_COLUMN
        ]
        if missing or not class_columns:
            problems = missing + ([] if class_columns else ['<class column>'])
            raise AnnotationError(csv_path, [(1, f'missing required column(s): {", ".join(problems)}')])
        index = {column: i for i, column in enumerate(header)}

        for lineno, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            row = row + [''] * (len(header) - len(row))
            try:
                onset = float(row[index['Starttime']])
                offset = float(row[index['Endtime']])
            except ValueError:
                row_errors.append((lineno, 'non-numeric time'))
                continue
            if not (math.isfinite(onset) and math.isfinite(offset)) or onset < 0:
                row_errors.append((lineno, f'invalid time {onset}..{offset}'))
                continue
            if offset <= onset:
                row_errors.append((lineno, f'Endtime {offset} <= Starttime {onset}'))
                continue
            file_id = row[index['Audiofilename']].strip()
            provenance = row[index[PROVENANCE_COLUMN]].strip() if PROVENANCE_COLUMN in index else ''
            for column in class_columns:
                value = row[index[column]].strip().upper()
                if not value:
                    continue
                if value not in LABELS:
                    row_errors.append((lineno, f'{column}: unknown label {value!r}'))
                    continue
                events.append(LabeledEvent(
                    file_id=file_id,
                    onset_s=onset,
                    offset_s=offset,
                    label=value,
                    class_name=column,
                    provenance=provenance or 'annotation',
                ))
    events.sort(key=lambda e: (e.file_id, e.onset_s, e.offset_s, e.class_name))
    return events, row_errors


def parse_annotations(csv_path, strict=False):
    events, row_errors = read_annotations(csv_path)
    if row_errors:
        if strict:
            raise AnnotationError(csv_path, row_errors)
        for lineno, message in row_errors:
            logger.warning('%s line %d: %s', csv_path, lineno, message)
    return events


def write_annotations(events, path, class_names=None, with_provenance=False):
    """Write LabeledEvents in the annotation schema, one row per event."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    class_names = sorted(class_names or {e.class_name for e in events})
    header = list(REQUIRED_COLUMNS) + class_names + ([PROVENANCE_COLUMN] if with_provenance else [])
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(header)
        for e in sorted(events, key=lambda e: (e.file_id, e.onset_s, e.offset_s, e.class_name)):
            cells = ['' if name != e.class_name else e.label for name in class_names]
            row = [e.file_id, f'{e.onset_s:.6f}', f'{e.offset_s:.6f}'] + cells
            if with_provenance:
                row.append(e.provenance)
            writer.writerow(row)


def write_detections(events, path):
    """Write detections as ``Audiofilename,Starttime,Endtime``, ordered by file then onset."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with path.open('w', newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(REQUIRED_COLUMNS)
            for e in sorted(events, key=lambda e: (e.file_id, e.onset, e.offset)):
                writer.writerow([e.file_id, f'{e.onset:.6f}', f'{e.offset:.6f}'])
    except OSError as exc:
        raise DataError(f'cannot write detections to {path}: {exc}') from exc


def parse_detections(path):
    path = Path(path)
    events = []
    with path.open(newline='', encoding='utf-8') as handle:
        reader = csv.DictReader(handle)
        missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise AnnotationError(path, [(1, f'missing required column(s): {", ".join(missing)}')])
        for row in reader:
            events.append(EventInterval(
                file_id=row['Audiofilename'],
                onset=float(row['Starttime']),
                offset=float(row['Endtime']),
            ))
    return events


def build_manifest(root, split='train'):
    """Pair every ``*.wav`` under root with the same-stem ``.csv``; subset is the parent dir name."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f'dataset directory not found: {root}')
    entries = []
    for audio in sorted(root.rglob('*.wav')):
        annotation = audio.with_suffix('.csv')
        entries.append(ManifestEntry(
            audio_path=audio,
            annotation_path=annotation if annotation.is_file() else None,
            subset=audio.parent.name if audio.parent != root else root.name,
        ))
    manifest = DatasetManifest(entries=entries, split=split)
    validate_manifest(manifest)
    return manifest


def build_weak_manifest(root):
    """Weakly labelled files: the parent directory name is the file-level class."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f'weak dataset directory not found: {root}')
    entries = [
        ManifestEntry(audio_path=audio, annotation_path=None, subset=audio.parent.name, class_name=audio.parent.name)
        for audio in sorted(root.rglob('*.wav'))
    ]
    return DatasetManifest(entries=entries, split='train')


def validate_manifest(manifest):
    seen = {}
    for entry in manifest.entries:
        if entry.file_id in seen:
            raise DataError(f'file id {entry.file_id} appears twice: {seen[entry.file_id]} and {entry.audio_path}')
        seen[entry.file_id] = entry.audio_path
    for entry in manifest.entries:
        if entry.annotation_path is None:
            continue
        events, _ = read_annotations(entry.annotation_path)
        foreign = sorted({e.file_id for e in events} - {entry.file_id})
        if foreign:
            raise DataError(
                f'{entry.annotation_path} references {", ".join(foreign)}, expected only {entry.file_id}'
            )


def load_events(entry):
    if entry.annotation_path is None:
        return []
    return parse_annotations(entry.annotation_path)


def target_class(events):
    """Class of the earliest POS event; the class a file is detected for."""
    pos = sorted((e for e in events if e.label == 'POS'), key=lambda e: (e.onset_s, e.class_name))
    if not pos:
        raise DataError('file has no POS events')
    return pos[0].class_name


def support_cutoff(events, class_name, n_support=5):
    """Offset of the n-th POS event of ``class_name`` (or of the last one when fewer exist)."""
    pos = sorted((e for e in events if e.label == 'POS' and e.class_name == class_name), key=lambda e: e.onset_s)
    if not pos:
        raise DataError(f'no POS events of class {class_name}')
    return pos[:n_support][-1].offset_s
