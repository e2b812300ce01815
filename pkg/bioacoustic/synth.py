"""
Synthetic recordings for self-contained runs: tone and chirp events over
pink noise, with DCASE-style annotation CSVs next to each WAV.

Class k sits at ``base_hz + k * spacing_hz``; even classes are steady tones,
odd classes are linear chirps sweeping ``chirp_span_hz`` upwards.
"""

import logging
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import signal

from .audio_io import LabeledEvent, Waveform, write_annotations, write_wav
from .exceptions import DataError
from .seeding import derive_rng

logger = logging.getLogger(__name__)

FADE_S = 0.01


class SynthSpec(BaseModel):
    model_config = ConfigDict(extra='forbid')

    n_files: int = Field(6, ge=1)
    n_classes: int = Field(2, ge=1)
    duration: float = Field(60.0, gt=0, description='Seconds per file.')
    events_per_class: int = Field(10, ge=1)
    min_dur: float = Field(0.3, gt=0)
    max_dur: float = Field(0.8, gt=0)
    min_gap: float = Field(1.5, ge=0, description='Silence kept between events, seconds.')
    snr_db: float = Field(15.0)
    multi_class: bool = Field(False, description='Every file holds every class, one annotation column per class.')
    sample_rate: int = Field(22050, gt=0)
    base_hz: float = Field(1500.0, gt=0)
    spacing_hz: float = Field(2500.0, gt=0)
    chirp_span_hz: float = Field(600.0, ge=0)
    seed: int = Field(0, ge=0)

    @model_validator(mode='after')
    def _check(self):
        if self.min_dur > self.max_dur:
            raise ValueError('min_dur must not exceed max_dur')
        top = self.base_hz + (self.n_classes - 1) * self.spacing_hz + self.chirp_span_hz
        if top >= self.sample_rate / 2:
            raise ValueError(f'class {self.n_classes - 1} reaches {top} Hz, above Nyquist')
        return self

    def class_names(self):
        return [f'class{k:02d}' for k in range(self.n_classes)]

    def class_hz(self, k):
        return self.base_hz + k * self.spacing_hz


def pink_noise(n, rng):
    """Unit-RMS noise with a 1/f power spectrum."""
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.arange(spectrum.size, dtype=np.float64)
    freqs[0] = 1.0
    noise = np.fft.irfft(spectrum / np.sqrt(freqs), n)
    return noise / np.sqrt(np.mean(noise ** 2))


def event_signal(spec, k, n):
    t = np.arange(n) / spec.sample_rate
    f0 = spec.class_hz(k)
    if k % 2:
        tone = signal.chirp(t, f0=f0, t1=max(t[-1], 1e-9), f1=f0 + spec.chirp_span_hz, method='linear')
    else:
        tone = np.sin(2 * np.pi * f0 * t)
    fade = min(int(FADE_S * spec.sample_rate), n // 2)
    if fade:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        tone[:fade] *= ramp
        tone[n - fade:] *= ramp[::-1]
    return tone / np.sqrt(np.mean(tone ** 2))


def place_events(spec, n_events, rng):
    """Non-overlapping (onset, offset) pairs in seconds with at least ``min_gap`` between them."""
    durations = rng.uniform(spec.min_dur, spec.max_dur, size=n_events)
    slack = spec.duration - durations.sum() - (n_events + 1) * spec.min_gap
    if slack < 0:
        raise DataError(f'{n_events} events of up to {spec.max_dur} s do not fit in {spec.duration} s')
    shares = rng.dirichlet(np.ones(n_events + 1)) * slack
    onsets = spec.min_gap * (np.arange(n_events) + 1) + np.cumsum(shares[:-1]) + np.concatenate([[0], np.cumsum(durations[:-1])])
    return [(float(on), float(on + d)) for on, d in zip(onsets, durations)]


def synth_file(spec, index):
    """(Waveform, events) of file ``index``; events are (onset, offset, class index)."""
    rng = derive_rng(spec.seed, 'synth', index)
    n = int(round(spec.duration * spec.sample_rate))
    classes = list(range(spec.n_classes)) if spec.multi_class else [index % spec.n_classes]
    labels = [k for k in classes for _ in range(spec.events_per_class)]
    labels = [labels[i] for i in rng.permutation(len(labels))]
    x = pink_noise(n, rng)
    gain = 10.0 ** (spec.snr_db / 20.0)
    events = []
    for (onset, offset), k in zip(place_events(spec, len(labels), rng), labels):
        start, end = int(round(onset * spec.sample_rate)), min(int(round(offset * spec.sample_rate)), n)
        x[start:end] += gain * event_signal(spec, k, end - start)
        events.append((start / spec.sample_rate, end / spec.sample_rate, k))
    x *= 0.9 / np.max(np.abs(x))
    return Waveform(x, spec.sample_rate), events


def synth_corpus(out_dir, spec):
    """Write ``spec.n_files`` WAV + CSV pairs into ``out_dir``; returns the WAV paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = spec.class_names()
    paths = []
    for index in range(spec.n_files):
        wave, events = synth_file(spec, index)
        audio_path = out_dir / f'{out_dir.name}_{index:03d}.wav'
        write_wav(wave, audio_path)
        present = sorted({k for _, _, k in events})
        rows = []
        for onset, offset, k in events:
            rows.append(LabeledEvent(audio_path.name, onset, offset, 'POS', names[k]))
            if spec.multi_class:
                rows += [LabeledEvent(audio_path.name, onset, offset, 'NEG', names[o]) for o in present if o != k]
        write_annotations(rows, audio_path.with_suffix('.csv'), class_names=[names[k] for k in present])
        logger.info('wrote %s with %d event(s)', audio_path.name, len(events))
        paths.append(audio_path)
    return paths
