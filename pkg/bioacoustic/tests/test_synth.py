import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from pydantic import ValidationError

from bioacoustic.audio_io import parse_annotations, read_wav
from bioacoustic.exceptions import DataError
from bioacoustic.seeding import derive_rng
from bioacoustic.synth import SynthSpec, event_signal, pink_noise, place_events, synth_corpus, synth_file


class SynthSpecTests(SimpleTestCase):
    def test_defaults_and_names(self):
        spec = SynthSpec()
        self.assertEqual(spec.class_names(), ['class00', 'class01'])
        self.assertEqual(spec.class_hz(1), 4000.0)

    def test_rejects_inverted_durations_and_nyquist(self):
        with self.assertRaises(ValidationError):
            SynthSpec(min_dur=1.0, max_dur=0.5)
        with self.assertRaises(ValidationError):
            SynthSpec(n_classes=5)
        with self.assertRaises(ValidationError):
            SynthSpec(unknown=1)


class SignalTests(SimpleTestCase):
    def test_pink_noise_is_unit_rms_with_falling_spectrum(self):
        noise = pink_noise(1 << 14, np.random.default_rng(0))
        self.assertAlmostEqual(np.sqrt(np.mean(noise ** 2)), 1.0)
        power = np.abs(np.fft.rfft(noise)) ** 2
        self.assertGreater(power[10:100].mean(), 10 * power[1000:2000].mean())

    def test_event_signal_unit_rms_and_faded(self):
        spec = SynthSpec()
        for k in (0, 1):
            tone = event_signal(spec, k, 8000)
            self.assertAlmostEqual(np.sqrt(np.mean(tone ** 2)), 1.0)
            self.assertEqual(tone[0], 0.0)

    def test_placed_events_keep_gaps(self):
        spec = SynthSpec(duration=30.0)
        spans = place_events(spec, 12, derive_rng(0, 'test'))
        self.assertEqual(len(spans), 12)
        self.assertGreaterEqual(spans[0][0], spec.min_gap - 1e-9)
        for (_, end), (start, _) in zip(spans, spans[1:]):
            self.assertGreaterEqual(start - end, spec.min_gap - 1e-9)
        self.assertLessEqual(spans[-1][1], spec.duration - spec.min_gap + 1e-9)

    def test_too_many_events(self):
        with self.assertRaises(DataError):
            place_events(SynthSpec(duration=5.0), 10, derive_rng(0, 'test'))

    def test_files_are_seeded(self):
        spec = SynthSpec(duration=10.0, events_per_class=3, seed=4)
        a, events_a = synth_file(spec, 1)
        b, events_b = synth_file(spec, 1)
        np.testing.assert_array_equal(a.samples, b.samples)
        self.assertEqual(events_a, events_b)
        self.assertEqual({k for _, _, k in events_a}, {1})
        self.assertAlmostEqual(np.max(np.abs(a.samples)), 0.9)


class CorpusTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_single_class_files(self):
        spec = SynthSpec(n_files=2, duration=10.0, events_per_class=3)
        paths = synth_corpus(self.tmp / 'evalset', spec)
        self.assertEqual([p.name for p in paths], ['evalset_000.wav', 'evalset_001.wav'])
        wave = read_wav(paths[0])
        self.assertEqual((wave.sample_rate, wave.samples.size), (22050, 10 * 22050))
        events = parse_annotations(paths[1].with_suffix('.csv'), strict=True)
        self.assertEqual(len(events), 3)
        self.assertEqual({(e.class_name, e.label) for e in events}, {('class01', 'POS')})

    def test_multi_class_files_mark_other_classes_negative(self):
        spec = SynthSpec(n_files=1, duration=12.0, events_per_class=2, multi_class=True)
        paths = synth_corpus(self.tmp / 'train', spec)
        events = parse_annotations(paths[0].with_suffix('.csv'), strict=True)
        pos = [e for e in events if e.label == 'POS']
        neg = [e for e in events if e.label == 'NEG']
        self.assertEqual(len(pos), 4)
        self.assertEqual(len(neg), 4)
        self.assertEqual({e.class_name for e in pos}, {'class00', 'class01'})
