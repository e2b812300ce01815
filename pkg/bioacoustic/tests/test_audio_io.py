import tempfile
from pathlib import Path

import numpy as np
import soundfile as sf
from django.test import SimpleTestCase

from bioacoustic.audio_io import (
    EventInterval,
    LabeledEvent,
    Waveform,
    build_manifest,
    build_weak_manifest,
    load_audio,
    parse_annotations,
    parse_detections,
    read_wav,
    resample,
    support_cutoff,
    target_class,
    write_annotations,
    write_detections,
)
from bioacoustic.exceptions import (
    AnnotationError,
    AudioReadError,
    DataError,
    EmptyAudioError,
    UnsupportedEncodingError,
)

HEADER = 'Audiofilename,Starttime,Endtime,Q\n'


def tone(freq, seconds, sr):
    t = np.arange(int(seconds * sr)) / sr
    return 0.5 * np.sin(2 * np.pi * freq * t)


class AudioTestCase(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def write_csv(self, name, body, header=HEADER):
        path = self.tmp / name
        path.write_text(header + body, encoding='utf-8')
        return path


class ReadWavTests(AudioTestCase):
    def test_stereo_is_downmixed_by_mean(self):
        left, right = np.full(100, 0.5), np.full(100, -0.25)
        sf.write(str(self.tmp / 'a.wav'), np.stack([left, right], axis=1), 8000, subtype='FLOAT')
        wave = read_wav(self.tmp / 'a.wav')
        self.assertEqual(wave.sample_rate, 8000)
        np.testing.assert_allclose(wave.samples, 0.125, atol=1e-7)

    def test_missing_file(self):
        with self.assertRaises(AudioReadError):
            read_wav(self.tmp / 'nope.wav')

    def test_unsupported_subtype(self):
        sf.write(str(self.tmp / 'u8.wav'), np.zeros(100), 8000, subtype='PCM_U8')
        with self.assertRaises(UnsupportedEncodingError):
            read_wav(self.tmp / 'u8.wav')

    def test_pcm16_full_scale(self):
        sf.write(str(self.tmp / 'i.wav'), np.array([16384, -16384, 0, 32767], dtype=np.int16), 8000, subtype='PCM_16')
        np.testing.assert_array_equal(read_wav(self.tmp / 'i.wav').samples, [0.5, -0.5, 0.0, 32767 / 32768])

    def test_zero_length_file(self):
        sf.write(str(self.tmp / 'empty.wav'), np.zeros(0, dtype=np.int16), 8000, subtype='PCM_16')
        with self.assertRaises(EmptyAudioError):
            read_wav(self.tmp / 'empty.wav')

    def test_load_audio_resamples(self):
        sf.write(str(self.tmp / 'b.wav'), tone(1000, 1.0, 44100), 44100, subtype='PCM_16')
        wave = load_audio(self.tmp / 'b.wav', 22050)
        self.assertEqual(wave.sample_rate, 22050)
        self.assertEqual(wave.samples.size, 22050)


class ResampleTests(SimpleTestCase):
    def test_same_rate_is_a_copy(self):
        wave = Waveform(samples=np.arange(10.0), sample_rate=100)
        out = resample(wave, 100)
        np.testing.assert_array_equal(out.samples, wave.samples)
        self.assertIsNot(out.samples, wave.samples)

    def test_tone_amplitude_survives_downsampling(self):
        wave = Waveform(samples=tone(1000, 1.0, 44100), sample_rate=44100)
        out = resample(wave, 22050)
        core = out.samples[1000:-1000]
        self.assertAlmostEqual(np.sqrt(np.mean(core ** 2)), 0.5 / np.sqrt(2), delta=0.01)

    def test_duration_is_kept(self):
        for source, target in ((44100, 22050), (16000, 22050), (48000, 22050)):
            wave = Waveform(samples=tone(440, 1.3, source), sample_rate=source)
            out = resample(wave, target)
            self.assertLessEqual(abs(out.samples.size / target - wave.samples.size / source), 1 / target)

    def test_tone_frequency_is_kept(self):
        for source in (16000, 44100, 48000):
            out = resample(Waveform(samples=tone(1000, 2.0, source), sample_rate=source), 22050)
            spectrum = np.abs(np.fft.rfft(out.samples * np.hanning(out.samples.size)))
            freqs = np.fft.rfftfreq(out.samples.size, d=1 / 22050)
            self.assertLessEqual(abs(freqs[np.argmax(spectrum)] - 1000.0), freqs[1])

    def test_bad_rate(self):
        with self.assertRaises(DataError):
            resample(Waveform(samples=np.zeros(4), sample_rate=100), 0)


class AnnotationTests(AudioTestCase):
    def test_parse_skips_bad_rows_with_warning(self):
        path = self.write_csv('a.csv', 'a.wav,1.0,2.0,POS\na.wav,3.0,2.5,POS\na.wav,4.0,4.5,UNK\n')
        with self.assertLogs('bioacoustic.audio_io', level='WARNING') as logs:
            events = parse_annotations(path)
        self.assertEqual([(e.onset_s, e.label) for e in events], [(1.0, 'POS'), (4.0, 'UNK')])
        self.assertIn('line 3', logs.output[0])

    def test_strict_raises_with_row_numbers(self):
        path = self.write_csv('a.csv', 'a.wav,1.0,2.0,POS\na.wav,x,2.5,POS\n')
        with self.assertRaises(AnnotationError) as ctx:
            parse_annotations(path, strict=True)
        self.assertEqual(ctx.exception.row_errors[0][0], 3)

    def test_missing_column(self):
        path = self.write_csv('a.csv', 'a.wav,1.0,POS\n', header='Audiofilename,Starttime,Q\n')
        with self.assertRaises(AnnotationError):
            parse_annotations(path)

    def test_multi_class_columns(self):
        path = self.write_csv('a.csv', 'a.wav,1.0,2.0,POS,\na.wav,3.0,4.0,NEG,POS\n',
                              header='Audiofilename,Starttime,Endtime,A,B\n')
        events = parse_annotations(path)
        self.assertEqual([(e.class_name, e.label) for e in events], [('A', 'POS'), ('A', 'NEG'), ('B', 'POS')])

    def test_write_then_parse_keeps_provenance(self):
        events = [LabeledEvent('w.wav', 0.5, 1.25, 'POS', 'A', provenance='pseudo')]
        write_annotations(events, self.tmp / 'p.csv', with_provenance=True)
        self.assertEqual(parse_annotations(self.tmp / 'p.csv'), events)

    def test_detections_sorted_by_file_then_onset(self):
        events = [EventInterval('b.wav', 2.0, 3.0), EventInterval('a.wav', 5.0, 6.0), EventInterval('a.wav', 1.0, 2.0)]
        write_detections(events, self.tmp / 'out' / 'pred.csv')
        parsed = parse_detections(self.tmp / 'out' / 'pred.csv')
        self.assertEqual([(e.file_id, e.onset) for e in parsed], [('a.wav', 1.0), ('a.wav', 5.0), ('b.wav', 2.0)])

    def test_no_detections_leaves_only_the_header(self):
        write_detections([], self.tmp / 'none.csv')
        self.assertEqual((self.tmp / 'none.csv').read_text(), 'Audiofilename,Starttime,Endtime\n')
        self.assertEqual(parse_detections(self.tmp / 'none.csv'), [])

    def test_many_detections_survive_a_write(self):
        rng = np.random.default_rng(4)
        onsets = rng.uniform(0, 600, size=100)
        events = [
            EventInterval(f'f{k % 3}.wav', float(on), float(on + rng.uniform(0.05, 3.0)))
            for k, on in enumerate(onsets)
        ]
        write_detections(events, self.tmp / 'many.csv')
        parsed = parse_detections(self.tmp / 'many.csv')
        expected = sorted(events, key=lambda e: (e.file_id, e.onset))
        self.assertEqual([e.file_id for e in parsed], [e.file_id for e in expected])
        np.testing.assert_allclose([e.onset for e in parsed], [e.onset for e in expected], atol=1e-6)
        np.testing.assert_allclose([e.offset for e in parsed], [e.offset for e in expected], atol=1e-6)


class ManifestTests(AudioTestCase):
    def test_pairs_audio_with_annotations(self):
        sub = self.tmp / 'BV'
        sub.mkdir()
        sf.write(str(sub / 'x.wav'), np.zeros(100), 8000)
        sf.write(str(sub / 'y.wav'), np.zeros(100), 8000)
        (sub / 'x.csv').write_text(HEADER + 'x.wav,0.1,0.2,POS\n', encoding='utf-8')
        manifest = build_manifest(self.tmp)
        self.assertEqual([e.file_id for e in manifest.entries], ['x.wav', 'y.wav'])
        self.assertEqual(manifest.entries[0].subset, 'BV')
        self.assertIsNone(manifest.entries[1].annotation_path)

    def test_foreign_file_id_rejected(self):
        sf.write(str(self.tmp / 'x.wav'), np.zeros(100), 8000)
        (self.tmp / 'x.csv').write_text(HEADER + 'other.wav,0.1,0.2,POS\n', encoding='utf-8')
        with self.assertRaises(DataError):
            build_manifest(self.tmp)

    def test_missing_root(self):
        with self.assertRaises(DataError):
            build_manifest(self.tmp / 'absent')

    def test_weak_manifest_class_from_directory(self):
        (self.tmp / 'owl').mkdir()
        sf.write(str(self.tmp / 'owl' / 'w.wav'), np.zeros(100), 8000)
        manifest = build_weak_manifest(self.tmp)
        self.assertEqual(manifest.entries[0].class_name, 'owl')


class SupportHelperTests(SimpleTestCase):
    events = [
        LabeledEvent('f', 5.0, 5.5, 'POS', 'B'),
        LabeledEvent('f', 1.0, 1.2, 'NEG', 'A'),
        LabeledEvent('f', 2.0, 2.5, 'POS', 'A'),
        LabeledEvent('f', 3.0, 3.5, 'POS', 'A'),
    ]

    def test_target_class_is_earliest_pos(self):
        self.assertEqual(target_class(self.events), 'A')

    def test_target_class_needs_pos(self):
        with self.assertRaises(DataError):
            target_class(self.events[1:2])

    def test_support_cutoff(self):
        self.assertEqual(support_cutoff(self.events, 'A', n_support=1), 2.5)
        self.assertEqual(support_cutoff(self.events, 'A', n_support=5), 3.5)
        with self.assertRaises(DataError):
            support_cutoff(self.events, 'C')
