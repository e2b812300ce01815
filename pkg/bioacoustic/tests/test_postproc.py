import numpy as np
from django.test import SimpleTestCase

from bioacoustic.audio_io import EventInterval, LabeledEvent
from bioacoustic.config import PostprocConfig
from bioacoustic.exceptions import DataError
from bioacoustic.postproc import (
    ProbCurve,
    adjust_threshold,
    binarize,
    change_points,
    derive_mfl,
    frames_to_seconds,
    iou_1d,
    median_filter,
    merge_runs,
    merge_short_events,
    min_length_filter,
    nms,
    run_pipeline,
    score_events,
    smooth,
)

FRAME_RATE = 22050 / 256


def curve(values):
    return ProbCurve(np.asarray(values, dtype=np.float64), FRAME_RATE, 'f.wav')


def brute_nms(events, iou):
    remaining = list(events)
    kept = []
    while remaining:
        best = remaining[0]
        for e in remaining[1:]:
            if (e.score, -e.onset, e.offset - e.onset) > (best.score, -best.onset, best.offset - best.onset):
                best = e
        kept.append(best)
        remaining = [
            e for e in remaining
            if e is not best and iou_1d((e.onset, e.offset), (best.onset, best.offset)) <= iou
        ]
    return sorted(kept, key=lambda e: (e.onset, e.offset))


def rle(binary):
    runs, start = [], None
    for i, v in enumerate(binary):
        if v and start is None:
            start = i
        if not v and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(binary)))
    return runs


class SmoothingTests(SimpleTestCase):
    def test_constant_curve_unchanged(self):
        out = smooth(curve(np.full(20, 0.3)), 5)
        np.testing.assert_allclose(out.probs, 0.3, atol=1e-12)

    def test_impulse_spreads_to_five_frames(self):
        values = np.zeros(21)
        values[10] = 1.0
        out = smooth(curve(values), 5).probs
        np.testing.assert_allclose(out[8:13], 0.2, atol=1e-12)
        self.assertEqual(np.count_nonzero(out > 1e-12), 5)

    def test_matches_clipped_window_mean(self):
        rng = np.random.default_rng(0)
        values = rng.uniform(size=37)
        out = smooth(curve(values), 5).probs
        for t in range(values.size):
            expected = values[max(t - 2, 0):t + 3].mean()
            self.assertAlmostEqual(out[t], expected, places=12)

    def test_median_removes_spike_and_keeps_monotone(self):
        spike = np.full(15, 0.2)
        spike[7] = 0.9
        np.testing.assert_array_equal(median_filter(curve(spike), 3).probs, np.full(15, 0.2))
        ramp = np.linspace(0, 1, 15)
        np.testing.assert_allclose(median_filter(curve(ramp), 3).probs, ramp)

    def test_median_matches_sorted_window(self):
        rng = np.random.default_rng(1)
        values = rng.uniform(size=40)
        out = median_filter(curve(values), 5).probs
        padded = np.pad(values, 2, mode='edge')
        for t in range(values.size):
            self.assertEqual(out[t], np.sort(padded[t:t + 5])[2])

    def test_even_median_kernel_raises(self):
        with self.assertRaises(DataError):
            median_filter(curve([0.1, 0.2]), 4)


class ThresholdTests(SimpleTestCase):
    def test_adjust_threshold_examples(self):
        self.assertAlmostEqual(adjust_threshold(0.62), 0.57, places=12)
        self.assertEqual(adjust_threshold(0.51), 0.5)
        self.assertEqual(adjust_threshold(0.55), 0.5)

    def test_adjust_threshold_grid(self):
        for t in np.linspace(0.01, 0.99, 981):
            self.assertAlmostEqual(adjust_threshold(t), max(t - 0.05, 0.5), places=10)

    def test_binarize_is_strict(self):
        np.testing.assert_array_equal(binarize(curve(np.full(6, 0.5)), 0.5), np.zeros(6))
        np.testing.assert_array_equal(binarize(curve([0.0, 0.1, 0.0]), 0.0), [0, 1, 0])

    def test_higher_threshold_never_adds_ones(self):
        rng = np.random.default_rng(2)
        c = curve(rng.uniform(size=200))
        counts = [int(binarize(c, adjust_threshold(t)).sum()) for t in np.linspace(0.05, 0.95, 19)]
        self.assertEqual(counts, sorted(counts, reverse=True))


class ChangePointTests(SimpleTestCase):
    def test_examples(self):
        self.assertEqual(change_points([0, 0, 0, 1, 1, 1, 0]), [(3, 6)])
        self.assertEqual(change_points([1] * 9), [(0, 9)])
        self.assertEqual(change_points([]), [])

    def test_matches_run_length_encoding(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            binary = rng.integers(0, 2, size=int(rng.integers(1, 60)))
            self.assertEqual(change_points(binary), rle(binary))


class NmsTests(SimpleTestCase):
    def test_identical_intervals_keep_higher_score(self):
        events = [EventInterval('f', 0, 10, 0.8), EventInterval('f', 0, 10, 0.9)]
        self.assertEqual(nms(events, 0.7), [EventInterval('f', 0, 10, 0.9)])

    def test_disjoint_intervals_all_survive(self):
        events = [EventInterval('f', i * 10, i * 10 + 5, 0.5) for i in range(5)]
        self.assertEqual(nms(events, 0.7), events)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(500):
            events = []
            for _ in range(int(rng.integers(0, 50))):
                onset = int(rng.integers(0, 200))
                events.append(EventInterval('f', onset, onset + int(rng.integers(1, 40)),
                                            float(rng.integers(0, 5)) / 4))
            out = nms(events, 0.7)
            self.assertEqual(out, brute_nms(events, 0.7))
            for e in out:
                self.assertIn(e, events)


class MergeTests(SimpleTestCase):
    cfg = PostprocConfig()

    def two_events(self, gap, length=200, prob=0.9, gap_prob=0.3):
        values = np.zeros(2 * length + gap + 20)
        values[10:10 + length] = prob
        values[10 + length:10 + length + gap] = gap_prob
        values[10 + length + gap:10 + 2 * length + gap] = prob
        c = curve(values)
        events = score_events(c, [(10, 10 + length), (10 + length + gap, 10 + 2 * length + gap)])
        return c, events

    def test_gap_below_limit_is_filled(self):
        c, events = self.two_events(gap=80)
        merged = merge_short_events(c, events, self.cfg, mfl_frames=87)
        np.testing.assert_array_equal(merged.probs[210:290], 1.0)
        np.testing.assert_array_equal(merged.probs[:10], 0.0)

    def test_gap_at_limit_is_unchanged(self):
        c, events = self.two_events(gap=87)
        self.assertIs(merge_short_events(c, events, self.cfg, mfl_frames=87), c)

    def test_mean_length_must_exceed_twice_mfl(self):
        c, events = self.two_events(gap=80, length=174)
        self.assertEqual(merge_runs(c, events, 87), [])
        c, events = self.two_events(gap=80, length=175)
        self.assertEqual(merge_runs(c, events, 87), [(10, 10 + 175 + 80 + 175)])

    def test_low_run_probability_is_unchanged(self):
        c, events = self.two_events(gap=80, prob=0.55, gap_prob=0.0)
        self.assertEqual(merge_runs(c, events, 87), [])

    def test_single_event_unchanged(self):
        c, events = self.two_events(gap=80)
        self.assertIs(merge_short_events(c, events[:1], self.cfg, mfl_frames=87), c)


class LengthTests(SimpleTestCase):
    def test_min_length_boundary(self):
        events = [EventInterval('f', 0, 5), EventInterval('f', 10, 14)]
        self.assertEqual(min_length_filter(events, 5), events[:1])
        self.assertEqual(min_length_filter([], 5), [])

    def test_derive_mfl(self):
        cfg = PostprocConfig()
        support = [LabeledEvent('f', 1.0, 1.5, 'POS', 'a'), LabeledEvent('f', 3.0, 3.2, 'POS', 'a')]
        self.assertEqual(derive_mfl(support, FRAME_RATE, cfg), max(5, int(0.5 * 0.2 * FRAME_RATE)))
        self.assertEqual(derive_mfl([], FRAME_RATE, cfg), 5)
        self.assertEqual(derive_mfl(support, FRAME_RATE, PostprocConfig(mfl_frames=9)), 9)

    def test_frames_to_seconds(self):
        out = frames_to_seconds(EventInterval('f', 0, 86), 86.13)
        self.assertAlmostEqual(out.onset, 0.0)
        self.assertAlmostEqual(out.offset, 0.9985, delta=1e-3)
        shifted = frames_to_seconds(EventInterval('f', 0, 86), 86.13, offset_s=2.0)
        self.assertAlmostEqual(shifted.onset, 2.0)

    def test_seconds_frames_round_trip(self):
        for seconds in np.linspace(0, 30, 101):
            frames = int(round(seconds * FRAME_RATE))
            back = frames_to_seconds(EventInterval('f', frames, frames + 1), FRAME_RATE).onset
            self.assertLessEqual(abs(back - seconds), 1 / FRAME_RATE)


class PipelineTests(SimpleTestCase):
    cfg = PostprocConfig()

    def test_all_zero_curve(self):
        self.assertEqual(run_pipeline(curve(np.zeros(500)), self.cfg, mfl_frames=5), [])

    def test_two_plateaus(self):
        values = np.full(1000, 0.05)
        values[100:200] = 0.95
        values[600:750] = 0.95
        events = run_pipeline(curve(values), self.cfg, mfl_frames=5)
        self.assertEqual(len(events), 2)
        for event, (start, end) in zip(events, [(100, 200), (600, 750)]):
            self.assertLessEqual(abs(event.onset * FRAME_RATE - start), 2)
            self.assertLessEqual(abs(event.offset * FRAME_RATE - end), 2)

    def test_rerun_on_binarized_output_is_a_fixpoint(self):
        rng = np.random.default_rng(5)
        values = np.clip(rng.normal(0.1, 0.05, 1200), 0, 1)
        values[200:300] = 0.9
        values[700:820] = 0.8
        first = run_pipeline(curve(values), self.cfg, mfl_frames=5)
        binary = np.zeros(1200)
        for e in first:
            binary[int(round(e.onset * FRAME_RATE)):int(round(e.offset * FRAME_RATE))] = 1.0
        second = run_pipeline(curve(binary), self.cfg, mfl_frames=5)
        self.assertEqual([(round(e.onset, 6), round(e.offset, 6)) for e in first],
                         [(round(e.onset, 6), round(e.offset, 6)) for e in second])

    def test_output_sorted_and_long_enough(self):
        rng = np.random.default_rng(6)
        events = run_pipeline(curve(rng.uniform(size=2000)), self.cfg, mfl_frames=8)
        onsets = [e.onset for e in events]
        self.assertEqual(onsets, sorted(onsets))
        for a, b in zip(events, events[1:]):
            self.assertLessEqual(a.offset, b.onset + 1e-9)
        for e in events:
            self.assertGreaterEqual(round((e.offset - e.onset) * FRAME_RATE), 8)

    def test_smoothing_after_thresholding(self):
        values = np.zeros(300)
        values[50:150] = 0.9
        values[100] = 0.1
        cfg = PostprocConfig(smooth_first=False)
        events = run_pipeline(curve(values), cfg, mfl_frames=5)
        self.assertEqual(len(events), 1)

    def test_close_long_events_come_out_merged(self):
        values = np.zeros(520)
        values[10:210] = 0.9
        values[210:290] = 0.3
        values[290:490] = 0.9
        events = run_pipeline(curve(values), self.cfg, mfl_frames=87)
        self.assertEqual(len(events), 1)
        self.assertLessEqual(abs(events[0].onset * FRAME_RATE - 10), 3)
        self.assertLessEqual(abs(events[0].offset * FRAME_RATE - 490), 3)
        self.assertEqual(len(run_pipeline(curve(values), self.cfg, mfl_frames=110)), 2)
