from __future__ import annotations

import itertools
import json
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

from targetsound.config import SCHEMA_VERSION
from targetsound.dsp import si_sdr
from targetsound.errors import EmptyRegion
from targetsound.metrics import (
    Counts,
    ExampleScores,
    assemble_report,
    binarize,
    event_f1,
    segment_f1,
    si_sdri,
    si_sdri_t,
)
from targetsound.models import DetectionTrack, SoundEncoder
from targetsound.synth import EventAnnotation as Ev
from targetsound.trainer import frame_labels

SR = 100


def signals(seed: int = 0, n: int = 1000):
    rng = np.random.default_rng(seed)
    target = rng.standard_normal(n)
    mixture = target + rng.standard_normal(n)
    estimate = target + 0.3 * rng.standard_normal(n)
    return mixture, estimate, target


def brute_segments(pred, gt, clip_len, seg):
    tp = fp = fn = 0
    n = int(math.ceil(clip_len / seg - 1e-9))
    for k in range(n):
        a, b = k * seg, (k + 1) * seg
        p = any(e.onset < b and e.offset > a for e in pred)
        g = any(e.onset < b and e.offset > a for e in gt)
        tp += p and g
        fp += p and not g
        fn += g and not p
    return tp, fp, fn


def brute_events(pred, gt, collar=0.2, ratio=0.2):
    def ok(p, g):
        return abs(p.onset - g.onset) <= collar and abs(p.offset - g.offset) <= max(collar, ratio * (g.offset - g.onset))

    best = 0
    for k in range(min(len(pred), len(gt)), 0, -1):
        for gs in itertools.combinations(range(len(gt)), k):
            for ps in itertools.permutations(range(len(pred)), k):
                if all(ok(pred[p], gt[g]) for p, g in zip(ps, gs)):
                    best = k
                    break
            if best:
                break
        if best:
            break
    return best, len(pred) - best, len(gt) - best


class SiSdriTests(unittest.TestCase):
    def test_identity_estimate_gains_nothing(self) -> None:
        mixture, _, target = signals()
        self.assertEqual(si_sdri(mixture, mixture, target), 0.0)

    def test_perfect_estimate_reaches_ceiling(self) -> None:
        mixture, _, target = signals()
        self.assertAlmostEqual(si_sdri(mixture, target, target), 60.0 - si_sdr(mixture, target), places=9)

    def test_three_sample_fixture(self) -> None:
        mixture = np.array([1.0, 1.0, -2.0])
        estimate = np.array([1.0, -1.0, 0.0])
        target = np.array([1.0, 0.0, -1.0])
        expected = 10 * math.log10(1 / 3) - 10 * math.log10(3.0)
        self.assertAlmostEqual(si_sdri(mixture, estimate, target), expected, places=9)

    def test_positive_rescaling(self) -> None:
        mixture, estimate, target = signals(1)
        self.assertAlmostEqual(si_sdri(mixture, 4.2 * estimate, target), si_sdri(mixture, estimate, target), places=9)

    def test_full_clip_region_matches_plain(self) -> None:
        mixture, estimate, target = signals(2)
        full = [Ev(0.0, len(target) / SR)]
        self.assertAlmostEqual(si_sdri_t(mixture, estimate, target, full, SR), si_sdri(mixture, estimate, target), delta=1e-9)

    def test_region_ignores_outside_samples(self) -> None:
        mixture, estimate, target = signals(3)
        estimate = estimate.copy()
        estimate[200:500] = target[200:500]
        estimate[:200] = 100 * np.random.default_rng(0).standard_normal(200)
        value = si_sdri_t(mixture, estimate, target, [Ev(2.0, 5.0)], SR)
        self.assertAlmostEqual(value, 60.0 - si_sdr(mixture[200:500], target[200:500]), places=9)

    def test_region_matches_crop_oracle(self) -> None:
        for seed in range(5):
            mixture, estimate, target = signals(seed)
            expected = si_sdri(mixture[200:500], estimate[200:500], target[200:500])
            self.assertAlmostEqual(si_sdri_t(mixture, estimate, target, [Ev(2.0, 5.0)], SR), expected, delta=1e-12)

    def test_two_regions_concatenate(self) -> None:
        mixture, estimate, target = signals(4)
        keep = np.r_[100:200, 600:700]
        expected = si_sdri(mixture[keep], estimate[keep], target[keep])
        value = si_sdri_t(mixture, estimate, target, [Ev(1.0, 2.0), Ev(6.0, 7.0)], SR)
        self.assertAlmostEqual(value, expected, delta=1e-12)

    def test_no_events(self) -> None:
        mixture, estimate, target = signals()
        with self.assertRaises(EmptyRegion):
            si_sdri_t(mixture, estimate, target, [], SR)


class BinarizeTests(unittest.TestCase):
    def test_constant_tracks(self) -> None:
        self.assertEqual(binarize(DetectionTrack(np.full(50, 0.9), 10.0)), [Ev(0.0, 5.0)])
        self.assertEqual(binarize(DetectionTrack(np.full(50, 0.1), 10.0)), [])

    def test_crafted_pattern(self) -> None:
        scores = np.zeros(30)
        scores[5:12] = 0.8
        scores[20:27] = 0.6
        scores[15] = 0.9  # isolated spike, removed by the median filter
        events = binarize(DetectionTrack(scores, 10.0), threshold=0.5, median_win=5)
        self.assertEqual(events, [Ev(0.5, 1.2), Ev(2.0, 2.7)])

    def test_without_smoothing(self) -> None:
        scores = np.array([0.0, 0.6, 0.0, 0.7, 0.7])
        self.assertEqual(binarize(DetectionTrack(scores, 2.0), median_win=1), [Ev(0.5, 1.0), Ev(1.5, 2.5)])

    def test_runs_follow_frame_centres_within_the_clip(self) -> None:
        self.assertEqual(binarize(DetectionTrack(np.ones(10), 10.0, 0.05, 1.0), median_win=1), [Ev(0.0, 1.0)])
        scores = np.zeros(10)
        scores[3:6] = 1.0
        (inner,) = binarize(DetectionTrack(scores, 10.0, 0.05, 1.0), median_win=1)
        self.assertAlmostEqual(inner.onset, 0.35)
        self.assertAlmostEqual(inner.offset, 0.65)
        scores = np.zeros(10)
        scores[7:9] = 1.0
        (late,) = binarize(DetectionTrack(scores, 10.0, 0.05, 0.9), median_win=1)
        self.assertEqual(late.offset, 0.9)

    def test_frame_labels_decode_to_their_event(self) -> None:
        sr = 8000
        encoder = SoundEncoder(n_filters=1, kernel_size=320, stride=160)
        centers = encoder.frame_centers(sr, sr)
        half_hop = 0.5 * 160 / sr
        for event in (Ev(0.3, 0.7), Ev(0.0, 1.0), Ev(0.42, 0.5)):
            track = DetectionTrack(frame_labels([event], centers), sr / 160, encoder.span_start(sr), 1.0)
            (decoded,) = binarize(track, median_win=1)
            self.assertLessEqual(abs(decoded.onset - event.onset), half_hop + 1e-9, event)
            self.assertLessEqual(abs(decoded.offset - event.offset), half_hop + 1e-9, event)


SEGMENT_FIXTURES = [
    ([Ev(1.0, 2.0)], [Ev(0.0, 3.5)], 10.0),
    ([], [Ev(0.0, 3.5)], 10.0),
    ([Ev(0.0, 3.5)], [Ev(0.0, 3.5)], 10.0),
    ([Ev(4.2, 4.3)], [Ev(0.0, 1.0)], 10.0),
    ([Ev(0.5, 9.5)], [Ev(2.0, 3.0), Ev(7.0, 8.0)], 10.0),
    ([Ev(0.0, 1.0), Ev(1.0, 2.0)], [Ev(0.9, 1.1)], 5.0),
    ([Ev(2.5, 3.0)], [Ev(3.0, 4.0)], 4.5),
    ([Ev(0.0, 0.2)], [], 3.0),
    ([Ev(8.0, 10.0)], [Ev(9.99, 10.0)], 10.0),
    ([Ev(1.5, 6.5)], [Ev(2.2, 2.4), Ev(5.1, 5.2)], 7.0),
]

EVENT_FIXTURES = [
    ([Ev(1.0, 2.0)], [Ev(1.0, 2.0)]),
    ([Ev(1.5, 2.0)], [Ev(1.0, 2.0)]),
    ([Ev(1.1, 2.1)], [Ev(1.0, 2.0)]),
    ([Ev(1.0, 5.0)], [Ev(1.1, 4.3)]),
    ([Ev(0.1, 1.0), Ev(3.0, 4.0), Ev(6.05, 7.3)], [Ev(0.0, 1.1), Ev(3.3, 4.2), Ev(6.0, 7.0)]),
    ([Ev(0.0, 1.0), Ev(0.1, 1.0)], [Ev(0.05, 1.0)]),
    ([], [Ev(0.0, 1.0), Ev(2.0, 3.0)]),
    ([Ev(0.0, 1.0)], []),
    ([Ev(2.0, 3.0), Ev(0.0, 1.0)], [Ev(0.0, 1.0), Ev(2.0, 3.0)]),
    ([Ev(5.0, 9.0)], [Ev(5.15, 10.0)]),
    ([Ev(0.32, 1.0), Ev(0.05, 1.0)], [Ev(0.2, 1.0), Ev(0.5, 1.0)]),
]


class F1Tests(unittest.TestCase):
    def test_derived_segment_fixture(self) -> None:
        f1, counts = segment_f1([Ev(1.0, 2.0)], [Ev(0.0, 3.5)], 10.0, 1.0)
        self.assertEqual((counts.tp, counts.fp, counts.fn), (1, 0, 3))
        self.assertAlmostEqual(f1, 0.4)

    def test_segment_f1_matches_enumeration(self) -> None:
        for pred, gt, clip_len in SEGMENT_FIXTURES:
            f1, counts = segment_f1(pred, gt, clip_len)
            self.assertEqual((counts.tp, counts.fp, counts.fn), brute_segments(pred, gt, clip_len, 1.0), (pred, gt))
            self.assertTrue(0.0 <= f1 <= 1.0)

    def test_event_f1_matches_enumeration(self) -> None:
        for pred, gt in EVENT_FIXTURES:
            _, counts = event_f1(pred, gt)
            self.assertEqual((counts.tp, counts.fp, counts.fn), brute_events(pred, gt), (pred, gt))

    def test_event_matching_finds_every_pair(self) -> None:
        gt = [Ev(0.2, 1.0), Ev(0.5, 1.0)]
        pred = [Ev(0.32, 1.0), Ev(0.05, 1.0)]
        for p in (pred, pred[::-1]):
            for g in (gt, gt[::-1]):
                _, counts = event_f1(p, g)
                self.assertEqual((counts.tp, counts.fp, counts.fn), (2, 0, 0))

    def test_event_borderline_cases(self) -> None:
        self.assertEqual(event_f1([Ev(1.0, 2.0)], [Ev(1.0, 2.0)])[0], 1.0)
        self.assertEqual(event_f1([Ev(1.5, 2.0)], [Ev(1.0, 2.0)])[0], 0.0)
        # offset tolerance grows to 20% of a long event
        self.assertEqual(event_f1([Ev(0.0, 10.0)], [Ev(0.0, 8.5)])[0], 1.0)
        self.assertEqual(event_f1([Ev(0.0, 10.5)], [Ev(0.0, 8.5)])[0], 0.0)

    def test_identical_prediction_scores_one_and_deletion_never_helps(self) -> None:
        gt = [Ev(0.0, 1.0), Ev(2.0, 3.5), Ev(6.0, 6.4)]
        self.assertEqual(segment_f1(gt, gt, 8.0)[0], 1.0)
        self.assertEqual(event_f1(gt, gt)[0], 1.0)
        seg_prev, ev_prev = 1.0, 1.0
        for k in range(len(gt) - 1, -1, -1):
            pred = gt[:k]
            seg, ev = segment_f1(pred, gt, 8.0)[0], event_f1(pred, gt)[0]
            self.assertLessEqual(seg, seg_prev)
            self.assertLessEqual(ev, ev_prev)
            seg_prev, ev_prev = seg, ev


class ReportTests(unittest.TestCase):
    def test_aggregates_and_files(self) -> None:
        rows = [
            ExampleScores("a", 0, 2.0, 1.0, 0.5, 1.0, Counts(1, 1, 1), Counts(1, 0, 0)),
            ExampleScores("b", 1, 4.0, 3.0, 1.0, 0.0, Counts(2, 0, 0), Counts(0, 1, 1)),
        ]
        report = assemble_report(rows, "hash", 3)
        self.assertEqual(report.aggregate["si_sdri"], 3.0)
        self.assertEqual(report.aggregate["si_sdri_t"], 2.0)
        self.assertAlmostEqual(report.aggregate["segment_f1"], 6 / 8)
        self.assertAlmostEqual(report.aggregate["event_f1"], 2 / 4)
        self.assertEqual(set(report.segment_counts), {0, 1})
        with tempfile.TemporaryDirectory() as tmp_dir:
            json_path, csv_path = report.write(Path(tmp_dir))
            data = json.loads(json_path.read_text(encoding="utf-8"))
            self.assertEqual(data["schema_version"], SCHEMA_VERSION)
            self.assertEqual(data["config_hash"], "hash")
            self.assertEqual(len(data["examples"]), 2)
            self.assertEqual(len(csv_path.read_text(encoding="utf-8").strip().splitlines()), 3)

    def test_counts_merge_in_any_order(self) -> None:
        parts = [Counts(1, 2, 3), Counts(4, 0, 1), Counts(0, 5, 2)]
        forward = sum(parts, Counts())
        backward = sum(reversed(parts), Counts())
        self.assertEqual(forward, backward)
        self.assertEqual(Counts().f1, 1.0)


if __name__ == "__main__":
    unittest.main()
