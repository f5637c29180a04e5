import math

import numpy as np
import pytest

from oracles import ap_by_threshold_enumeration, box_iou, greedy_match
from signkit.errors import SignkitError
from signkit.evalkit import (
    COCO_THRESHOLDS,
    Detection,
    EvalReport,
    GroundTruth,
    average_precision,
    best_f_measure,
    evaluate,
    iou,
    map_at,
    match_detections,
    max_recall,
    pr_curve,
    proposal_recall,
)


def det(box, score, image=1, category=1):
    return Detection(image_id=image, category_id=category, box=box, score=score)


def gt(box, image=1, category=1, difficult=False):
    return GroundTruth(image_id=image, category_id=category, box=box, difficult=difficult)


BIG = (0.0, 0.0, 50.0, 50.0)  # comfortably above any min-size rule


class TestIou:
    def test_identical(self):
        assert iou(BIG, BIG) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 10, 10), (20, 20, 5, 5)) == 0.0

    def test_half_overlap_arithmetic(self):
        assert iou((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(50.0 / 150.0)

    def test_symmetry_random(self, rng):
        for _ in range(100):
            a = tuple(rng.uniform(0, 20, 2)) + tuple(rng.uniform(1, 20, 2))
            b = tuple(rng.uniform(0, 20, 2)) + tuple(rng.uniform(1, 20, 2))
            assert iou(a, b) == iou(b, a)
            assert 0.0 <= iou(a, b) <= 1.0
            assert iou(a, b) == pytest.approx(box_iou(a, b))


class TestMatching:
    def test_perfect_single_detection(self):
        res = match_detections([det(BIG, 0.9)], [gt(BIG)], 0.5)
        assert (res.tp, res.fp, res.fn) == (1, 0, 0)

    def test_detection_on_difficult_gt_is_ignored(self):
        res = match_detections([det(BIG, 0.9)], [gt(BIG, difficult=True)], 0.5)
        assert (res.tp, res.fp, res.fn) == (0, 0, 0)
        assert res.ignored_gt == 1

    def test_detection_on_undersized_gt_is_ignored(self):
        small = (0.0, 0.0, 20.0, 20.0)
        res = match_detections([det(small, 0.9)], [gt(small)], 0.5, min_size=30.0)
        assert (res.tp, res.fp, res.fn) == (0, 0, 0)

    def test_double_detection_is_one_tp_one_fp(self):
        res = match_detections([det(BIG, 0.9), det(BIG, 0.8)], [gt(BIG)], 0.5)
        assert (res.tp, res.fp, res.fn) == (1, 1, 0)

    def test_one_to_one_matching(self):
        # two gts, two dets, both prefer the same gt; greedy hands the
        # second det the remaining one
        g1 = (0.0, 0.0, 40.0, 40.0)
        g2 = (30.0, 0.0, 40.0, 40.0)
        d_mid = (10.0, 0.0, 40.0, 40.0)
        res = match_detections([det(g1, 0.9), det(d_mid, 0.8)], [gt(g1), gt(g2)], 0.3)
        assert res.tp == 2
        assert res.det_matched_gt.count(None) == 0
        assert len(set(res.det_matched_gt)) == 2

    def test_unmatched_gt_is_fn(self):
        res = match_detections([], [gt(BIG)], 0.5)
        assert (res.tp, res.fp, res.fn) == (0, 0, 1)

    def test_prefers_real_gt_over_ignored(self):
        real = (0.0, 0.0, 40.0, 40.0)
        ignored = (2.0, 2.0, 40.0, 40.0)
        d = (1.0, 1.0, 40.0, 40.0)
        res = match_detections(
            [det(d, 0.9)], [gt(ignored, difficult=True), gt(real)], 0.5
        )
        assert res.tp == 1

    def test_matches_oracle_on_random_slices(self, rng):
        for _ in range(300):
            n_d, n_g = int(rng.integers(0, 8)), int(rng.integers(0, 6))
            dets = [
                det(
                    (float(rng.uniform(0, 80)), float(rng.uniform(0, 80)),
                     float(rng.uniform(10, 60)), float(rng.uniform(10, 60))),
                    float(rng.uniform(0, 1)),
                )
                for _ in range(n_d)
            ]
            gts = [
                gt(
                    (float(rng.uniform(0, 80)), float(rng.uniform(0, 80)),
                     float(rng.uniform(10, 60)), float(rng.uniform(10, 60))),
                    difficult=bool(rng.random() < 0.25),
                )
                for _ in range(n_g)
            ]
            thr = float(rng.uniform(0.2, 0.8))
            res = match_detections(dets, gts, thr, min_size=30.0)
            statuses, n_positive = greedy_match(
                [(d.box, d.score) for d in dets],
                [(g.box, g.difficult) for g in gts],
                thr,
                30.0,
            )
            assert res.n_positive == n_positive
            assert res.tp == statuses.count("tp")
            assert res.fp == statuses.count("fp")


class TestAveragePrecision:
    def test_perfect_detector(self):
        flags = [(0.9, True), (0.8, True)]
        assert average_precision(flags, 2) == 1.0

    def test_fp_before_tp_halves_ap(self):
        # 1 gt; highest-scored detection is false: envelope precision is 1/2
        flags = [(0.9, False), (0.8, True)]
        assert average_precision(flags, 1) == 0.5

    def test_no_detections_zero(self):
        assert average_precision([], 3) == 0.0

    def test_undefined_without_ground_truth(self):
        with pytest.raises(SignkitError):
            average_precision([(0.5, False)], 0)

    def test_coco101_on_perfect_detector(self):
        flags = [(0.9, True)]
        assert average_precision(flags, 1, "coco101") == 1.0

    def test_matches_exhaustive_threshold_oracle(self, rng):
        mismatches = 0
        for _ in range(300):
            n_d, n_g = int(rng.integers(1, 11)), int(rng.integers(1, 6))
            dets = []
            for _ in range(n_d):
                dets.append(
                    (
                        (float(rng.uniform(0, 60)), float(rng.uniform(0, 60)),
                         float(rng.uniform(20, 60)), float(rng.uniform(20, 60))),
                        float(rng.uniform(0, 1)),
                    )
                )
            gts_raw = [
                (
                    (float(rng.uniform(0, 60)), float(rng.uniform(0, 60)),
                     float(rng.uniform(20, 60)), float(rng.uniform(20, 60))),
                    bool(rng.random() < 0.2),
                )
                for _ in range(n_g)
            ]
            thr = 0.5
            expected = ap_by_threshold_enumeration(dets, gts_raw, thr, 30.0)
            if expected is None:
                continue
            res = match_detections(
                [det(b, s) for b, s in dets],
                [gt(b, difficult=d) for b, d in gts_raw],
                thr,
                30.0,
            )
            flags = [
                (dets[di][1], status == "tp")
                for di, status in zip(res.det_order, res.det_status)
                if status != "ignored"
            ]
            actual = average_precision(flags, res.n_positive)
            if actual != expected:
                mismatches += 1
        assert mismatches == 0


class TestPrCurveAndBestF:
    def test_recall_nondecreasing(self, rng):
        flags = [(float(rng.uniform(0, 1)), bool(rng.random() < 0.5)) for _ in range(30)]
        curve = pr_curve(flags, 10)
        assert np.all(np.diff(curve.recall) >= 0)

    def test_perfect_point(self):
        curve = pr_curve([(0.9, True)], 1)
        assert best_f_measure(curve) == (1.0, 1.0, 1.0)

    def test_tie_broken_toward_recall(self):
        # operating points (p=1, r=0.5) and (p=0.5, r=1) both give F = 2/3;
        # the tie goes to the higher-recall point
        curve = pr_curve([(0.9, True), (0.8, False), (0.7, False), (0.6, True)], 2)
        p, r, f = best_f_measure(curve)
        assert f == pytest.approx(2.0 / 3.0)
        assert r == 1.0
        assert p == 0.5

    def test_all_fp_zero_f(self):
        curve = pr_curve([(0.9, False), (0.5, False)], 2)
        assert best_f_measure(curve) == (0.0, 0.0, 0.0)


class TestMapAt:
    def test_single_threshold_equals_definition(self):
        dets = [det(BIG, 0.9), det((100.0, 100.0, 40.0, 40.0), 0.8)]
        gts = [gt(BIG), gt((100.0, 100.0, 40.0, 40.0))]
        table = map_at(dets, gts, [0.5])
        assert table[1][0.5] == 1.0

    def test_perfect_detections_at_all_ious(self):
        dets = [det(BIG, 0.9)]
        gts = [gt(BIG)]
        table = map_at(dets, gts, COCO_THRESHOLDS)
        assert all(table[1][t] == 1.0 for t in COCO_THRESHOLDS)

    def test_zero_gt_category_excluded_and_logged(self, caplog):
        dets = [det(BIG, 0.9, category=1), det(BIG, 0.9, category=2)]
        gts = [gt(BIG, category=1)]
        with caplog.at_level("WARNING"):
            table = map_at(dets, gts, [0.5])
        assert 2 not in table
        assert any("no usable ground truth" in rec.message for rec in caplog.records)

    def test_three_category_fixture_matches_oracle(self, rng):
        dets, gts, expected = [], [], {}
        for category in (1, 2, 3):
            cdets, cgts = [], []
            for _ in range(int(rng.integers(2, 7))):
                cgts.append(
                    ((float(rng.uniform(0, 60)), float(rng.uniform(0, 60)),
                      float(rng.uniform(30, 60)), float(rng.uniform(30, 60))), False)
                )
            for _ in range(int(rng.integers(2, 9))):
                base = cgts[int(rng.integers(len(cgts)))][0]
                jitter = rng.uniform(-8, 8, 2)
                cdets.append(
                    ((base[0] + float(jitter[0]), base[1] + float(jitter[1]),
                      base[2], base[3]), float(rng.uniform(0, 1)))
                )
            expected[category] = ap_by_threshold_enumeration(cdets, cgts, 0.5, 30.0)
            dets += [det(b, s, category=category) for b, s in cdets]
            gts += [gt(b, category=category) for b, _ in cgts]
        table = map_at(dets, gts, [0.5])
        for category in (1, 2, 3):
            assert table[category][0.5] == expected[category]


class TestMaxRecall:
    def test_full_coverage(self):
        assert max_recall([det(BIG, 0.5)], [gt(BIG)]) == 100.0

    def test_half_coverage(self):
        far = (200.0, 200.0, 40.0, 40.0)
        assert max_recall([det(BIG, 0.5)], [gt(BIG), gt(far)]) == 50.0

    def test_below_score_threshold_excluded(self):
        assert max_recall([det(BIG, 0.005)], [gt(BIG)]) == 0.0

    def test_category_averaged(self):
        # category 1 fully found, category 2 fully missed: mean is 50
        gts = [gt(BIG, category=1), gt((100.0, 0.0, 40.0, 40.0), category=2)]
        assert max_recall([det(BIG, 0.9, category=1)], gts) == 50.0


class TestProposalRecall:
    def test_top_1_exact_cover(self):
        proposals = {1: [(BIG, 0.9)]}
        grid = proposal_recall(proposals, [gt(BIG)], [1, 5], [0.5, 0.75])
        assert all(v == 100.0 for v in grid.values())

    def test_rank_filtering(self):
        cover = BIG
        decoy = (200.0, 200.0, 10.0, 10.0)
        proposals = {1: [(decoy, 0.9), (cover, 0.8)]}
        grid = proposal_recall(proposals, [gt(cover)], [1, 2], [0.5])
        assert grid[(1, 0.5)] == 0.0
        assert grid[(2, 0.5)] == 100.0

    def test_size_band_excludes_from_denominator(self):
        in_band = (0.0, 0.0, 40.0, 40.0)
        out_of_band = (100.0, 0.0, 60.0, 60.0)
        proposals = {1: [(in_band, 0.9)]}
        grid = proposal_recall(
            proposals, [gt(in_band), gt(out_of_band)], [1], [0.5], size_band=(30.0, 50.0)
        )
        assert grid[(1, 0.5)] == 100.0

    def test_monotone_in_n_and_iou(self, rng):
        proposals = {
            1: [
                ((float(rng.uniform(0, 80)), float(rng.uniform(0, 80)),
                  float(rng.uniform(20, 50)), float(rng.uniform(20, 50))),
                 float(rng.uniform(0, 1)))
                for _ in range(40)
            ]
        }
        gts = [
            gt((float(rng.uniform(0, 80)), float(rng.uniform(0, 80)),
                float(rng.uniform(30, 50)), float(rng.uniform(30, 50))))
            for _ in range(6)
        ]
        ns = [1, 5, 10, 40]
        ious = [0.3, 0.5, 0.7]
        grid = proposal_recall(proposals, gts, ns, ious)
        for thr in ious:
            values = [grid[(n, thr)] for n in ns]
            assert values == sorted(values)
        for n in ns:
            values = [grid[(n, thr)] for thr in ious]
            assert values == sorted(values, reverse=True)


class TestEvaluateReport:
    def test_perfect_report(self):
        dets = [det(BIG, 0.9)]
        gts = [gt(BIG)]
        report = evaluate(dets, gts)
        assert report.map50 == 100.0
        assert report.map50_95 == 100.0
        assert report.max_recall == 100.0
        assert report.best_f == 1.0
        assert (report.tp, report.fp, report.fn) == (1, 0, 0)

    def test_map_range_leq_map50(self, rng):
        for _ in range(40):
            dets, gts = [], []
            for i in range(int(rng.integers(1, 5))):
                box = (float(rng.uniform(0, 60)), float(rng.uniform(0, 60)),
                       float(rng.uniform(30, 60)), float(rng.uniform(30, 60)))
                gts.append(gt(box))
                if rng.random() < 0.8:
                    jitter = rng.uniform(-6, 6, 2)
                    dets.append(det((box[0] + float(jitter[0]), box[1] + float(jitter[1]),
                                     box[2], box[3]), float(rng.uniform(0.1, 1.0))))
            if not dets:
                continue
            report = evaluate(dets, gts)
            assert report.map50_95 <= report.map50 + 1e-9

    def test_report_requires_threshold_half(self):
        with pytest.raises(SignkitError):
            evaluate([det(BIG, 0.9)], [gt(BIG)], iou_thresholds=[0.75])

    def test_json_dict_shape(self):
        report = evaluate([det(BIG, 0.9)], [gt(BIG)])
        doc = report.to_json_dict()
        assert doc["map50"] == 100.0
        assert doc["counts"]["tp"] == 1
        assert doc["best_f"]["miss_rate"] == 0.0
        assert "1" in doc["per_category_ap"]

    def test_ignored_gts_do_not_shift_counts(self, rng):
        base_dets = [det(BIG, 0.9)]
        base_gts = [gt(BIG)]
        report = evaluate(base_dets, base_gts)
        small = (500.0, 500.0, 10.0, 10.0)
        extended = evaluate(
            base_dets + [det(small, 0.95)], base_gts + [gt(small, difficult=True)]
        )
        assert (extended.tp, extended.fp, extended.fn) == (report.tp, report.fp, report.fn)
        assert extended.map50 == report.map50
