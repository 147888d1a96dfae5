import math

import numpy as np
import pytest

from boostdet.geometry import Box, Detection, GroundTruthObject
from boostdet.metrics import (
    FPRecord,
    average_precision,
    categorize_false_positives,
    evaluate_map,
    fp_category_counts,
    mean_ap,
    pr_curve,
    size_bin_edges,
    size_breakdown,
    svg_line_plot,
    write_fp_csv,
    write_pr_csv,
    write_sizebins_csv,
)


def gt(cls, cx, cy, w, h, idx):
    return GroundTruthObject(cls, Box(cx, cy, w, h), idx)


def det(cls, score, cx, cy, w, h):
    return Detection(cls, score, Box(cx, cy, w, h))


def envelope_ap_oracle(tp_sequence, n_gt):
    """First-principles area under the monotonized PR curve.

    Walks the ranked list, builds the raw (recall, precision) points,
    monotonizes precision from the right, and integrates over recall.
    """
    points = []
    tp = fp = 0
    for is_tp in tp_sequence:
        tp += is_tp
        fp += not is_tp
        points.append((tp / n_gt, tp / (tp + fp)))
    area = 0.0
    prev_r = 0.0
    for i, (r, _) in enumerate(points):
        p_right = max(p for (r2, p) in points if r2 >= r)
        area += (r - prev_r) * p_right
        prev_r = r
    return area


class TestAveragePrecision:
    def test_perfect_detector(self):
        gts = {"i": [gt(1, 5, 5, 2, 2, 1), gt(1, 10, 10, 2, 2, 2)]}
        dets = {"i": [det(1, 1.0, 5, 5, 2, 2), det(1, 1.0, 10, 10, 2, 2)]}
        assert average_precision(dets, gts, 1) == 1.0

    def test_no_detections(self):
        gts = {"i": [gt(1, 5, 5, 2, 2, 1)]}
        assert average_precision({}, gts, 1) == 0.0

    def test_absent_class_is_undefined(self):
        gts = {"i": [gt(1, 5, 5, 2, 2, 1)]}
        assert average_precision({}, gts, 2) is None

    def test_ranked_tp_fp_tp_tp(self):
        # 3 objects; ranked list TP, FP, TP, TP
        gts = {"i": [gt(1, 5, 5, 2, 2, 1), gt(1, 15, 15, 2, 2, 2), gt(1, 25, 25, 2, 2, 3)]}
        dets = {
            "i": [
                det(1, 0.9, 5, 5, 2, 2),      # TP
                det(1, 0.8, 40, 40, 2, 2),    # FP
                det(1, 0.7, 15, 15, 2, 2),    # TP
                det(1, 0.6, 25, 25, 2, 2),    # TP
            ]
        }
        oracle = envelope_ap_oracle([True, False, True, True], 3)
        assert average_precision(dets, gts, 1) == pytest.approx(oracle, abs=1e-12)
        assert oracle == pytest.approx(5 / 6, abs=1e-12)
        # raw (non-monotonized) interpolation: mean precision at TP ranks
        raw = (1 + 2 / 3 + 3 / 4) / 3
        assert average_precision(dets, gts, 1, monotonize=False) == pytest.approx(raw, abs=1e-12)
        assert raw == pytest.approx(0.80556, abs=1e-5)

    def test_duplicate_detection_counts_as_fp(self):
        gts = {"i": [gt(1, 5, 5, 2, 2, 1)]}
        dets = {"i": [det(1, 0.9, 5, 5, 2, 2), det(1, 0.8, 5, 5, 2, 2)]}
        # second detection duplicates a matched object: precision at rank 2 is 1/2
        assert average_precision(dets, gts, 1) == 1.0  # envelope keeps precision 1 at recall 1
        curve = pr_curve(dets, gts, 1)
        assert curve.precision[-1] == 0.5

    def test_monotone_under_top_rank_tp(self):
        rng = np.random.default_rng(0)
        gts = {"i": [gt(1, 10 * k + 5, 5, 2, 2, k) for k in range(1, 6)]}
        dets = {"i": [det(1, 0.5, 10 * k + 5, 5, 2, 2) for k in range(1, 4)]
                + [det(1, 0.4, 90, 90, 2, 2)]}
        base = average_precision(dets, gts, 1)
        better = {"i": dets["i"] + [det(1, 0.99, 45, 5, 2, 2)]}
        assert average_precision(better, gts, 1) >= base

    def test_wrong_class_never_matches(self):
        gts = {"i": [gt(1, 5, 5, 2, 2, 1)]}
        dets = {"i": [det(2, 0.9, 5, 5, 2, 2)]}
        assert average_precision(dets, gts, 2) is None
        assert average_precision(dets, gts, 1) == 0.0


class TestMeanAp:
    def test_single_class(self):
        assert mean_ap({1: 0.7}) == 0.7

    def test_two_classes(self):
        assert mean_ap({1: 1.0, 2: 0.0}) == 0.5

    def test_skips_undefined(self):
        assert mean_ap({1: 0.6, 2: None}) == 0.6
        assert mean_ap({1: None}) == 0.0

    def test_three_class_fixture_matches_per_class_oracle(self):
        gts = {
            "a": [gt(1, 5, 5, 2, 2, 1), gt(2, 15, 15, 2, 2, 2)],
            "b": [gt(3, 5, 5, 2, 2, 3)],
        }
        dets = {
            "a": [det(1, 0.9, 5, 5, 2, 2), det(2, 0.8, 40, 40, 2, 2)],
            "b": [det(3, 0.7, 5, 5, 2, 2)],
        }
        per_class, m = evaluate_map(dets, gts, [1, 2, 3])
        assert per_class[1] == 1.0 and per_class[2] == 0.0 and per_class[3] == 1.0
        assert m == pytest.approx((1.0 + 0.0 + 1.0) / 3)


class TestPrCurve:
    def test_perfect_detector_pinned_at_one(self):
        gts = {"i": [gt(1, 5, 5, 2, 2, 1), gt(1, 15, 15, 2, 2, 2)]}
        dets = {"i": [det(1, 0.9, 5, 5, 2, 2), det(1, 0.8, 15, 15, 2, 2)]}
        c = pr_curve(dets, gts, 1)
        assert all(p == 1.0 for p in c.precision)
        assert c.recall == (0.5, 1.0)

    def test_empty_detections_empty_curve(self):
        gts = {"i": [gt(1, 5, 5, 2, 2, 1)]}
        c = pr_curve({}, gts, 1)
        assert c.thresholds == () and c.precision == () and c.recall == ()

    def test_recall_non_decreasing(self):
        rng = np.random.default_rng(1)
        gts = {"i": [gt(1, 10 * k, 10 * k, 3, 3, k) for k in range(1, 6)]}
        dets = {"i": [det(1, float(rng.uniform(0, 1)), float(rng.uniform(5, 55)),
                          float(rng.uniform(5, 55)), 3, 3) for _ in range(12)]}
        c = pr_curve(dets, gts, 1)
        assert list(c.recall) == sorted(c.recall)

    def test_fixture_confusion_counts(self):
        gts = {"i": [gt(1, 5, 5, 2, 2, 1), gt(1, 15, 15, 2, 2, 2)]}
        dets = {"i": [det(1, 0.9, 5, 5, 2, 2), det(1, 0.5, 40, 40, 2, 2)]}
        c = pr_curve(dets, gts, 1)
        assert c.thresholds == (0.9, 0.5)
        assert c.precision == (1.0, 0.5)
        assert c.recall == (0.5, 0.5)


class TestSizeBins:
    def test_equal_areas_collapse_to_one_bin(self):
        gts = {"i": [gt(1, 5 + 6 * k, 5, 2, 2, k) for k in range(12)]}
        binning = size_breakdown({}, gts, [1])
        assert len(set(binning.edges)) == 1
        assert binning.bin_counts["XS"] == 12
        assert all(binning.bin_counts[b] == 0 for b in ("S", "M", "L", "XL"))

    def test_uniform_1_to_100_edges(self):
        areas = list(range(1, 101))
        assert size_bin_edges(areas) == (10, 30, 70, 90)

    def test_matches_sort_and_slice_oracle(self):
        rng = np.random.default_rng(2)
        areas = sorted(float(a) for a in rng.uniform(1, 400, size=57))
        edges = size_bin_edges(areas)
        n = len(areas)
        slices = {
            "XS": areas[: math.ceil(0.1 * n)],
            "S": areas[math.ceil(0.1 * n): math.ceil(0.3 * n)],
            "M": areas[math.ceil(0.3 * n): math.ceil(0.7 * n)],
            "L": areas[math.ceil(0.7 * n): math.ceil(0.9 * n)],
            "XL": areas[math.ceil(0.9 * n):],
        }
        from boostdet.metrics import _bin_of

        for name, members in slices.items():
            for a in members:
                assert _bin_of(a, edges) == name

    def test_bin_counts_partition_gt_population(self):
        rng = np.random.default_rng(3)
        gts = {
            "i": [
                gt(1, float(rng.uniform(10, 50)), float(rng.uniform(10, 50)),
                   float(rng.uniform(1, 12)), float(rng.uniform(1, 12)), k)
                for k in range(40)
            ]
        }
        binning = size_breakdown({}, gts, [1])
        assert sum(binning.bin_counts.values()) == 40

    def test_warns_when_fewer_gts_than_bins(self):
        gts = {"i": [gt(1, 5, 5, 2, 2, 1), gt(1, 15, 15, 3, 3, 2)]}
        with pytest.warns(UserWarning):
            size_breakdown({}, gts, [1])

    def test_perfect_detector_scores_one_everywhere(self):
        rng = np.random.default_rng(4)
        objs = [
            gt(1, float(10 + 10 * k), 30.0, float(2 + k), float(2 + k), k) for k in range(5)
        ]
        gts = {"i": objs}
        dets = {"i": [det(1, 1.0, g.box.cx, g.box.cy, g.box.w, g.box.h) for g in objs]}
        binning = size_breakdown(dets, gts, [1])
        for name, value in binning.per_bin_map.items():
            if binning.bin_counts[name]:
                assert value == 1.0


class TestFpTaxonomy:
    def test_rule_table(self):
        gts = {"i": [gt(1, 10, 10, 4, 4, 1), gt(2, 30, 30, 4, 4, 2)]}
        dets = {
            "i": [
                det(1, 0.9, 12, 10, 4, 4),   # same-class IoU 1/3 -> Loc
                det(1, 0.8, 50, 50, 4, 4),   # no overlap -> BG
                det(1, 0.7, 31, 30, 4, 4),   # wrong-class overlap only -> Sim
            ]
        }
        records = categorize_false_positives(dets, gts)
        cats = {(r.detection.score): r.category for r in records}
        assert cats[0.9] == "Loc"
        assert cats[0.8] == "BG"
        assert cats[0.7] == "Sim"

    def test_duplicate_of_matched_gt_is_oth(self):
        gts = {"i": [gt(1, 10, 10, 4, 4, 1)]}
        dets = {"i": [det(1, 0.9, 10, 10, 4, 4), det(1, 0.8, 10, 10, 4, 4)]}
        records = categorize_false_positives(dets, gts)
        assert len(records) == 1
        assert records[0].category == "Oth"
        assert records[0].overlapped_gt == 1

    def test_rule_enumeration_oracle(self):
        # enumerate (same_iou_band, other_iou_band) combinations and compare
        # against an independent rule-table evaluation
        def oracle(same, other):
            if 0.1 <= same < 0.5:
                return "Loc"
            if other >= 0.1 and same < 0.1:
                return "Sim"
            if max(same, other) < 0.1:
                return "BG"
            return "Oth"

        # same-class object at left, other-class at right; slide a detection
        gts = {"i": [gt(1, 10, 10, 4, 4, 1), gt(2, 30, 10, 4, 4, 2)]}
        cases = [
            (det(1, 0.9, 12.0, 10, 4, 4), 1 / 3, 0.0),
            (det(1, 0.8, 13.4, 10, 4, 4), (4 - 3.4) / (8 + 3.4 * 4 / (4 + 3.4)), 0.0),
            (det(1, 0.7, 31, 10, 4, 4), 0.0, 3 / 5),
            (det(1, 0.6, 50, 10, 4, 4), 0.0, 0.0),
        ]
        from boostdet.geometry import iou

        for d, _, _ in cases:
            same = max((iou(d.box, g.box) for g in gts["i"] if g.cls == d.cls), default=0.0)
            other = max((iou(d.box, g.box) for g in gts["i"] if g.cls != d.cls), default=0.0)
            records = categorize_false_positives({"i": [d]}, gts)
            assert records[0].category == oracle(same, other)

    def test_counts_respect_score_threshold(self):
        gts = {"i": [gt(1, 10, 10, 4, 4, 1)]}
        dets = {"i": [det(1, 0.9, 50, 50, 4, 4), det(1, 0.2, 60, 60, 4, 4)]}
        records = categorize_false_positives(dets, gts)
        assert fp_category_counts(records, 0.5) == {"Loc": 0, "Sim": 0, "BG": 1, "Oth": 0}
        assert fp_category_counts(records, 0.0)["BG"] == 2

    def test_best_iou_and_overlapped_gt(self):
        gts = {"i": [gt(1, 10, 10, 4, 4, 7)]}
        dets = {"i": [det(2, 0.9, 12, 10, 4, 4)]}
        (r,) = categorize_false_positives(dets, gts)
        assert r.category == "Sim"
        assert r.best_iou == pytest.approx(1 / 3)
        assert r.overlapped_gt == 7


class TestReports:
    def test_csv_and_svg_outputs(self, tmp_path):
        gts = {"i": [gt(1, 5 + 8 * k, 5, 2 + 0.2 * k, 2, k) for k in range(6)]}
        dets = {"i": [det(1, 0.9, 5, 5, 2, 2), det(1, 0.8, 40, 40, 2, 2)]}
        curve = pr_curve(dets, gts, 1)
        write_pr_csv(tmp_path / "pr_1.csv", curve, digest="beef")
        text = (tmp_path / "pr_1.csv").read_text()
        assert text.startswith("# config_digest=beef\n")
        assert "threshold,precision,recall" in text
        binning = size_breakdown(dets, gts, [1])
        write_sizebins_csv(tmp_path / "bins.csv", binning, digest="beef")
        assert "# config_digest=beef" in (tmp_path / "bins.csv").read_text()
        records = categorize_false_positives(dets, gts)
        write_fp_csv(tmp_path / "fp.csv", records, digest="beef")
        assert "BG" in (tmp_path / "fp.csv").read_text()
        svg_line_plot(
            tmp_path / "pr.svg", {"class 1": list(zip(curve.recall, curve.precision))},
            title="pr", digest="beef",
        )
        svg = (tmp_path / "pr.svg").read_text()
        assert svg.startswith("<svg") and "config_digest=beef" in svg and "polyline" in svg
