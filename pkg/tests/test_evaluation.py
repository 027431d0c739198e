from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dadet.errors import ContractError
from dadet.evaluation import (
    approximated_hardness,
    average_precision,
    compute_iou,
    evaluate_detections,
    mean_ap,
    mine_hard_examples,
)


class TestComputeIou:
    def test_identical_boxes(self):
        box = (3.0, 4.0, 10.0, 12.0)
        assert compute_iou(box, box) == 1.0

    def test_disjoint_boxes(self):
        assert compute_iou((0, 0, 5, 5), (10, 10, 20, 20)) == 0.0

    def test_half_overlap_arithmetic(self):
        assert compute_iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3)

    def test_degenerate_box_is_zero(self):
        assert compute_iou((5, 5, 5, 5), (0, 0, 10, 10)) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.tuples(st.integers(0, 30), st.integers(0, 30),
                     st.integers(1, 20), st.integers(1, 20)),
           st.tuples(st.integers(0, 30), st.integers(0, 30),
                     st.integers(1, 20), st.integers(1, 20)))
    def test_symmetry_and_range(self, raw_a, raw_b):
        a = (raw_a[0], raw_a[1], raw_a[0] + raw_a[2], raw_a[1] + raw_a[3])
        b = (raw_b[0], raw_b[1], raw_b[0] + raw_b[2], raw_b[1] + raw_b[3])
        assert compute_iou(a, b) == compute_iou(b, a)
        assert 0.0 <= compute_iou(a, b) <= 1.0


def brute_force_ap(detections, groundtruth, iou_threshold=0.5):
    """Independent PR-curve integration: explicit envelope over exact rationals."""
    npos = sum(len(v) for v in groundtruth.values())
    if npos == 0:
        return None
    ranked = sorted(detections, key=lambda d: -d[1])
    consumed = {img: set() for img in groundtruth}
    flags = []
    for image_id, _, box in ranked:
        best_iou, best_j = 0.0, None
        for j, gt in enumerate(groundtruth.get(image_id, ())):
            iou = compute_iou(box, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if (
            best_j is not None
            and best_iou >= iou_threshold
            and best_j not in consumed[image_id]
        ):
            consumed[image_id].add(best_j)
            flags.append(1)
        else:
            flags.append(0)
    # Precision envelope computed right-to-left, then summed over recall steps.
    n = len(flags)
    tp_cum = list(np.cumsum(flags))
    precisions = [Fraction(int(tp_cum[k]), k + 1) for k in range(n)]
    envelope = precisions[:]
    for k in range(n - 2, -1, -1):
        envelope[k] = max(envelope[k], envelope[k + 1])
    recalls = [Fraction(int(tp_cum[k]), npos) for k in range(n)]
    ap = Fraction(0)
    prev_recall = Fraction(0)
    for k in range(n):
        if recalls[k] > prev_recall:
            ap += (recalls[k] - prev_recall) * envelope[k]
            prev_recall = recalls[k]
    return float(ap)


class TestAveragePrecision:
    def test_single_perfect_detection(self):
        gt = {"a": [(0.0, 0.0, 10.0, 10.0)]}
        dets = [("a", 0.9, (0.0, 0.0, 10.0, 10.0))]
        assert average_precision(dets, gt) == 1.0

    def test_tp_fp_tp_hand_case(self):
        gt = {"a": [(0.0, 0.0, 10.0, 10.0), (20.0, 20.0, 30.0, 30.0)]}
        dets = [
            ("a", 0.9, (0.0, 0.0, 10.0, 10.0)),     # TP
            ("a", 0.8, (50.0, 50.0, 60.0, 60.0)),   # FP
            ("a", 0.7, (20.0, 20.0, 30.0, 30.0)),   # TP
        ]
        assert average_precision(dets, gt) == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3),
                                                            abs=1e-9)

    def test_no_detections_with_groundtruth(self):
        gt = {"a": [(0.0, 0.0, 10.0, 10.0)]}
        assert average_precision([], gt) == 0.0

    def test_undefined_without_groundtruth(self):
        assert average_precision([("a", 0.5, (0, 0, 5, 5))], {"a": []}) is None

    def test_duplicate_detection_counts_once(self):
        gt = {"a": [(0.0, 0.0, 10.0, 10.0)]}
        dets = [
            ("a", 0.9, (0.0, 0.0, 10.0, 10.0)),
            ("a", 0.8, (0.0, 0.0, 10.0, 10.0)),  # same GT already consumed -> FP
        ]
        assert average_precision(dets, gt) == 1.0

    def test_monotone_sanity_appending_fp(self):
        gt = {"a": [(0.0, 0.0, 10.0, 10.0), (20.0, 20.0, 28.0, 28.0)]}
        dets = [("a", 0.9, (0.0, 0.0, 10.0, 10.0))]
        base = average_precision(dets, gt)
        worse = average_precision(
            dets + [("a", 0.1, (40.0, 40.0, 50.0, 50.0))], gt
        )
        assert worse <= base

    def test_monotone_sanity_prepending_tp(self):
        gt = {"a": [(0.0, 0.0, 10.0, 10.0), (20.0, 20.0, 28.0, 28.0)]}
        dets = [("a", 0.5, (40.0, 40.0, 50.0, 50.0))]
        base = average_precision(dets, gt)
        better = average_precision(
            [("a", 0.9, (0.0, 0.0, 10.0, 10.0))] + dets, gt
        )
        assert better >= base

    @settings(max_examples=120, deadline=None)
    @given(st.data())
    def test_matches_brute_force_oracle(self, data):
        box = st.tuples(st.integers(0, 20), st.integers(0, 20),
                        st.integers(2, 12), st.integers(2, 12)).map(
            lambda t: (float(t[0]), float(t[1]), float(t[0] + t[2]), float(t[1] + t[3]))
        )
        images = ["i0", "i1"]
        gt = {
            img: data.draw(st.lists(box, min_size=0, max_size=5), label=f"gt-{img}")
            for img in images
        }
        dets = data.draw(
            st.lists(
                st.tuples(st.sampled_from(images), st.floats(0.01, 0.99), box),
                min_size=0, max_size=10,
            ),
            label="detections",
        )
        expected = brute_force_ap(dets, gt)
        actual = average_precision(dets, gt)
        assert actual == expected  # exact: both integrate in rational arithmetic


class TestMeanAp:
    def test_mean_of_two(self):
        assert mean_ap({"a": 0.5, "b": 0.7}) == pytest.approx(0.6)

    def test_single_class(self):
        assert mean_ap({"a": 0.42}) == pytest.approx(0.42)

    def test_published_eight_class_row(self):
        row = {
            "bus": 51.2, "bicycle": 39.1, "car": 54.3, "motorcycle": 31.6,
            "person": 36.5, "rider": 46.7, "train": 48.7, "truck": 30.3,
        }
        assert mean_ap(row) == pytest.approx(42.3, abs=0.05)

    def test_undefined_classes_excluded(self):
        assert mean_ap({"a": 0.5, "b": None}) == pytest.approx(0.5)

    def test_all_undefined_is_error(self):
        with pytest.raises(ContractError):
            mean_ap({"a": None})


class TestEvaluateDetections:
    def test_perfect_detector_scores_full_marks(self, rng):
        from dadet.detector import BoxAnnotation, Detection

        samples = []
        for i in range(5):
            anns, dets = [], []
            for j, category in enumerate(("circle", "square")):
                x = 10.0 + 30.0 * j + float(rng.uniform(0, 5))
                box = (x, 5.0, x + 12.0, 20.0)
                anns.append(BoxAnnotation(category, box))
                dets.append(Detection(category, box, 0.99))
            samples.append((f"img{i}", dets, anns))
        result = evaluate_detections(samples, ("circle", "square"))
        assert result.per_class_ap == {"circle": 1.0, "square": 1.0}
        assert result.mean_ap == 1.0

    def test_empty_detections_score_zero(self, rng):
        from dadet.detector import BoxAnnotation

        samples = [
            ("img0", [], [BoxAnnotation("circle", (1.0, 1.0, 9.0, 9.0))]),
        ]
        result = evaluate_detections(samples, ("circle",))
        assert result.mean_ap == 0.0
        assert result.detection_count == 0

    def test_shuffled_accumulation_is_order_independent(self, rng):
        from dadet.detector import BoxAnnotation, Detection

        samples = []
        for i in range(6):
            x = float(rng.uniform(0, 30))
            ann = [BoxAnnotation("circle", (x, 5.0, x + 10.0, 15.0))]
            hit = Detection("circle", (x, 5.0, x + 10.0, 15.0), float(rng.uniform(0.5, 1.0)))
            miss = Detection("square", (0.0, 0.0, 4.0, 4.0), 0.3)
            samples.append((f"img{i}", [hit, miss], ann))
        forward = evaluate_detections(samples, ("circle", "square"))
        backward = evaluate_detections(samples[::-1], ("circle", "square"))
        assert forward.per_class_ap == backward.per_class_ap
        assert forward.mean_ap == backward.mean_ap


class TestApproximatedHardness:
    def test_equal_features_are_maximally_hard(self):
        f = torch.randn(4, 5, 6)
        assert approximated_hardness(f, f.clone()) == 0.0

    def test_constant_offset(self):
        f = torch.randn(3, 4, 4)
        assert approximated_hardness(f, f + 2.0) == pytest.approx(2.0, rel=1e-6)

    def test_matches_elementwise_loop_oracle(self, rng):
        a = torch.tensor(rng.random((2, 3, 3)))
        b = torch.tensor(rng.random((2, 3, 3)))
        expected = float(np.mean([abs(float(x) - float(y))
                                  for x, y in zip(a.reshape(-1), b.reshape(-1))]))
        assert approximated_hardness(a, b) == pytest.approx(expected, rel=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            approximated_hardness(torch.zeros(2, 2), torch.zeros(2, 3))


class TestMineHardExamples:
    @staticmethod
    def _extractor(image: np.ndarray) -> torch.Tensor:
        return torch.tensor(image).float()

    def _pairs(self, offsets):
        pairs = []
        for name, offset in offsets.items():
            src = np.zeros((4, 4, 3), dtype=np.float32)
            pairs.append((name, src, src + offset))
        return pairs

    def test_k_zero_returns_empty(self):
        assert mine_hard_examples(self._pairs({"a": 0.1}), self._extractor, 0) == []

    def test_smallest_ah_first(self):
        records = mine_hard_examples(
            self._pairs({"a": 0.1, "b": 0.5, "c": 0.3}), self._extractor, 2
        )
        assert [r.image_id for r in records] == ["a", "c"]
        assert [r.rank for r in records] == [1, 2]
        assert records[0].ah <= records[1].ah

    def test_k_larger_than_dataset_warns_and_returns_all(self):
        with pytest.warns(UserWarning):
            records = mine_hard_examples(
                self._pairs({"a": 0.1, "b": 0.5}), self._extractor, 5
            )
        assert len(records) == 2

    def test_duplicated_pair_has_equal_scores(self):
        pairs = self._pairs({"a": 0.2}) * 2
        records = mine_hard_examples(pairs, self._extractor, 2)
        assert records[0].ah == records[1].ah

    def test_ordering_is_permutation_consistent_with_ah(self):
        offsets = {f"p{i}": 0.05 * (i + 1) for i in range(5)}
        records = mine_hard_examples(self._pairs(offsets), self._extractor, 5)
        ahs = [r.ah for r in records]
        assert ahs == sorted(ahs)
        assert {r.image_id for r in records} == set(offsets)
