import itertools

import numpy as np
import pytest

from treeloop.clusters import Cluster, ClusterSet
from treeloop.evaluate import (ConfusionMatrix, MatchReport, accuracy_metrics,
                               count_report, match_instances, point_iou,
                               write_report)
from treeloop.ratings import RatingClass


def cm_of(rows):
    return ConfusionMatrix(np.asarray(rows))


class TestAccuracy:
    def test_perfect_diagonal(self):
        acc, wacc = accuracy_metrics(cm_of([[5, 0, 0], [0, 7, 0], [0, 0, 3]]))
        assert (acc, wacc) == (1.0, 1.0)

    def test_worked_example(self):
        acc, wacc = accuracy_metrics(cm_of([[8, 2, 0], [0, 5, 5], [0, 0, 10]]))
        assert acc == pytest.approx(23 / 30)
        assert wacc == pytest.approx(np.mean([0.8, 0.5, 1.0]))

    def test_absent_class_averaged_over_present(self):
        acc, wacc = accuracy_metrics(cm_of([[8, 2, 0], [1, 9, 0], [0, 0, 0]]))
        assert wacc == pytest.approx(np.mean([0.8, 0.9]))

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError):
            accuracy_metrics(ConfusionMatrix())

    def test_balanced_matrix_equal_metrics(self):
        acc, wacc = accuracy_metrics(cm_of([[8, 1, 1], [1, 8, 1], [1, 1, 8]]))
        assert acc == pytest.approx(wacc)

    def test_bounds(self, rng):
        for _ in range(50):
            counts = rng.integers(0, 40, (3, 3))
            if counts.sum() == 0:
                continue
            acc, wacc = accuracy_metrics(ConfusionMatrix(counts))
            assert 0.0 <= acc <= 1.0
            assert 0.0 <= wacc <= 1.0

    def test_from_labels(self):
        cm = ConfusionMatrix.from_labels([0, 0, 1, 2], [0, 1, 1, 2])
        assert cm.total == 4
        assert cm.counts[0, 1] == 1


def make_set(n_points, memberships, start_id=1):
    cs = ClusterSet(n_points)
    for offset, idx in enumerate(memberships):
        cs.add(Cluster(id=start_id + offset,
                       point_indices=np.asarray(idx, dtype=np.int64),
                       apex_index=int(idx[0]), centroid=(0.0, 0.0, 0.0)))
    return cs


class TestMatching:
    def test_identical_sets_all_ones(self):
        gt = make_set(100, [range(0, 30), range(40, 70)])
        pred = make_set(100, [range(0, 30), range(40, 70)])
        report = match_instances(gt, pred)
        assert all(iou == 1.0 for _, _, iou in report.pairs)
        assert report.detection_rate == 1.0

    def test_disjoint_sets_zero(self):
        gt = make_set(100, [range(0, 30)])
        pred = make_set(100, [range(50, 80)])
        report = match_instances(gt, pred)
        assert report.pairs == [(1, None, 0.0)]
        assert report.detection_rate == 0.0

    def test_each_side_matched_once(self):
        gt = make_set(100, [range(0, 30), range(30, 60)])
        pred = make_set(100, [range(0, 45)])   # overlaps both gt instances
        report = match_instances(gt, pred)
        matched = [p for _, p, _ in report.pairs if p is not None]
        assert len(matched) == len(set(matched)) == 1

    def test_greedy_matches_bruteforce_on_random_scenes(self, rng):
        # Oracle: exhaustive assignment over all permutations. Scenes model
        # segmentation outputs (instances are point runs along an ordering,
        # predictions jitter / split / merge the true boundaries); greedy has
        # no quality bound for arbitrary adversarial overlap patterns.
        def cuts_to_parts(cuts, n):
            edges = [0] + sorted(cuts) + [n]
            return [np.arange(a, b) for a, b in zip(edges, edges[1:]) if b > a]

        for trial in range(120):
            n = 60
            n_gt = int(rng.integers(1, 7))
            gt_cuts = sorted(rng.choice(np.arange(5, n - 5), size=n_gt - 1,
                                        replace=False).tolist()) if n_gt > 1 else []
            pred_cuts = [int(np.clip(c + rng.integers(-4, 5), 1, n - 1))
                         for c in gt_cuts]
            if rng.uniform() < 0.4 and pred_cuts:
                pred_cuts.pop(rng.integers(len(pred_cuts)))   # merge two
            if rng.uniform() < 0.4:
                pred_cuts.append(int(rng.integers(2, n - 2)))  # split one
            pred_cuts = sorted(set(pred_cuts))
            gt = make_set(n, cuts_to_parts(gt_cuts, n))
            pred = make_set(n, cuts_to_parts(pred_cuts, n))

            report = match_instances(gt, pred)
            greedy_total = sum(iou for _, p, iou in report.pairs if p is not None)

            gt_ids = gt.ids()
            pred_ids = pred.ids()
            iou = {(g, q): point_iou(gt[g].point_indices, pred[q].point_indices)
                   for g in gt_ids for q in pred_ids}
            best = 0.0
            k = min(len(gt_ids), len(pred_ids))
            for gsub in itertools.permutations(gt_ids, k):
                for qsub in itertools.combinations(pred_ids, k):
                    total = sum(iou[(g, q)] for g, q in zip(gsub, qsub))
                    best = max(best, total)
            assert greedy_total >= 0.9 * best - 1e-12, f"trial {trial}"

    def test_greedy_equals_optimal_when_unambiguous(self):
        gt = make_set(90, [range(0, 30), range(30, 60), range(60, 90)])
        pred = make_set(90, [range(0, 28), range(30, 55), range(60, 85)])
        report = match_instances(gt, pred)
        assert [p for _, p, _ in report.pairs] == [1, 2, 3]

    def test_iou_symmetric(self, rng):
        a = np.sort(rng.choice(100, 20, replace=False))
        b = np.sort(rng.choice(100, 30, replace=False))
        assert point_iou(a, b) == point_iou(b, a)


class TestCountReport:
    def test_all_single(self):
        pred = make_set(50, [range(0, 10), range(10, 20), range(20, 30),
                             range(30, 40), range(40, 50)])
        ratings = {cid: int(RatingClass.SINGLE) for cid in pred.ids()}
        out = count_report(pred, ratings, gt_count=5)
        assert (out["predicted"], out["ground_truth"]) == (5, 5)

    def test_nontree_filtered(self):
        pred = make_set(30, [range(0, 10), range(10, 20), range(20, 30)])
        ratings = {1: int(RatingClass.SINGLE), 2: int(RatingClass.NON_TREE),
                   3: int(RatingClass.NON_TREE)}
        out = count_report(pred, ratings, gt_count=3)
        assert out["predicted"] == 1

    def test_filter_never_increases(self, rng):
        pred = make_set(40, [range(0, 10), range(10, 20)])
        ratings = {1: int(RatingClass.SINGLE), 2: int(RatingClass.MULTI)}
        out = count_report(pred, ratings, gt_count=2)
        assert out["predicted"] <= len(pred)


def test_write_report(tmp_path):
    report = MatchReport(pairs=[(1, 2, 0.8), (2, None, 0.0)])
    write_report(tmp_path / "out", report, counts=[{"category": "crowded",
                                                    "predicted": 1,
                                                    "ground_truth": 2,
                                                    "ratio": 0.5}])
    assert (tmp_path / "out" / "summary.json").exists()
    csv_text = (tmp_path / "out" / "instance_iou.csv").read_text()
    assert "gt_id,pred_id,iou" in csv_text
    assert "1,2,0.800000" in csv_text
