"""Unit tests for stream_tracker.metrics."""

import numpy as np
import pytest

from stream_tracker.metrics import (
    FlowErrorAccumulator,
    aggregate,
    dense_to_queries,
    evaluate_sequence,
    flow_metrics,
    tap_metrics,
    zero_flow_baseline,
)
from stream_tracker.models import FlowMetrics
from stream_tracker.tensor import ContractError, ShapeError
from tests.fixtures.sample_data import sample_sequence


def _offset_flow(h: int = 3, w: int = 4, du: float = 3.0, dv: float = 4.0) -> np.ndarray:
    flow = np.zeros((2, h, w), dtype=np.float32)
    flow[0], flow[1] = du, dv
    return flow


class TestFlowMetrics:
    def test_constant_offset(self):
        gt_vis = np.ones((3, 4), dtype=bool)
        gt_vis[0] = False
        m = flow_metrics(_offset_flow(), np.ones((3, 4)), np.zeros((2, 3, 4)), gt_vis)
        assert m.epe_all == pytest.approx(5.0)
        assert m.epe_vis == pytest.approx(5.0)
        assert m.epe_occ == pytest.approx(5.0)
        assert m.oa == pytest.approx(8 / 12)

    def test_exact_prediction(self):
        gt = _offset_flow()
        gt_vis = np.eye(3, 4, dtype=bool)
        m = flow_metrics(gt, gt_vis.astype(np.float64), gt, gt_vis)
        assert m.epe_all == 0.0
        assert m.oa == 1.0

    def test_empty_region_is_none(self):
        m = flow_metrics(np.zeros((2, 2, 2)), np.ones((2, 2)), np.zeros((2, 2, 2)), np.ones((2, 2), dtype=bool))
        assert m.epe_occ is None
        assert m.epe_vis == 0.0

    def test_threshold_is_strict(self):
        m = flow_metrics(np.zeros((2, 1, 1)), np.full((1, 1), 0.5), np.zeros((2, 1, 1)), np.ones((1, 1), dtype=bool))
        assert m.oa == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            flow_metrics(np.zeros((2, 3, 3)), np.ones((3, 3)), np.zeros((2, 3, 4)), np.ones((3, 4), dtype=bool))

    def test_accumulator_weights_by_pixels(self):
        acc = FlowErrorAccumulator()
        vis = np.ones((2, 2), dtype=bool)
        acc.add(np.full((2, 2, 2), 0.0), np.ones((2, 2)), _offset_flow(2, 2, 0.0, 2.0), vis)
        acc.add(np.zeros((2, 2, 6)), np.ones((2, 6)), np.zeros((2, 2, 6)), np.ones((2, 6), dtype=bool))
        assert acc.result().epe_all == pytest.approx(2.0 * 4 / 16)

    def test_empty_accumulator(self):
        with pytest.raises(ContractError):
            FlowErrorAccumulator().result()


class TestTapMetrics:
    def _gt(self, q: int = 1, t: int = 3) -> np.ndarray:
        return np.random.default_rng(0).uniform(0, 10, size=(q, t, 2))

    def test_perfect_tracks(self):
        gt = self._gt(4, 5)
        occluded = np.zeros((4, 5), dtype=bool)
        m = tap_metrics(gt, occluded, gt, occluded)
        assert m.aj == 1.0
        assert m.delta_avg == 1.0
        assert m.oa == 1.0
        assert set(m.jaccard_by_threshold) == {"1", "2", "4", "8", "16"}

    def test_query_frame_is_excluded(self):
        gt = self._gt()
        pred = gt.copy()
        pred[:, 0] += 50.0
        occluded = np.zeros((1, 3), dtype=bool)
        assert tap_metrics(pred, occluded, gt, occluded).aj == 1.0

    def test_three_pixel_miss(self):
        gt = self._gt()
        pred = gt.copy()
        pred[0, 1, 0] += 3.0
        occluded = np.zeros((1, 3), dtype=bool)
        m = tap_metrics(pred, occluded, gt, occluded)
        assert m.within_by_threshold["2"] == pytest.approx(0.5)
        assert m.within_by_threshold["4"] == 1.0
        assert m.delta_avg == pytest.approx(0.8)
        assert m.jaccard_by_threshold["1"] == pytest.approx(1 / 3)
        assert m.aj == pytest.approx(11 / 15)

    def test_visible_prediction_of_occluded_point_is_false_positive(self):
        gt = self._gt()
        gt_occ = np.array([[False, False, True]])
        m = tap_metrics(gt, np.zeros((1, 3), dtype=bool), gt, gt_occ)
        assert m.delta_avg == 1.0
        assert m.aj == pytest.approx(0.5)
        assert m.oa == pytest.approx(0.5)

    def test_undefined_without_visible_points(self):
        gt = self._gt()
        occluded = np.array([[False, True, True]])
        m = tap_metrics(gt, occluded, gt, occluded)
        assert m.delta_avg is None
        assert m.aj is None
        assert m.oa == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tap_metrics(self._gt(1, 3), np.zeros((1, 3), bool), self._gt(2, 3), np.zeros((2, 3), bool))


class TestDenseToQueries:
    def test_constant_flow(self):
        flows = [np.zeros((2, 4, 5)), _offset_flow(4, 5, 1.0, 2.0)]
        vis = [np.ones((4, 5)), np.full((4, 5), 0.2)]
        tracks, occluded = dense_to_queries(flows, vis, np.array([[1.5, 2.0], [0.0, 3.0]]))
        assert tracks.shape == (2, 2, 2)
        np.testing.assert_allclose(tracks[:, 0], [[1.5, 2.0], [0.0, 3.0]])
        np.testing.assert_allclose(tracks[:, 1], [[2.5, 4.0], [1.0, 5.0]])
        np.testing.assert_array_equal(occluded, [[False, True], [False, True]])

    def test_query_outside_frame(self):
        with pytest.raises(ContractError):
            dense_to_queries([np.zeros((2, 4, 4))], [np.ones((4, 4))], np.array([[4.5, 0.0]]))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            dense_to_queries([np.zeros((2, 4, 4))] * 2, [np.ones((4, 4))], np.array([[0.0, 0.0]]))


class TestSequenceEvaluation:
    def test_ground_truth_scores_perfectly(self, sequence):
        vis = [v.astype(np.float32) for v in sequence.gt_vis]
        result = evaluate_sequence(sequence.gt_flow, vis, sequence)
        assert result.frames.epe_all == 0.0
        assert result.frames.oa == 1.0
        assert result.last_frame.epe_all == 0.0

    def test_zero_flow_baseline(self, sequence):
        result = zero_flow_baseline(sequence)
        norms = np.concatenate(
            [np.sqrt((f.astype(np.float64) ** 2).sum(axis=0)).ravel() for f in sequence.gt_flow[1:]]
        )
        assert result.frames.epe_all == pytest.approx(norms.mean())
        assert result.frames.epe_all > 0
        assert result.frames.oa == pytest.approx(np.mean(np.stack(sequence.gt_vis[1:])))

    def test_wrong_length(self, sequence):
        with pytest.raises(ShapeError):
            evaluate_sequence(sequence.gt_flow[:2], sequence.gt_vis[:2], sequence)

    def test_single_frame(self):
        record = sample_sequence(frames=1)
        with pytest.raises(ContractError):
            evaluate_sequence(record.gt_flow, record.gt_vis, record)


class TestAggregate:
    def test_region_means_skip_missing(self):
        a = FlowMetrics(epe_all=1.0, epe_vis=1.0, epe_occ=None, oa=1.0)
        b = FlowMetrics(epe_all=3.0, epe_vis=2.0, epe_occ=4.0, oa=0.5)
        m = aggregate([a, b])
        assert m.epe_all == 2.0
        assert m.epe_occ == 4.0
        assert m.oa == 0.75

    def test_weights(self):
        a = FlowMetrics(epe_all=1.0, oa=1.0)
        b = FlowMetrics(epe_all=4.0, oa=0.0)
        assert aggregate([a, b], weights=[2, 1]).epe_all == pytest.approx(2.0)

    def test_empty(self):
        with pytest.raises(ContractError):
            aggregate([])


class TestReferenceLoops:
    def test_single_point_three_pixel_miss(self):
        gt = np.zeros((1, 2, 2))
        pred = gt.copy()
        pred[0, 1] = [3.0, 0.0]
        occluded = np.zeros((1, 2), dtype=bool)
        assert tap_metrics(pred, occluded, gt, occluded).delta_avg == pytest.approx(0.6)

    def test_flow_metrics_match_pixel_loop(self):
        rng = np.random.default_rng(11)
        pred, gt = rng.normal(size=(2, 5, 6)), rng.normal(size=(2, 5, 6))
        vis_prob = rng.uniform(size=(5, 6))
        gt_vis = rng.uniform(size=(5, 6)) > 0.4
        errs = {"all": [], "vis": [], "occ": []}
        correct = 0
        for y in range(5):
            for x in range(6):
                e = np.hypot(pred[0, y, x] - gt[0, y, x], pred[1, y, x] - gt[1, y, x])
                errs["all"].append(e)
                errs["vis" if gt_vis[y, x] else "occ"].append(e)
                correct += (vis_prob[y, x] > 0.5) == gt_vis[y, x]
        m = flow_metrics(pred, vis_prob, gt, gt_vis)
        assert m.epe_all == pytest.approx(np.mean(errs["all"]), abs=1e-6)
        assert m.epe_vis == pytest.approx(np.mean(errs["vis"]), abs=1e-6)
        assert m.epe_occ == pytest.approx(np.mean(errs["occ"]), abs=1e-6)
        assert m.oa == pytest.approx(correct / 30, abs=1e-6)
