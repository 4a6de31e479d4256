"""Flow and point-tracking accuracy metrics."""

import logging
from typing import Optional, Sequence

import numpy as np

from stream_tracker.functional import bilinear_lookup
from stream_tracker.models import FlowMetrics, SequenceEvaluation, TapMetrics
from stream_tracker.tensor import ContractError, ShapeError

logger = logging.getLogger(__name__)

VIS_THRESHOLD = 0.5
TAP_THRESHOLDS = (1, 2, 4, 8, 16)


class FlowErrorAccumulator:
    """Pixel-weighted running sums for EPE over regions and occlusion accuracy."""

    def __init__(self):
        self.err_sum = {"all": 0.0, "vis": 0.0, "occ": 0.0}
        self.count = {"all": 0, "vis": 0, "occ": 0}
        self.correct = 0

    def add(self, pred_flow: np.ndarray, pred_vis_prob: np.ndarray, gt_flow: np.ndarray, gt_vis: np.ndarray) -> None:
        if pred_flow.shape != gt_flow.shape or pred_vis_prob.shape != gt_vis.shape or gt_flow.shape[1:] != gt_vis.shape:
            raise ShapeError(
                f"flow metrics: prediction {pred_flow.shape}/{pred_vis_prob.shape} "
                f"vs ground truth {gt_flow.shape}/{gt_vis.shape}"
            )
        gt_vis = np.asarray(gt_vis, dtype=bool)
        err = np.sqrt(((pred_flow.astype(np.float64) - gt_flow) ** 2).sum(axis=0))
        for region, mask in (("all", np.ones_like(gt_vis)), ("vis", gt_vis), ("occ", ~gt_vis)):
            self.err_sum[region] += float(err[mask].sum())
            self.count[region] += int(mask.sum())
        self.correct += int(((pred_vis_prob > VIS_THRESHOLD) == gt_vis).sum())

    def _mean(self, region: str) -> Optional[float]:
        n = self.count[region]
        return self.err_sum[region] / n if n else None

    def result(self) -> FlowMetrics:
        if self.count["all"] == 0:
            raise ContractError("flow metrics: no pixels accumulated")
        return FlowMetrics(
            epe_all=self._mean("all"),
            epe_vis=self._mean("vis"),
            epe_occ=self._mean("occ"),
            oa=self.correct / self.count["all"],
        )


def flow_metrics(pred_flow: np.ndarray, pred_vis_prob: np.ndarray, gt_flow: np.ndarray, gt_vis: np.ndarray) -> FlowMetrics:
    """EPE over all / visible / occluded pixels and occlusion accuracy for one frame."""
    acc = FlowErrorAccumulator()
    acc.add(pred_flow, pred_vis_prob, gt_flow, gt_vis)
    return acc.result()


def tap_metrics(
    pred_tracks: np.ndarray,
    pred_occluded: np.ndarray,
    gt_tracks: np.ndarray,
    gt_occluded: np.ndarray,
    thresholds: Sequence[float] = TAP_THRESHOLDS,
    query_frame: int = 0,
) -> TapMetrics:
    """Position accuracy and Average Jaccard for Q x T tracks (query frame excluded).

    A point predicted visible counts as a false positive when it is occluded
    in ground truth or lies outside the threshold.
    """
    if pred_tracks.shape != gt_tracks.shape or pred_occluded.shape != gt_occluded.shape:
        raise ShapeError(f"tap metrics: prediction {pred_tracks.shape} vs ground truth {gt_tracks.shape}")
    if pred_tracks.shape[:2] != gt_occluded.shape or pred_tracks.shape[-1] != 2:
        raise ShapeError(f"tap metrics: tracks {pred_tracks.shape} and occlusion {gt_occluded.shape} disagree")
    q, t = gt_occluded.shape
    evaluated = np.ones((q, t), dtype=bool)
    evaluated[:, query_frame] = False

    visible = ~np.asarray(gt_occluded, dtype=bool)
    pred_visible = ~np.asarray(pred_occluded, dtype=bool)
    scored = int(evaluated.sum())
    oa = float(((visible == pred_visible) & evaluated).sum() / scored) if scored else None

    dist_sq = ((pred_tracks.astype(np.float64) - gt_tracks) ** 2).sum(axis=-1)
    gt_positives = int((visible & evaluated).sum())
    within_fracs: dict[str, Optional[float]] = {}
    jaccards: dict[str, Optional[float]] = {}
    for delta in thresholds:
        within = dist_sq < delta * delta
        key = f"{delta:g}"
        within_fracs[key] = float((within & visible & evaluated).sum() / gt_positives) if gt_positives else None
        true_pos = int((within & visible & pred_visible & evaluated).sum())
        false_pos = int((pred_visible & (~visible | ~within) & evaluated).sum())
        denom = gt_positives + false_pos
        jaccards[key] = true_pos / denom if denom else None

    def _mean(values: dict[str, Optional[float]]) -> Optional[float]:
        present = [v for v in values.values() if v is not None]
        return float(np.mean(present)) if len(present) == len(values) and present else None

    return TapMetrics(
        aj=_mean(jaccards),
        delta_avg=_mean(within_fracs),
        oa=oa,
        jaccard_by_threshold=jaccards,
        within_by_threshold=within_fracs,
    )


def dense_to_queries(flows: Sequence[np.ndarray], vis_probs: Sequence[np.ndarray], queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample dense long-range flow at first-frame query points.

    Returns tracks (Q x T x 2) and occlusion flags (Q x T).
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    if len(flows) != len(vis_probs) or not flows:
        raise ShapeError(f"dense_to_queries: {len(flows)} flow frames vs {len(vis_probs)} visibility frames")
    _, h, w = flows[0].shape
    qx, qy = queries[:, 0], queries[:, 1]
    if np.any(qx < 0) or np.any(qx > w - 1) or np.any(qy < 0) or np.any(qy > h - 1):
        raise ContractError(f"dense_to_queries: query outside the {w}x{h} frame")
    tracks = np.zeros((len(queries), len(flows), 2))
    occluded = np.zeros((len(queries), len(flows)), dtype=bool)
    for t, (flow, vis) in enumerate(zip(flows, vis_probs)):
        sampled = bilinear_lookup(flow, qx, qy)
        tracks[:, t, 0] = qx + sampled[0]
        tracks[:, t, 1] = qy + sampled[1]
        occluded[:, t] = bilinear_lookup(np.asarray(vis, dtype=np.float64)[None], qx, qy)[0] <= VIS_THRESHOLD
    return tracks, occluded


def evaluate_sequence(pred_flows: Sequence[np.ndarray], pred_vis: Sequence[np.ndarray], record, start: int = 1) -> SequenceEvaluation:
    """Pixel-weighted metrics over frames start..T-1 plus the last frame alone."""
    if len(pred_flows) != len(record.gt_flow) or len(pred_vis) != len(record.gt_vis):
        raise ShapeError(f"evaluate_sequence: {len(pred_flows)} predictions for {len(record.gt_flow)} frames")
    if len(pred_flows) <= start:
        raise ContractError(f"evaluate_sequence: need more than {start} frames")
    acc = FlowErrorAccumulator()
    for t in range(start, len(pred_flows)):
        acc.add(pred_flows[t], pred_vis[t], record.gt_flow[t], record.gt_vis[t])
    last = flow_metrics(pred_flows[-1], pred_vis[-1], record.gt_flow[-1], record.gt_vis[-1])
    return SequenceEvaluation(frames=acc.result(), last_frame=last)


def zero_flow_baseline(record, start: int = 1) -> SequenceEvaluation:
    """Metrics of predicting zero flow and full visibility everywhere."""
    h, w = record.gt_vis[0].shape
    zeros = [np.zeros((2, h, w), dtype=np.float32)] * len(record)
    ones = [np.ones((h, w), dtype=np.float32)] * len(record)
    return evaluate_sequence(zeros, ones, record, start=start)


def aggregate(evaluations: Sequence[FlowMetrics], weights: Optional[Sequence[int]] = None) -> FlowMetrics:
    """Mean of per-sequence metrics (region means skip sequences where the region is empty)."""
    if not evaluations:
        raise ContractError("aggregate: no evaluations")
    weights = np.asarray(weights if weights is not None else [1] * len(evaluations), dtype=np.float64)

    def _avg(name: str) -> Optional[float]:
        pairs = [(getattr(e, name), wt) for e, wt in zip(evaluations, weights) if getattr(e, name) is not None]
        if not pairs:
            return None
        vals, wts = zip(*pairs)
        return float(np.average(vals, weights=wts))

    return FlowMetrics(epe_all=_avg("epe_all"), epe_vis=_avg("epe_vis"), epe_occ=_avg("epe_occ"), oa=_avg("oa"))
