"""Forward warping (splatting) of feature maps by a flow field.

Each source pixel scatters into the four integer targets around its
displaced position with a bilinear kernel. Contributions landing outside
the grid are dropped. Normalized modes divide by the splatted weight and
fill holes (weight < HOLE_EPS) with zero.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from stream_tracker.models import SplatMode
from stream_tracker.tensor import DomainError, ShapeError, Tensor, concat, where

logger = logging.getLogger(__name__)

HOLE_EPS = 1e-4
DEFAULT_SOFTMAX_ALPHA = 10.0


@dataclass
class SplatResult:
    value: Tensor
    weight: Tensor
    hole_mask: np.ndarray


def _scatter_taps(flow: np.ndarray):
    """Target indices, validity and kernel weights (with derivatives) per source pixel.

    Kernel kinks use the left limit: an exact integer target x gets taps
    (x - 1, x) with fractional part 1.
    """
    _, h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx = xs + flow[0].astype(np.float64)
    ty = ys + flow[1].astype(np.float64)
    x0 = np.ceil(tx) - 1
    y0 = np.ceil(ty) - 1
    fx = tx - x0
    fy = ty - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    taps = []
    for dx, dy, wt, dwdx, dwdy in (
        (0, 0, (1 - fx) * (1 - fy), -(1 - fy), -(1 - fx)),
        (1, 0, fx * (1 - fy), 1 - fy, -fx),
        (0, 1, (1 - fx) * fy, -fy, 1 - fx),
        (1, 1, fx * fy, fy, fx),
    ):
        xi = x0 + dx
        yi = y0 + dy
        valid = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)).ravel()
        idx = (np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)).ravel()
        taps.append((idx, valid, wt.ravel(), dwdx.ravel(), dwdy.ravel()))
    return taps


def splat_sum(src: Tensor, flow: Tensor) -> Tensor:
    """Raw bilinear scatter of src (C x H x W) along flow (2 x H x W)."""
    if src.ndim != 3 or flow.ndim != 3 or flow.shape[0] != 2 or src.shape[1:] != flow.shape[1:]:
        raise ShapeError(f"splat: source {src.shape} and flow {flow.shape} are incompatible")
    c, h, w = src.shape
    taps = _scatter_taps(flow.data)
    src_flat = src.data.reshape(c, h * w)
    out = np.zeros((h * w, c), dtype=np.float64)
    for idx, valid, wt, _, _ in taps:
        np.add.at(out, idx[valid], (src_flat[:, valid] * wt[valid]).T)
    out = out.T.reshape(c, h, w).astype(src.dtype)

    def backward(g: np.ndarray):
        g_flat = g.reshape(c, h * w)
        gsrc = np.zeros((c, h * w), dtype=np.float64)
        gfx = np.zeros(h * w, dtype=np.float64)
        gfy = np.zeros(h * w, dtype=np.float64)
        for idx, valid, wt, dwdx, dwdy in taps:
            gathered = g_flat[:, idx] * valid
            gsrc += gathered * wt
            inner = (gathered * src_flat).sum(axis=0)
            gfx += inner * dwdx
            gfy += inner * dwdy
        gflow = np.stack([gfx, gfy]).reshape(2, h, w).astype(flow.dtype)
        return (gsrc.reshape(c, h, w).astype(src.dtype), gflow)

    return Tensor.from_op(out, (src, flow), backward, "splat_sum")


def _normalize(numerator: Tensor, denominator: Tensor) -> tuple[Tensor, np.ndarray]:
    filled = denominator.data >= HOLE_EPS
    safe = where(filled, denominator, 1.0)
    value = where(filled, numerator / safe, 0.0)
    return value, ~filled[0]


def _ones_like_plane(src: Tensor) -> Tensor:
    return Tensor(np.ones((1,) + src.shape[1:], dtype=src.dtype))


def _check_vis(vis: Tensor, src: Tensor) -> None:
    if vis.shape != (1,) + src.shape[1:]:
        raise ShapeError(f"splat: visibility {vis.shape} does not match source {src.shape}")
    if np.any(vis.data < -1e-6) or np.any(vis.data > 1 + 1e-6):
        raise DomainError("splat: visibility must lie in [0, 1]")


def _weighted_splat(src: Tensor, flow: Tensor, importance: Tensor) -> SplatResult:
    stacked = splat_sum(concat([src * importance, importance], axis=0), flow)
    numerator = stacked[:-1]
    denominator = stacked[-1:]
    value, holes = _normalize(numerator, denominator)
    return SplatResult(value=value, weight=denominator, hole_mask=holes)


def summation_splat(src: Tensor, flow: Tensor) -> SplatResult:
    """Unnormalized splat; weight is the scattered unit mass."""
    stacked = splat_sum(concat([src, _ones_like_plane(src)], axis=0), flow)
    weight = stacked[-1:]
    return SplatResult(value=stacked[:-1], weight=weight, hole_mask=weight.data[0] < HOLE_EPS)


def average_splat(src: Tensor, flow: Tensor) -> SplatResult:
    return _weighted_splat(src, flow, _ones_like_plane(src))


def visibility_splat(src: Tensor, flow: Tensor, vis: Tensor) -> SplatResult:
    """splat(vis * src) / splat(vis)."""
    _check_vis(vis, src)
    return _weighted_splat(src, flow, vis)


def softmax_splat(src: Tensor, flow: Tensor, vis: Tensor, alpha: float = DEFAULT_SOFTMAX_ALPHA) -> SplatResult:
    """splat(exp(alpha * vis) * src) / splat(exp(alpha * vis))."""
    _check_vis(vis, src)
    return _weighted_splat(src, flow, (vis * alpha).exp())


def splat(
    src: Tensor,
    flow: Tensor,
    vis: Optional[Tensor],
    mode: SplatMode,
    alpha: float = DEFAULT_SOFTMAX_ALPHA,
) -> SplatResult:
    mode = SplatMode(mode)
    if mode is SplatMode.SUMMATION:
        return summation_splat(src, flow)
    if mode is SplatMode.AVERAGE:
        return average_splat(src, flow)
    if vis is None:
        vis = _ones_like_plane(src)
    if mode is SplatMode.LINEAR:
        return visibility_splat(src, flow, vis)
    return softmax_splat(src, flow, vis, alpha)
