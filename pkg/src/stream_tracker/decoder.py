"""Iterative flow and visibility decoding over an all-pairs correlation pyramid."""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from stream_tracker.functional import avg_pool2d, bilinear_sample, grid_sample, matmul
from stream_tracker.nn import Conv2d, ConvGRU, Module
from stream_tracker.tensor import ShapeError, Tensor, concat

logger = logging.getLogger(__name__)


@dataclass
class CorrelationPyramid:
    levels: list[Tensor]
    geometry: tuple[int, int]


@dataclass
class DecodeResult:
    flow: Tensor
    vis_logits: Tensor
    hidden: Tensor
    motion: Optional[Tensor]
    per_iter_flows: list[Tensor] = field(default_factory=list)


def build_correlation(f_hat: Tensor, f_ref: Tensor, num_levels: int) -> CorrelationPyramid:
    """corr[p, q] = <F_hat(p), F_1(q)> / sqrt(D), pooled over q into `num_levels` levels."""
    if f_hat.shape != f_ref.shape:
        raise ShapeError(f"correlation: feature maps {f_hat.shape} and {f_ref.shape} differ")
    d, h, w = f_hat.shape
    n = h * w
    a = f_hat.reshape(d, n).transpose(1, 0)
    b = f_ref.reshape(d, n)
    corr = (matmul(a, b) * (1.0 / np.sqrt(d))).reshape(n, h, w)
    levels = [corr]
    for level in range(1, num_levels):
        if min(levels[-1].shape[1:]) < 2:
            raise ShapeError(f"correlation: {num_levels} levels do not fit a {h}x{w} feature map")
        levels.append(avg_pool2d(levels[-1], 2))
    return CorrelationPyramid(levels=levels, geometry=(h, w))


def _lookup_offsets(radius: int) -> np.ndarray:
    """(2r+1)^2 offsets as (dx, dy), dy-major."""
    span = np.arange(-radius, radius + 1, dtype=np.float64)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=-1)


def lookup(pyramid: CorrelationPyramid, flow: Tensor, radius: int, detach: bool = True) -> Tensor:
    """Sample every level on a (2r+1)^2 window around (x, y) + flow; levels * (2r+1)^2 channels."""
    h, w = pyramid.geometry
    if flow.shape != (2, h, w):
        raise ShapeError(f"lookup: flow {flow.shape} does not match correlation geometry {(h, w)}")
    n = h * w
    ys, xs = np.mgrid[0:h, 0:w]
    base = np.stack([xs.ravel(), ys.ravel()], axis=-1).reshape(n, 1, 2).astype(flow.dtype)
    delta = _lookup_offsets(radius).reshape(1, -1, 2).astype(flow.dtype)
    if detach or not flow.requires_grad:
        centroid = Tensor(base + flow.data.reshape(2, n).T.reshape(n, 1, 2))
    else:
        centroid = flow.reshape(2, n).transpose(1, 0).reshape(n, 1, 2) + base
    samples = []
    for level, corr in enumerate(pyramid.levels):
        coords = centroid * (1.0 / 2**level) + delta
        samples.append(grid_sample(corr, coords))
    out = concat(samples, axis=1)
    return out.transpose(1, 0).reshape(out.shape[1], h, w)


class MotionEncoder(Module):
    """Two conv branches (correlation; flow + visibility) mixed to D_m channels."""

    def __init__(self, corr_channels: int, motion_dim: int, rng: np.random.Generator, dtype=np.float32):
        c1 = max(motion_dim, 8)
        self.corr1 = Conv2d(corr_channels, c1, 1, rng=rng, dtype=dtype)
        self.corr2 = Conv2d(c1, c1, 3, rng=rng, dtype=dtype)
        self.flow1 = Conv2d(3, c1 // 2, 7, rng=rng, dtype=dtype)
        self.flow2 = Conv2d(c1 // 2, c1 // 2, 3, rng=rng, dtype=dtype)
        self.mix = Conv2d(c1 + c1 // 2, motion_dim, 3, rng=rng, dtype=dtype)

    def __call__(self, flow: Tensor, vis_prob: Tensor, corr_feats: Tensor) -> Tensor:
        c = self.corr2(self.corr1(corr_feats).relu()).relu()
        f = self.flow2(self.flow1(concat([flow, vis_prob], axis=0)).relu()).relu()
        return self.mix(concat([c, f], axis=0)).relu()


class UpdateBlock(Module):
    """ConvGRU on (context, motion, sensory) with separate flow and visibility heads."""

    def __init__(
        self,
        hidden_dim: int,
        context_dim: int,
        motion_dim: int,
        sensory_dim: int,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        self.gru = ConvGRU(hidden_dim, context_dim + motion_dim + sensory_dim, rng=rng, dtype=dtype)
        head = max(hidden_dim, 8)
        self.flow_head1 = Conv2d(hidden_dim, head, 3, rng=rng, dtype=dtype)
        self.flow_head2 = Conv2d(head, 2, 3, rng=rng, dtype=dtype)
        self.vis_head1 = Conv2d(hidden_dim, head, 3, rng=rng, dtype=dtype)
        self.vis_head2 = Conv2d(head, 1, 3, rng=rng, dtype=dtype)

    def __call__(self, hidden: Tensor, context: Tensor, motion: Tensor, sensory: Optional[Tensor]):
        parts = [context, motion] if sensory is None else [context, motion, sensory]
        hidden = self.gru(hidden, concat(parts, axis=0))
        dflow = self.flow_head2(self.flow_head1(hidden).relu())
        dvis = self.vis_head2(self.vis_head1(hidden).relu())
        return dflow, dvis, hidden


def encode_motion(flow: Tensor, vis_prob: Tensor, corr_feats: Tensor, encoder: MotionEncoder) -> Tensor:
    if not (flow.shape[1:] == vis_prob.shape[1:] == corr_feats.shape[1:]):
        raise ShapeError(f"encode_motion: geometries differ {flow.shape} {vis_prob.shape} {corr_feats.shape}")
    return encoder(flow, vis_prob, corr_feats)


def gru_update(hidden: Tensor, context: Tensor, motion: Tensor, sensory: Optional[Tensor], block: UpdateBlock):
    """Returns (delta_flow, delta_vis_logit, hidden')."""
    return block(hidden, context, motion, sensory)


class FlowDecoder(Module):
    def __init__(
        self,
        context_dim: int,
        motion_dim: int,
        hidden_dim: int,
        sensory_dim: int,
        corr_levels: int = 4,
        corr_radius: int = 3,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.corr_levels = corr_levels
        self.corr_radius = corr_radius
        corr_channels = corr_levels * (2 * corr_radius + 1) ** 2
        self.motion_encoder = MotionEncoder(corr_channels, motion_dim, rng, dtype)
        self.update_block = UpdateBlock(hidden_dim, context_dim, motion_dim, sensory_dim, rng, dtype)

    def decode(
        self,
        f_hat: Tensor,
        f_ref: Tensor,
        context: Tensor,
        sensory: Optional[Tensor],
        init_flow: Tensor,
        init_vis_logits: Tensor,
        init_hidden: Tensor,
        iters: int,
        detach: bool = True,
    ) -> DecodeResult:
        """Run `iters` refinement steps; with `detach`, each step restarts from a detached estimate."""
        pyramid = build_correlation(f_hat, f_ref, self.corr_levels)
        flow, vis, hidden = init_flow, init_vis_logits, init_hidden
        motion = None
        flows: list[Tensor] = []
        for _ in range(iters):
            if detach:
                flow = flow.detach()
                vis = vis.detach()
            corr_feats = lookup(pyramid, flow, self.corr_radius, detach=detach)
            motion = encode_motion(flow, vis.sigmoid(), corr_feats, self.motion_encoder)
            dflow, dvis, hidden = gru_update(hidden, context, motion, sensory, self.update_block)
            flow = flow + dflow
            vis = vis + dvis
            flows.append(flow)
        return DecodeResult(flow=flow, vis_logits=vis, hidden=hidden, motion=motion, per_iter_flows=flows)


def upsample_coords(h: int, w: int, scale: int = 4) -> np.ndarray:
    """Quarter-resolution sample positions of every full-resolution pixel center, clamped to the grid."""
    ys, xs = np.mgrid[0 : h * scale, 0 : w * scale].astype(np.float64)
    qx = np.clip((xs + 0.5) / scale - 0.5, 0, w - 1)
    qy = np.clip((ys + 0.5) / scale - 0.5, 0, h - 1)
    return np.stack([qx, qy])


def upsample4x(flow_q: Tensor, vis_logits_q: Tensor) -> tuple[Tensor, Tensor]:
    """Bilinear 4x upsampling; flow values are scaled by 4, logits are not."""
    _, h, w = flow_q.shape
    coords = Tensor(upsample_coords(h, w).astype(flow_q.dtype))
    flow = bilinear_sample(flow_q, coords) * 4.0
    vis = bilinear_sample(vis_logits_q, coords)
    return flow, vis
