"""Streaming tracker: encode, read/fuse memory, decode, splat/write, per frame.

Every output depends only on the frames seen so far; the state carried
between frames has a fixed size.
"""

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Optional

import numpy as np

from stream_tracker.decoder import DecodeResult, FlowDecoder, upsample4x
from stream_tracker.encoder import ContextEncoder, FeatureEncoder, encode_context, encode_frame, prepare_frame
from stream_tracker.memory import MemoryBank, fuse, project_query, read, sensory_update, write
from stream_tracker.models import ModelConfig
from stream_tracker.nn import Conv2d, ConvGRU, Module
from stream_tracker.splatting import splat
from stream_tracker.tensor import ContractError, ShapeError, Tensor, full, no_grad, zeros

logger = logging.getLogger(__name__)


@dataclass
class TrackerState:
    ref_features: Tensor
    context: Tensor
    bank: Optional[MemoryBank]
    sensory: Optional[Tensor]
    hidden: Tensor
    prev_flow_init: Tensor
    prev_flow_final: Tensor
    prev_vis_logits: Tensor
    t: int
    frame_size: tuple[int, int]

    def detach(self) -> "TrackerState":
        """Same values with autodiff history cut (truncated backprop boundary)."""
        return replace(
            self,
            ref_features=self.ref_features.detach(),
            context=self.context.detach(),
            bank=self.bank.detached() if self.bank is not None else None,
            sensory=self.sensory.detach() if self.sensory is not None else None,
            hidden=self.hidden.detach(),
            prev_flow_init=self.prev_flow_init.detach(),
            prev_flow_final=self.prev_flow_final.detach(),
            prev_vis_logits=self.prev_vis_logits.detach(),
        )


@dataclass
class TrackOutput:
    flow: Tensor
    vis_logits: Tensor
    flow_q: Tensor
    vis_logits_q: Tensor
    per_iter_flows: list[Tensor]

    def flow_array(self) -> np.ndarray:
        return self.flow.data

    def vis_prob(self) -> np.ndarray:
        """H x W visibility probability."""
        return self.vis_logits.sigmoid().data[0]


def warm_start_flow(prev_init: Tensor, prev_final: Tensor) -> Tensor:
    """One-step extrapolation: prev_init + 2 * (prev_final - prev_init)."""
    return prev_init + (prev_final - prev_init) * 2.0


class StreamingTracker(Module):
    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0):
        self.config = config if config is not None else ModelConfig()
        cfg = self.config
        dtype = cfg.np_dtype
        rng = np.random.default_rng(seed)
        self.feature_encoder = FeatureEncoder(cfg.feature_dim, cfg.encoder_widths, norm=True, rng=rng, dtype=dtype)
        self.context_encoder = ContextEncoder(cfg.context_dim, cfg.encoder_widths, rng=rng, dtype=dtype)
        self.query_projector = (
            Conv2d(cfg.feature_dim, cfg.effective_key_dim, 1, rng=rng, dtype=dtype) if cfg.query_projector else None
        )
        self.fusion = (
            Conv2d(2 * cfg.feature_dim, cfg.feature_dim, cfg.fusion_kernel, rng=rng, dtype=dtype)
            if cfg.memory_bank and cfg.feature_fusion
            else None
        )
        self.decoder = FlowDecoder(
            cfg.context_dim,
            cfg.motion_dim,
            cfg.hidden_dim,
            cfg.sensory_dim if cfg.sensory else 0,
            corr_levels=cfg.corr_levels,
            corr_radius=cfg.corr_radius,
            rng=rng,
            dtype=dtype,
        )
        self.sensory_gru = ConvGRU(cfg.sensory_dim, cfg.motion_dim, rng=rng, dtype=dtype) if cfg.sensory else None

    @property
    def dtype(self) -> np.dtype:
        return self.config.np_dtype

    def _encode(self, frame: np.ndarray) -> Tensor:
        return encode_frame(prepare_frame(frame, self.dtype), self.feature_encoder)

    def _outputs(self, flow_q: Tensor, vis_q: Tensor, frame_size: tuple[int, int], flows: list[Tensor]) -> TrackOutput:
        flow, vis = upsample4x(flow_q, vis_q)
        h, w = frame_size
        if flow.shape[1:] != (h, w):
            flow = flow[:, :h, :w]
            vis = vis[:, :h, :w]
        return TrackOutput(flow=flow, vis_logits=vis, flow_q=flow_q, vis_logits_q=vis_q, per_iter_flows=flows)

    def refresh_reference(self, state: TrackerState, first_frame: np.ndarray) -> TrackerState:
        """Re-encode the reference frame so a new backprop window reaches the encoders."""
        padded = prepare_frame(first_frame, self.dtype)
        return replace(
            state,
            ref_features=encode_frame(padded, self.feature_encoder),
            context=encode_context(padded, self.context_encoder),
        )

    def init(self, frame: np.ndarray) -> tuple[TrackerState, TrackOutput]:
        """Start a stream on the reference frame: zero flow, visible everywhere."""
        cfg = self.config
        frame_size = tuple(np.asarray(frame).shape[1:])
        padded = prepare_frame(frame, self.dtype)
        ref = encode_frame(padded, self.feature_encoder)
        context = encode_context(padded, self.context_encoder)
        _, h, w = ref.shape

        bank = None
        if cfg.memory_bank:
            bank = MemoryBank(cfg.memory_length)
            if cfg.seed_bank:
                write(bank, project_query(ref, self.query_projector), ref)

        flow_q = zeros((2, h, w), self.dtype)
        vis_q = full((1, h, w), cfg.init_vis_logit, self.dtype)
        state = TrackerState(
            ref_features=ref,
            context=context,
            bank=bank,
            sensory=zeros((cfg.sensory_dim, h, w), self.dtype) if cfg.sensory else None,
            hidden=zeros((cfg.hidden_dim, h, w), self.dtype),
            prev_flow_init=flow_q,
            prev_flow_final=flow_q,
            prev_vis_logits=vis_q,
            t=1,
            frame_size=frame_size,
        )
        logger.debug("tracker init: frame %s, feature grid %dx%d", frame_size, h, w)
        return state, self._outputs(flow_q, vis_q, frame_size, [])

    def step(self, state: TrackerState, frame: np.ndarray, iters: Optional[int] = None) -> tuple[TrackerState, TrackOutput]:
        """Track the reference pixels into `frame`."""
        cfg = self.config
        frame_size = tuple(np.asarray(frame).shape[1:])
        if frame_size != state.frame_size:
            raise ShapeError(f"frame size {frame_size} differs from reference {state.frame_size}")
        iters = cfg.eval_iters if iters is None else iters

        features = self._encode(frame)
        query = project_query(features, self.query_projector)
        f_hat = features
        if state.bank is not None and len(state.bank) > 0:
            readout = read(state.bank, query)
            f_hat = fuse(features, readout, self.fusion) if self.fusion is not None else readout

        _, h, w = features.shape
        init_flow = warm_start_flow(state.prev_flow_init, state.prev_flow_final) if cfg.warm_flow else zeros((2, h, w), self.dtype)
        init_hidden = state.hidden if cfg.warm_hidden else zeros((cfg.hidden_dim, h, w), self.dtype)
        init_vis = state.prev_vis_logits if cfg.warm_vis else zeros((1, h, w), self.dtype)

        result: DecodeResult = self.decoder.decode(
            f_hat,
            state.ref_features,
            state.context,
            state.sensory,
            init_flow,
            init_vis,
            init_hidden,
            iters,
            detach=cfg.detach_lookup,
        )

        sensory = state.sensory
        if self.sensory_gru is not None and result.motion is not None:
            sensory = sensory_update(state.sensory, result.motion, self.sensory_gru)

        bank = state.bank
        if bank is not None:
            bank = bank.copy()
            value = splat(
                state.ref_features,
                result.flow,
                result.vis_logits.sigmoid(),
                cfg.splat_mode,
                alpha=cfg.softmax_alpha,
            ).value
            write(bank, query, value)

        new_state = replace(
            state,
            bank=bank,
            sensory=sensory,
            hidden=result.hidden,
            prev_flow_init=init_flow,
            prev_flow_final=result.flow,
            prev_vis_logits=result.vis_logits,
            t=state.t + 1,
        )
        logger.debug("tracker step t=%d iters=%d bank=%s", new_state.t, iters, len(bank) if bank else 0)
        return new_state, self._outputs(result.flow, result.vis_logits, frame_size, result.per_iter_flows)

    def stream(self, frames: Iterable[np.ndarray], iters: Optional[int] = None) -> Iterator[TrackOutput]:
        """Yield one output per frame as soon as it is computed (inference, no autodiff)."""
        state = None
        for frame in frames:
            with no_grad():
                if state is None:
                    state, output = self.init(frame)
                else:
                    state, output = self.step(state, frame, iters)
            yield output
        if state is None:
            raise ContractError("track_sequence needs at least one frame")

    def track_sequence(self, frames: list[np.ndarray], iters: Optional[int] = None) -> list[TrackOutput]:
        if len(frames) == 0:
            raise ContractError("track_sequence needs at least one frame")
        return list(self.stream(frames, iters))
