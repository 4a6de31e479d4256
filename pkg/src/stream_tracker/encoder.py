"""Residual convolutional encoders producing 1/4-resolution features."""

import logging
from typing import Optional

import numpy as np

from stream_tracker.functional import instance_norm
from stream_tracker.nn import Conv2d, Module
from stream_tracker.tensor import DomainError, ShapeError, Tensor

logger = logging.getLogger(__name__)

STRIDE = 4


def pad_to_multiple(frame: np.ndarray, multiple: int = STRIDE) -> np.ndarray:
    """Reflection-pad a 3 x H x W frame on the bottom/right up to a multiple of `multiple`."""
    _, h, w = frame.shape
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return frame
    return np.pad(frame, ((0, 0), (0, pad_h), (0, pad_w)), mode="reflect")


def min_frame_size(corr_levels: int) -> int:
    """Smallest frame side whose padded 1/4 feature map still holds `corr_levels` pooled levels."""
    return max(STRIDE, STRIDE * (2 ** (corr_levels - 1) - 1) + 1)


def prepare_frame(frame: np.ndarray, dtype=np.float32) -> Tensor:
    """Validate a 3 x H x W frame in [0, 1] and pad it to the encoder stride."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ShapeError(f"frame must be 3 x H x W, got {frame.shape}")
    if frame.shape[1] < STRIDE or frame.shape[2] < STRIDE:
        raise ShapeError(f"frame {frame.shape} smaller than the encoder stride {STRIDE}")
    if not np.all(np.isfinite(frame)) or frame.min() < 0 or frame.max() > 1:
        raise DomainError("frame values must lie in [0, 1]")
    return Tensor(pad_to_multiple(frame).astype(dtype))


class ResidualBlock(Module):
    def __init__(self, channels: int, norm: bool, rng: np.random.Generator, dtype):
        self.conv1 = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)
        self.norm = norm

    def _norm(self, x: Tensor) -> Tensor:
        return instance_norm(x) if self.norm else x

    def __call__(self, x: Tensor) -> Tensor:
        y = self._norm(self.conv1(x)).relu()
        y = self._norm(self.conv2(y))
        return (x + y).relu()


class FeatureEncoder(Module):
    """7x7/2 stem, two residual blocks, 3x3/2 transition, two residual blocks, 1x1 projection."""

    def __init__(
        self,
        out_dim: int,
        widths: tuple[int, int] = (64, 96),
        norm: bool = True,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        w0, w1 = widths
        self.norm = norm
        self.stem = Conv2d(3, w0, 7, stride=2, padding=3, rng=rng, dtype=dtype)
        self.stage1 = [ResidualBlock(w0, norm, rng, dtype), ResidualBlock(w0, norm, rng, dtype)]
        self.down = Conv2d(w0, w1, 3, stride=2, padding=1, rng=rng, dtype=dtype)
        self.stage2 = [ResidualBlock(w1, norm, rng, dtype), ResidualBlock(w1, norm, rng, dtype)]
        self.proj = Conv2d(w1, out_dim, 1, rng=rng, dtype=dtype)

    def _norm(self, x: Tensor) -> Tensor:
        return instance_norm(x) if self.norm else x

    def __call__(self, frame: Tensor) -> Tensor:
        x = self._norm(self.stem(frame)).relu()
        for block in self.stage1:
            x = block(x)
        x = self._norm(self.down(x)).relu()
        for block in self.stage2:
            x = block(x)
        return self.proj(x)


class ContextEncoder(FeatureEncoder):
    """Same layout as FeatureEncoder, no normalization."""

    def __init__(self, out_dim: int, widths: tuple[int, int] = (64, 96), rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__(out_dim, widths, norm=False, rng=rng, dtype=dtype)


def encode_frame(frame: Tensor, encoder: FeatureEncoder) -> Tensor:
    """F_t at 1/4 resolution (D x H/4 x W/4)."""
    if frame.shape[1] % STRIDE or frame.shape[2] % STRIDE:
        raise ShapeError(f"frame {frame.shape} is not padded to a multiple of {STRIDE}")
    features = encoder(frame)
    logger.debug("encode_frame: %s -> %s", frame.shape, features.shape)
    return features


def encode_context(frame: Tensor, encoder: ContextEncoder) -> Tensor:
    """f_c of the reference frame."""
    return encode_frame(frame, encoder)
