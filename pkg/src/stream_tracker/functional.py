"""Differentiable operators used by the model.

Spatial tensors are channel-first (C x H x W). Coordinates are (x, y) with x
along columns, y along rows and pixel centers at integer positions.
"""

import logging
from typing import NamedTuple, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from stream_tracker.tensor import ContractError, DomainError, ShapeError, Tensor, concat

logger = logging.getLogger(__name__)

INSTANCE_NORM_EPS = 1e-5


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m x k) @ (k x n)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return Tensor.from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_lastdim: last axis must be non-empty, got shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise DomainError("softmax_lastdim: non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(y, (x,), backward, "softmax")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (C_in x H x W) with w (C_out x C_in x k x k).

    Output size is floor((H + 2p - k) / stride) + 1 per axis.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected x 3-D and w 4-D, got {x.shape} and {w.shape}")
    c_out, c_in, kh, kw = w.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match weight {w.shape}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {w.shape}")
    if padding < 0 or stride < 1:
        raise ContractError(f"conv2d: invalid stride={stride} padding={padding}")
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match weight {w.shape}")
    k = kh
    _, h, wd = x.shape
    h_out = conv_output_size(h, k, stride, padding)
    w_out = conv_output_size(wd, k, stride, padding)
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {k} stride {stride} padding {padding}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :h_out, :w_out]
    out = np.tensordot(w.data, cols, axes=([1, 2, 3], [0, 3, 4]))
    if b is not None:
        out = out + b.data[:, None, None]
    out = out.astype(x.dtype, copy=False)
    weight = w.data

    def backward(g: np.ndarray):
        gw = np.tensordot(g, cols, axes=([1, 2], [1, 2]))
        gcols = np.tensordot(weight, g, axes=([0], [0]))
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        span_h = stride * (h_out - 1) + 1
        span_w = stride * (w_out - 1) + 1
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + span_h : stride, j : j + span_w : stride] += gcols[:, i, j]
        gx = gxp[:, padding : padding + h, padding : padding + wd] if padding else gxp
        gb = g.sum(axis=(1, 2)) if b is not None else None
        return (gx, gw, gb)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.from_op(out, parents, backward, "conv2d")


def avg_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping average pooling over the last two axes; trailing rows/cols are cropped."""
    *lead, h, w = x.shape
    ho, wo = h // kernel, w // kernel
    if ho < 1 or wo < 1:
        raise ShapeError(f"avg_pool2d: input {x.shape} smaller than kernel {kernel}")
    cropped = x.data[..., : ho * kernel, : wo * kernel]
    out = cropped.reshape(*lead, ho, kernel, wo, kernel).mean(axis=(-3, -1))
    scale = 1.0 / (kernel * kernel)

    def backward(g: np.ndarray):
        up = np.repeat(np.repeat(g, kernel, axis=-2), kernel, axis=-1) * scale
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., : ho * kernel, : wo * kernel] = up
        return (full,)

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x,), backward, "avg_pool2d")


def instance_norm(x: Tensor, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """Per-channel spatial normalization without affine terms."""
    mean = x.mean(axis=(1, 2), keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=(1, 2), keepdims=True)
    return centered / (var + eps) ** 0.5


class _Taps(NamedTuple):
    """Bilinear neighbors of a set of continuous points."""

    xs: list[np.ndarray]
    ys: list[np.ndarray]
    weights: list[np.ndarray]
    dwdx: list[np.ndarray]
    dwdy: list[np.ndarray]


def _bilinear_taps(x: np.ndarray, y: np.ndarray) -> _Taps:
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    return _Taps(
        xs=[x0, x0 + 1, x0, x0 + 1],
        ys=[y0, y0, y0 + 1, y0 + 1],
        weights=[(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy],
        dwdx=[-(1 - fy), 1 - fy, -fy, fy],
        dwdy=[-(1 - fx), -fx, 1 - fx, fx],
    )


def grid_sample(grid: Tensor, coords: Tensor) -> Tensor:
    """Sample N single-channel grids (N x H x W) at K points each.

    `coords` is (M x K x 2) with M equal to 1 (shared points) or N. Samples
    outside the grid read zero. Gradients flow to both grid and coords.
    """
    if grid.ndim != 3 or coords.ndim != 3 or coords.shape[2] != 2:
        raise ShapeError(f"grid_sample: expected grid N x H x W and coords M x K x 2, got {grid.shape} and {coords.shape}")
    n, h, w = grid.shape
    m, k, _ = coords.shape
    if m not in (1, n):
        raise ShapeError(f"grid_sample: coords batch {coords.shape} incompatible with grid {grid.shape}")
    cx = np.broadcast_to(coords.data[..., 0], (n, k))
    cy = np.broadcast_to(coords.data[..., 1], (n, k))
    taps = _bilinear_taps(cx, cy)
    flat = grid.data.reshape(n, h * w)
    rows = np.arange(n)[:, None]

    values, valids, indices = [], [], []
    out = np.zeros((n, k), dtype=grid.dtype)
    for xi, yi, wt in zip(taps.xs, taps.ys, taps.weights):
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
        v = flat[rows, idx] * valid
        out += wt * v
        values.append(v)
        valids.append(valid)
        indices.append(idx)

    def backward(g: np.ndarray):
        ggrid = np.zeros((n, h * w), dtype=g.dtype)
        gx = np.zeros((n, k), dtype=g.dtype)
        gy = np.zeros((n, k), dtype=g.dtype)
        row_ids = np.broadcast_to(rows, (n, k))
        for wt, v, valid, idx, dx, dy in zip(taps.weights, values, valids, indices, taps.dwdx, taps.dwdy):
            np.add.at(ggrid, (row_ids, idx), g * wt * valid)
            gx += g * v * dx
            gy += g * v * dy
        gcoords = np.stack([gx, gy], axis=-1)
        if m == 1:
            gcoords = gcoords.sum(axis=0, keepdims=True)
        return (ggrid.reshape(n, h, w), gcoords)

    return Tensor.from_op(out, (grid, coords), backward, "grid_sample")


def bilinear_sample(grid: Tensor, coords: Tensor) -> Tensor:
    """Sample a C x H x W grid at a 2 x H' x W' field of (x, y) coordinates."""
    if coords.ndim != 3 or coords.shape[0] != 2:
        raise ShapeError(f"bilinear_sample: coords must be 2 x H' x W', got {coords.shape}")
    c = grid.shape[0]
    _, ho, wo = coords.shape
    points = coords.reshape(2, ho * wo).transpose(1, 0).reshape(1, ho * wo, 2)
    return grid_sample(grid, points).reshape(c, ho, wo)


def bilinear_lookup(grid: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Untracked bilinear sampling of a C x H x W array at points (x, y); zero outside."""
    c, h, w = grid.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    taps = _bilinear_taps(x, y)
    out = np.zeros((c,) + x.shape, dtype=np.float64)
    for xi, yi, wt in zip(taps.xs, taps.ys, taps.weights):
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        out += grid[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)] * (wt * valid)
    return out


class GRUParams(NamedTuple):
    wz: Tensor
    bz: Tensor
    wr: Tensor
    br: Tensor
    wq: Tensor
    bq: Tensor


def gru_cell(h: Tensor, x: Tensor, params: GRUParams) -> Tensor:
    """Convolutional GRU update of hidden state h with input x."""
    if h.ndim != 3 or x.ndim != 3 or h.shape[1:] != x.shape[1:]:
        raise ShapeError(f"gru_cell: spatial dims of hidden {h.shape} and input {x.shape} differ")
    expected = h.shape[0] + x.shape[0]
    for w in (params.wz, params.wr, params.wq):
        if w.shape[0] != h.shape[0] or w.shape[1] != expected:
            raise ShapeError(f"gru_cell: weight {w.shape} does not fit hidden {h.shape} and input {x.shape}")
    pad = params.wz.shape[-1] // 2
    hx = concat([h, x], axis=0)
    z = conv2d(hx, params.wz, params.bz, padding=pad).sigmoid()
    r = conv2d(hx, params.wr, params.br, padding=pad).sigmoid()
    q = conv2d(concat([r * h, x], axis=0), params.wq, params.bq, padding=pad).tanh()
    return (1 - z) * h + z * q
