"""Parameter containers: Module, Conv2d, ConvGRU."""

import logging
from typing import Iterator, Optional

import numpy as np

from stream_tracker.functional import GRUParams, conv2d, gru_cell
from stream_tracker.tensor import ContractError, ShapeError, Tensor

logger = logging.getLogger(__name__)


class Module:
    """Base class; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Replace parameter values; names and shapes must match exactly."""
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, param in own.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise ShapeError(f"parameter {name}: expected {param.shape}, got {value.shape}")
            param.data = value.astype(param.dtype, copy=True)
            param.grad = None


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Conv2d(Module):
    """2-D convolution layer with 'same' padding by default."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
        zero_init: bool = False,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if zero_init:
            self.weight = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
            self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        else:
            self.weight = _uniform(rng, shape, fan_in, dtype)
            self.bias = _uniform(rng, (out_channels,), fan_in, dtype)
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvGRU(Module):
    """Convolutional GRU cell (3x3 gates)."""

    def __init__(self, hidden_dim: int, input_dim: int, rng: Optional[np.random.Generator] = None, dtype=np.float32, kernel_size: int = 3):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden_dim = hidden_dim
        self.input_dim = input_dim
        channels = hidden_dim + input_dim
        self.convz = Conv2d(channels, hidden_dim, kernel_size, rng=rng, dtype=dtype)
        self.convr = Conv2d(channels, hidden_dim, kernel_size, rng=rng, dtype=dtype)
        self.convq = Conv2d(channels, hidden_dim, kernel_size, rng=rng, dtype=dtype)

    def params(self) -> GRUParams:
        return GRUParams(
            self.convz.weight, self.convz.bias, self.convr.weight, self.convr.bias, self.convq.weight, self.convq.bias
        )

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        return gru_cell(h, x, self.params())
