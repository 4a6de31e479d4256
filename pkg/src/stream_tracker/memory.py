"""Streaming memory bank, attention readout, residual fusion and sensory memory."""

import json
import logging
from collections import deque
from pathlib import Path
from typing import Optional, Union

import numpy as np

from stream_tracker.formats import read_tensor_file, write_tensor_file
from stream_tracker.functional import matmul, softmax_lastdim
from stream_tracker.models import ConfigError
from stream_tracker.nn import Conv2d, ConvGRU
from stream_tracker.tensor import ContractError, ShapeError, Tensor, concat

logger = logging.getLogger(__name__)

SNAPSHOT_MANIFEST = "manifest.json"


class MemoryBank:
    """Paired FIFO queues of keys (n x D_k) and values (n x D_v), n = h * w.

    Pushing at capacity evicts the oldest pair.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"memory capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._keys: deque[Tensor] = deque(maxlen=capacity)
        self._values: deque[Tensor] = deque(maxlen=capacity)
        self.geometry: Optional[tuple[int, int]] = None

    def __len__(self) -> int:
        return len(self._keys)

    @property
    def keys(self) -> tuple[Tensor, ...]:
        return tuple(self._keys)

    @property
    def values(self) -> tuple[Tensor, ...]:
        return tuple(self._values)

    def push(self, key: Tensor, value_rows: Tensor, geometry: tuple[int, int]) -> None:
        if self.geometry is None:
            self.geometry = geometry
        elif geometry != self.geometry:
            raise ShapeError(f"memory write: geometry {geometry} differs from bank geometry {self.geometry}")
        if self._keys:
            if key.shape != self._keys[0].shape or value_rows.shape != self._values[0].shape:
                raise ShapeError(
                    f"memory write: key {key.shape}/value {value_rows.shape} differ from stored "
                    f"{self._keys[0].shape}/{self._values[0].shape}"
                )
        self._keys.append(key)
        self._values.append(value_rows)

    def copy(self) -> "MemoryBank":
        """Shallow copy: same entry tensors, independent queue."""
        bank = MemoryBank(self.capacity)
        bank.geometry = self.geometry
        bank._keys.extend(self._keys)
        bank._values.extend(self._values)
        return bank

    def detached(self) -> "MemoryBank":
        """Copy holding the same values without autodiff history."""
        bank = MemoryBank(self.capacity)
        bank.geometry = self.geometry
        for k, v in zip(self._keys, self._values):
            bank._keys.append(k.detach())
            bank._values.append(v.detach())
        return bank

    def snapshot(self, directory: Union[str, Path]) -> Path:
        """Write each entry as an SPT0 file plus a manifest listing them oldest first."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (k, v) in enumerate(zip(self._keys, self._values)):
            key_name, value_name = f"key_{i:02d}.spt", f"value_{i:02d}.spt"
            write_tensor_file(directory / key_name, k.data)
            write_tensor_file(directory / value_name, v.data)
            entries.append({"key": key_name, "value": value_name})
        manifest = {"capacity": self.capacity, "geometry": list(self.geometry) if self.geometry else None, "entries": entries}
        (directory / SNAPSHOT_MANIFEST).write_text(json.dumps(manifest, indent=2))
        logger.debug("memory snapshot: %d entries -> %s", len(entries), directory)
        return directory

    @classmethod
    def load_snapshot(cls, directory: Union[str, Path]) -> "MemoryBank":
        directory = Path(directory)
        manifest = json.loads((directory / SNAPSHOT_MANIFEST).read_text())
        bank = cls(int(manifest["capacity"]))
        geometry = tuple(manifest["geometry"]) if manifest.get("geometry") else None
        for entry in manifest["entries"]:
            key = Tensor(read_tensor_file(directory / entry["key"]))
            value = Tensor(read_tensor_file(directory / entry["value"]))
            bank.push(key, value, geometry)
        return bank


def project_query(features: Tensor, projector: Optional[Conv2d]) -> Tensor:
    """Per-pixel linear map D -> D_k, flattened to (h*w) x D_k. Identity when projector is None."""
    projected = projector(features) if projector is not None else features
    d, h, w = projected.shape
    return projected.reshape(d, h * w).transpose(1, 0)


def read(bank: MemoryBank, query: Tensor) -> Tensor:
    """softmax(q K^T / sqrt(D_k)) V over every stored row; returns D_v x h x w."""
    if len(bank) == 0:
        raise ContractError("memory read from an empty bank")
    h, w = bank.geometry
    if query.ndim != 2 or query.shape[0] != h * w:
        raise ShapeError(f"memory read: query {query.shape} does not match bank geometry {(h, w)}")
    keys = concat(list(bank.keys), axis=0)
    values = concat(list(bank.values), axis=0)
    if keys.shape[1] != query.shape[1]:
        raise ShapeError(f"memory read: query {query.shape} and keys {keys.shape} differ in width")
    logits = matmul(query, keys.transpose(1, 0)) * (1.0 / np.sqrt(query.shape[1]))
    readout = matmul(softmax_lastdim(logits), values)
    return readout.transpose(1, 0).reshape(values.shape[1], h, w)


def fuse(features: Tensor, readout: Tensor, conv: Conv2d) -> Tensor:
    """F + Conv(F concat F')."""
    if features.shape[1:] != readout.shape[1:]:
        raise ShapeError(f"fuse: features {features.shape} and readout {readout.shape} differ in geometry")
    return features + conv(concat([features, readout], axis=0))


def write(bank: MemoryBank, key: Tensor, value: Tensor) -> None:
    """Append (key rows, value map D_v x h x w) as the newest entry."""
    if value.ndim != 3:
        raise ShapeError(f"memory write: value must be D_v x h x w, got {value.shape}")
    d, h, w = value.shape
    if key.ndim != 2 or key.shape[0] != h * w:
        raise ShapeError(f"memory write: key {key.shape} does not match value {value.shape}")
    bank.push(key, value.reshape(d, h * w).transpose(1, 0), (h, w))


def sensory_update(sensory: Tensor, motion: Tensor, gru: ConvGRU) -> Tensor:
    """s_t = GRU(s_{t-1}, f_m)."""
    return gru(sensory, motion)
