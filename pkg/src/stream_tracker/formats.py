"""Binary codecs: SPT0 tensors, checkpoints, Middlebury .flo, binary PPM/PGM."""

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from stream_tracker.tensor import StreamTrackerError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TENSOR_MAGIC = b"SPT0"
CHECKPOINT_MAGIC = b"SPOTCKPT"
CHECKPOINT_VERSION = 1
FLO_MAGIC = 202021.25

DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
CODE_FOR_DTYPE = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}


class FormatError(StreamTrackerError):
    """Malformed or truncated file; `offset` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _take(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise FormatError(f"truncated {what}: need {n} bytes, {len(buf) - offset} left", offset)
    return buf[offset : offset + n]


# -- SPT0 -----------------------------------------------------------------


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = CODE_FOR_DTYPE.get(array.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {array.dtype}", 0)
    header = TENSOR_MAGIC + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    header += struct.pack("<B", code)
    return header + np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one SPT0 record at `offset`; returns (array, offset after it)."""
    if _take(buf, offset, 4, "tensor magic") != TENSOR_MAGIC:
        raise FormatError("bad tensor magic", offset)
    pos = offset + 4
    (ndim,) = struct.unpack("<I", _take(buf, pos, 4, "tensor ndim"))
    pos += 4
    dims = struct.unpack(f"<{ndim}I", _take(buf, pos, 4 * ndim, "tensor dims"))
    pos += 4 * ndim
    (code,) = struct.unpack("<B", _take(buf, pos, 1, "dtype code"))
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", pos)
    pos += 1
    dtype = DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    raw = _take(buf, pos, count * dtype.itemsize, "tensor data")
    array = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="), copy=True)
    return array, pos + len(raw)


def write_tensor_file(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor_file(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    array, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor", end)
    return array


# -- checkpoints ----------------------------------------------------------


def encode_checkpoint(entries: dict[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(entries))]
    for name, array in entries.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(encode_tensor(array))
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if _take(buf, 0, len(CHECKPOINT_MAGIC), "checkpoint magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    pos = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack("<II", _take(buf, pos, 8, "checkpoint header"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", pos)
    pos += 8
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _take(buf, pos, 2, "entry name length"))
        pos += 2
        name = _take(buf, pos, name_len, "entry name").decode("utf-8")
        pos += name_len
        entries[name], pos = decode_tensor(buf, pos)
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint entries", pos)
    return entries


# -- Middlebury .flo ------------------------------------------------------


def encode_flo(flow: np.ndarray) -> bytes:
    """flow is 2 x H x W (u, v)."""
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise FormatError(f"flow must be 2 x H x W, got {flow.shape}", 0)
    _, h, w = flow.shape
    header = struct.pack("<fii", FLO_MAGIC, w, h)
    return header + np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4").tobytes()


def decode_flo(buf: bytes) -> np.ndarray:
    (magic,) = struct.unpack("<f", _take(buf, 0, 4, "flo magic"))
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"bad .flo magic {magic}", 0)
    w, h = struct.unpack("<ii", _take(buf, 4, 8, "flo dims"))
    if w <= 0 or h <= 0:
        raise FormatError(f"invalid .flo dims {w}x{h}", 4)
    raw = _take(buf, 12, 4 * 2 * w * h, "flo data")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, 2).transpose(2, 0, 1).astype(np.float32)


def write_flo(path: PathLike, flow: np.ndarray) -> None:
    Path(path).write_bytes(encode_flo(flow))


def read_flo(path: PathLike) -> np.ndarray:
    return decode_flo(Path(path).read_bytes())


# -- PPM / PGM ------------------------------------------------------------


def _encode_netpbm(tag: bytes, pixels: np.ndarray) -> bytes:
    h, w = pixels.shape[:2]
    return tag + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def _decode_netpbm(buf: bytes, tag: bytes, channels: int) -> np.ndarray:
    if _take(buf, 0, 2, "netpbm magic") != tag:
        raise FormatError(f"expected {tag.decode()} header", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed netpbm header", start)
        fields.append(int(buf[start:pos]))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", pos)
    pos += 1
    raw = _take(buf, pos, w * h * channels, "pixel data")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return np.frombuffer(raw, dtype=np.uint8).reshape(shape).copy()


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    """rgb is H x W x 3 uint8."""
    Path(path).write_bytes(_encode_netpbm(b"P6", rgb))


def read_ppm(path: PathLike) -> np.ndarray:
    return _decode_netpbm(Path(path).read_bytes(), b"P6", 3)


def write_pgm(path: PathLike, gray: np.ndarray) -> None:
    """gray is H x W uint8."""
    Path(path).write_bytes(_encode_netpbm(b"P5", gray))


def read_pgm(path: PathLike) -> np.ndarray:
    return _decode_netpbm(Path(path).read_bytes(), b"P5", 1)
