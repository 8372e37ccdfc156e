"""DCAT tensor files.

Layout: ``DCAT`` | version u8 (0x01) | dtype u8 (0x01 = f64) | rank u32 LE |
rank x dim u32 LE | row-major little-endian f64 payload.
"""
import logging
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from ..core.errors import FormatError
from ..models.tensor import as_tensor

logger = logging.getLogger(__name__)

MAGIC = b"DCAT"
VERSION = 0x01
DTYPE_F64 = 0x01
_HEADER = struct.Struct("<4sBBI")


def encode_tensor(data) -> bytes:
    arr = as_tensor(data)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return _HEADER.pack(MAGIC, VERSION, DTYPE_F64, arr.ndim) + dims + arr.astype("<f8").tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns it and the offset just past it."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated DCAT header")
    magic, version, dtype, rank = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad DCAT magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported DCAT version {version}")
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported DCAT dtype {dtype}")
    offset += _HEADER.size
    if len(buf) - offset < 4 * rank:
        raise FormatError("truncated DCAT dimensions")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    nbytes = 8 * int(np.prod(shape, dtype=np.int64))
    if len(buf) - offset < nbytes:
        raise FormatError(f"truncated DCAT payload: need {nbytes} bytes, have {len(buf) - offset}")
    arr = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=offset).astype(np.float64).reshape(shape)
    return arr, offset + nbytes


def save_tensor(path: Union[str, Path], data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(data))
    logger.debug(f"wrote tensor {np.shape(data)} to {path}")
    return path


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr
