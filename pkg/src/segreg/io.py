"""Field file reader/writer.

A field file is one ASCII header line::

    SEGREG1 dtype=f32 order=C shape=<d1,d2[,d3]> channels=<K>

followed by ``prod(shape) * K`` little-endian 32-bit floats in row-major
order, channel-major for multi-channel data.
"""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

from segreg.core import FieldError

MAGIC = "SEGREG1"
SUFFIX = ".field"
_HEADER = re.compile(
    r"^SEGREG1 dtype=f32 order=C shape=(\d+(?:,\d+){1,2}) channels=(\d+)$"
)


def resolve(path: str | os.PathLike) -> Path:
    """Return ``path`` if it exists, else ``path`` with the ``.field`` suffix."""
    p = Path(path)
    if p.exists():
        return p
    q = p.with_name(p.name + SUFFIX)
    if q.exists():
        return q
    raise FileNotFoundError(f"field file not found: {p}")


def write_field(path: str | os.PathLike, data, channels: bool = False) -> Path:
    """Write ``data`` as a field file.

    With ``channels=True`` the leading axis of ``data`` is the channel axis.
    A ``.field`` suffix is appended when ``path`` has none.
    """
    data = np.asarray(data)
    if not channels:
        data = data[np.newaxis]
    shape = data.shape[1:]
    if len(shape) not in (2, 3):
        raise FieldError(f"cannot write field of spatial shape {shape}")
    p = Path(path)
    if not p.suffix:
        p = p.with_name(p.name + SUFFIX)
    header = f"{MAGIC} dtype=f32 order=C shape={','.join(map(str, shape))} channels={data.shape[0]}\n"
    with open(p, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return p


def read_field(path: str | os.PathLike) -> np.ndarray:
    """Read a field file.

    Returns an array of shape ``shape`` for single-channel files and
    ``(K, *shape)`` otherwise, as float64.
    """
    p = resolve(path)
    with open(p, "rb") as fh:
        line = fh.readline(256)
        raw = fh.read()
    try:
        text = line.decode("ascii").rstrip("\n")
    except UnicodeDecodeError:
        text = ""
    m = _HEADER.match(text)
    if m is None:
        raise FieldError(f"{p}: malformed field header")
    shape = tuple(int(s) for s in m.group(1).split(","))
    k = int(m.group(2))
    if k < 1 or min(shape) < 1:
        raise FieldError(f"{p}: malformed field header")
    n = k * int(np.prod(shape))
    if len(raw) != 4 * n:
        raise FieldError(f"{p}: expected {4 * n} data bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape((k,) + shape)
    if not np.all(np.isfinite(data)):
        raise FieldError(f"{p}: contains non-finite values")
    return data[0] if k == 1 else data


def read_labels(path: str | os.PathLike) -> np.ndarray:
    data = read_field(path)
    if data.ndim not in (2, 3) or not np.all(data == np.round(data)) or data.min() < 0:
        raise FieldError(f"{path}: not a label map")
    return data.astype(np.int64)
