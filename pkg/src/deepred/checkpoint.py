"""Binary container for named tensors.

Layout (all integers little-endian)::

    magic    4 bytes   b"DRTN"
    version  uint16    currently 1
    count    uint32    number of records
    record * count:
        name_len  uint16
        name      name_len bytes, UTF-8
        dtype     uint8    1=float32 2=float64 3=int64 4=uint8
        ndim      uint8
        dims      ndim * uint32
        payload   prod(dims) scalars, little-endian, row-major

Record order is preserved on load.
"""

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"DRTN"
VERSION = 1

_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3, np.dtype("uint8"): 4}
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors):
    """Write a mapping of name -> array (or anything with ``.data``) to ``path``."""
    items = list(tensors.items())
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(items)))
        for name, value in items:
            arr = np.asarray(getattr(value, "data", value))
            if arr.dtype not in _CODES:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_tensors(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 10
    out = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            dtype = _DTYPES[code].newbyteorder("<")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name!r} at offset {pos}")
            out[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(dims).astype(dtype.newbyteorder("="))
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"{path}: malformed record near offset {pos}: {exc}") from None
    return out
