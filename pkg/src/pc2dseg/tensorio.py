"""Raw float tensor files exchanged with external segmenters.

Layout, all little-endian: 8-byte magic ``PC2DTNSR`` | uint32 ndim |
uint32 dims[ndim] | float32 payload, row-major.
"""

import numpy as np

MAGIC = b"PC2DTNSR"
MAX_NDIM = 8


class TensorFormatError(ValueError):
    """Malformed raw tensor file."""


def write_tensor(path, array):
    """Write `array` to `path` as a raw float32 tensor."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim < 1 or arr.ndim > MAX_NDIM:
        raise TensorFormatError(f"unsupported ndim {arr.ndim}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array([arr.ndim], dtype="<u4").tobytes())
        f.write(np.array(arr.shape, dtype="<u4").tobytes())
        f.write(arr.tobytes())


def read_tensor(path):
    """Read a raw tensor file back into a float32 array."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {data[:8]!r}")
    if len(data) < 12:
        raise TensorFormatError(f"{path}: truncated header")
    ndim = int(np.frombuffer(data[8:12], dtype="<u4")[0])
    if not 1 <= ndim <= MAX_NDIM:
        raise TensorFormatError(f"{path}: bad ndim {ndim}")
    hdr_end = 12 + 4 * ndim
    if len(data) < hdr_end:
        raise TensorFormatError(f"{path}: truncated dims")
    dims = np.frombuffer(data[12:hdr_end], dtype="<u4").astype(np.int64)
    count = int(np.prod(dims))
    if len(data) != hdr_end + 4 * count:
        raise TensorFormatError(
            f"{path}: payload is {len(data) - hdr_end} bytes, expected {4 * count}"
        )
    return np.frombuffer(data[hdr_end:], dtype="<f4").reshape(dims).copy()
