"""The raw tensor wire format, implemented independently of the core.

Layout, little-endian throughout: 8-byte magic ``PC2DTNSR`` | uint32 ndim |
uint32 dims[ndim] | float32 payload, row-major.
"""

import numpy as np

MAGIC = b"PC2DTNSR"


class TensorFileError(ValueError):
    """Malformed tensor file."""


def write_tensor(path, array):
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array([arr.ndim], dtype="<u4").tobytes())
        f.write(np.array(arr.shape, dtype="<u4").tobytes())
        f.write(arr.tobytes())


def read_tensor(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise TensorFileError(f"{path}: bad magic {data[:8]!r}")
    if len(data) < 12:
        raise TensorFileError(f"{path}: truncated header")
    ndim = int(np.frombuffer(data[8:12], dtype="<u4")[0])
    if not 1 <= ndim <= 8:
        raise TensorFileError(f"{path}: implausible ndim {ndim}")
    end = 12 + 4 * ndim
    if len(data) < end:
        raise TensorFileError(f"{path}: truncated dims")
    dims = np.frombuffer(data[12:end], dtype="<u4").astype(np.int64)
    count = int(np.prod(dims))
    if len(data) != end + 4 * count:
        raise TensorFileError(f"{path}: expected {4 * count} payload bytes, found {len(data) - end}")
    return np.frombuffer(data[end:], dtype="<f4").reshape(dims).copy()
