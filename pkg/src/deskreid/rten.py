"""Binary tensor files and named-tensor checkpoint archives.

Single-tensor layout (used for feature export and as the record format
inside checkpoints):

    magic "RTEN" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 ndim |
    ndim x little-endian u64 extents | raw little-endian values, row-major

A checkpoint archive is a plain concatenation of such records in a single
file, plus a text index file (``<archive>.idx``) with one ``name offset``
line per record, in order.
"""

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"RTEN"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

INDEX_SUFFIX = ".idx"


class TensorFileError(ValueError):
    """Malformed or truncated tensor file."""


def write_tensor(fh, array):
    """Append one tensor record to an open binary stream."""
    arr = np.asarray(array)
    if arr.ndim:
        arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype("<f8")
    header = MAGIC + struct.pack("<BBB", VERSION, _DTYPE_CODES[arr.dtype], arr.ndim)
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    fh.write(header)
    fh.write(extents)
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(fh):
    """Read one tensor record from an open binary stream."""
    header = fh.read(7)
    if len(header) < 7:
        raise TensorFileError("truncated tensor header")
    if header[:4] != MAGIC:
        raise TensorFileError(f"bad magic {header[:4]!r}, expected {MAGIC!r}")
    version, dtype_code, ndim = struct.unpack("<BBB", header[4:7])
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise TensorFileError(f"unknown dtype code {dtype_code}")
    dtype = _CODE_DTYPES[dtype_code]
    raw_extents = fh.read(8 * ndim)
    if len(raw_extents) < 8 * ndim:
        raise TensorFileError("truncated extents")
    shape = struct.unpack(f"<{ndim}Q", raw_extents) if ndim else ()
    count = 1
    for extent in shape:
        count *= extent
    payload = fh.read(count * dtype.itemsize)
    if len(payload) < count * dtype.itemsize:
        raise TensorFileError("truncated payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def save_tensor(path, array):
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path):
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_archive(path, named_arrays):
    """Write an ordered ``(name, array)`` sequence plus its text index.

    Accepts either a mapping or an iterable of pairs.  Names must be
    nonempty and free of whitespace so the index stays line-parseable.
    """
    path = str(path)
    if hasattr(named_arrays, "items"):
        named_arrays = named_arrays.items()
    offsets = []
    with open(path, "wb") as fh:
        for name, array in named_arrays:
            if not name or any(ch.isspace() for ch in name):
                raise ValueError(f"invalid tensor name {name!r}")
            offsets.append((name, fh.tell()))
            write_tensor(fh, array)
    with open(path + INDEX_SUFFIX, "w") as idx:
        for name, offset in offsets:
            idx.write(f"{name} {offset}\n")


def load_archive(path):
    """Read an archive back as an ordered name -> array mapping."""
    path = str(path)
    entries = []
    with open(path + INDEX_SUFFIX) as idx:
        for line_no, line in enumerate(idx, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise TensorFileError(f"malformed index line {line_no}: {line!r}")
            entries.append((parts[0], int(parts[1])))
    out = OrderedDict()
    with open(path, "rb") as fh:
        for name, offset in entries:
            fh.seek(offset)
            if name in out:
                raise TensorFileError(f"duplicate tensor name {name!r} in index")
            out[name] = read_tensor(fh)
    return out
