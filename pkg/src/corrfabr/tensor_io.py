"""Dense tensor files and seeded random number generation.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  On disk they
use the ``CFTN`` container::

    offset  size        field
    0       4           magic b"CFTN"
    4       1           version (1)
    5       1           dtype (1 = float32, 2 = float64)
    6       1           ndim
    7       8 * ndim    extents, little-endian uint64
    ...     prod * w    row-major little-endian payload

All randomness in the package flows through :func:`make_rng`, which returns a
``numpy.random.Generator`` backed by PCG64.  PCG64 output for a given seed is
stable across platforms and numpy releases.
"""

import hashlib
import os
import struct

import numpy as np

MAGIC = b"CFTN"
VERSION = 1
DTYPE_F32 = 1
DTYPE_F64 = 2

_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}
_CODES = {"f32": DTYPE_F32, "float32": DTYPE_F32, "f64": DTYPE_F64, "float64": DTYPE_F64}


class TensorFormatError(ValueError):
    """Raised when a tensor file or array violates the CFTN contract."""


def as_tensor(data, shape=None):
    """Return ``data`` as a finite float64 array, optionally reshaped.

    Raises
    ------
    TensorFormatError
        If ``shape`` does not match the number of elements, an extent is
        not positive, or any element is NaN/Inf.
    """
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape, dtype=np.int64)) != arr.size:
            raise TensorFormatError(
                f"shape/data mismatch: shape {shape} needs {int(np.prod(shape))} "
                f"elements, got {arr.size}")
        arr = arr.reshape(shape)
    if any(s < 1 for s in arr.shape):
        raise TensorFormatError(f"extents must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError("tensor contains non-finite values")
    return arr


def encode_tensor(t, dtype="f64") -> bytes:
    """Serialize ``t`` to CFTN bytes."""
    try:
        code = _CODES[dtype]
    except KeyError:
        raise TensorFormatError(f"unsupported dtype {dtype!r}") from None
    arr = as_tensor(t)
    if arr.ndim > 255:
        raise TensorFormatError("at most 255 dimensions are supported")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return header + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    """Parse CFTN bytes into a float64 array."""
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise TensorFormatError("bad magic")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"unsupported dtype code {code}")
    head = 7 + 8 * ndim
    if len(buf) < head:
        raise TensorFormatError("truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 7)
    if any(s < 1 for s in shape):
        raise TensorFormatError(f"extents must be positive, got {shape}")
    dt = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) - head < nbytes:
        raise TensorFormatError(
            f"truncated payload: expected {nbytes} bytes, found {len(buf) - head}")
    if len(buf) - head > nbytes:
        raise TensorFormatError("trailing bytes after payload")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=head)
    return arr.astype(np.float64).reshape(shape)


def save_tensor(t, path, dtype="f64"):
    """Write ``t`` to ``path`` in CFTN format.

    The file is written to a temporary sibling and renamed into place, so a
    crashed writer never leaves a half-written tensor behind.
    """
    data = encode_tensor(t, dtype)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_tensor(path) -> np.ndarray:
    """Read a CFTN file.  float32 payloads are widened to float64."""
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def make_rng(seed) -> np.random.Generator:
    """Seeded PCG64 generator; ``seed`` must fit in an unsigned 64-bit int."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def stable_hash(text: str) -> int:
    """64-bit hash of ``text`` that does not depend on PYTHONHASHSEED."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(seed, key: str) -> int:
    """Per-item seed ``seed XOR hash(key)``, used for per-patient streams."""
    return (int(seed) ^ stable_hash(key)) & (2**64 - 1)


def image_to_tensor(src, dst=None, dtype="f64"):
    """Convert a PNG/PPM/other Pillow-readable image to a float64 array.

    Gray images become ``[H, W]``; anything else is converted to RGB
    ``[H, W, 3]``.  If ``dst`` is given the array is also saved as CFTN.
    """
    from PIL import Image

    with Image.open(src) as im:
        if im.mode in ("L", "I", "F", "I;16"):
            arr = np.asarray(im, dtype=np.float64)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    if dst is not None:
        save_tensor(arr, dst, dtype=dtype)
    return arr
