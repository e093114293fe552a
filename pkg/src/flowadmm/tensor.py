"""Dense float64 tensors, seeded Gaussian sampling, and tensor file formats.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Image tensors
are laid out as ``(channels, height, width)`` or ``(height, width)``; the
last two axes are always spatial.

Sampling does not go through numpy's ``Generator.standard_normal``, whose
output stream is not guaranteed stable across numpy releases.  Instead the
raw 64-bit output of the counter-based Philox4x64 bit generator is turned
into uniforms with 53-bit resolution and then into normals with the
Box-Muller transform.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import ParameterError, ShapeError

__all__ = [
    "SeededRng",
    "as_tensor",
    "check_finite",
    "l2_distance",
    "mse",
    "read_f64",
    "read_pnm",
    "sample_standard_normal",
    "write_f64",
    "write_pnm",
]

_MASK64 = (1 << 64) - 1
_TWO_POW_M53 = 2.0 ** -53


class SeededRng:
    """Deterministic random stream keyed by ``(seed, stream)``.

    Parameters
    ----------
    seed : int
        Master seed, reduced modulo 2**64.
    stream : int, optional
        Stream index.  Distinct streams with the same seed are independent.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._bitgen = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream})"

    def fork(self, index):
        """Return an independent child stream; does not advance this one."""
        child = (self.stream * 1_000_003 + int(index) + 1) & _MASK64
        return SeededRng(self.seed, child)

    def raw(self, n):
        return self._bitgen.random_raw(int(n))

    def uniform(self, shape):
        """Uniform samples on [0, 1) with 53 random bits each."""
        shape = _check_shape(shape)
        n = math.prod(shape)
        bits = self.raw(n) >> np.uint64(11)
        return (bits.astype(np.float64) * _TWO_POW_M53).reshape(shape)

    def integers(self, high, size):
        """Integers in ``[0, high)`` by scaling uniforms (bias below 2**-40)."""
        if high < 1:
            raise ParameterError("high must be >= 1")
        u = self.uniform((int(size),))
        return np.minimum((u * high).astype(np.int64), high - 1)

    def standard_normal(self, shape):
        shape = _check_shape(shape)
        n = math.prod(shape)
        pairs = (n + 1) // 2
        u = self.uniform((2 * pairs,))
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n].reshape(shape)


def _check_shape(shape):
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}: every dimension must be >= 1")
    return shape


def sample_standard_normal(rng, shape):
    """Draw i.i.d. N(0, 1) entries of the given shape from ``rng``."""
    return rng.standard_normal(shape)


def as_tensor(x):
    """Convert to a float64 array, rejecting NaN and Inf."""
    arr = np.asarray(x, dtype=np.float64)
    check_finite(arr)
    return arr


def check_finite(arr, what="tensor"):
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{what} contains non-finite entries")
    return arr


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def l2_distance(a, b):
    a, b = _same_shape(a, b)
    return float(np.linalg.norm((a - b).ravel()))


def mse(a, b):
    a, b = _same_shape(a, b)
    if a.size == 0:
        raise ShapeError("mse of empty tensors")
    return float(np.mean((a - b) ** 2))


# -- file formats -----------------------------------------------------------

def write_f64(path, arr):
    """Write ``F64 <ndim> <d0> ...`` header line followed by little-endian doubles."""
    arr = np.asarray(arr, dtype=np.float64)
    header = " ".join(["F64", str(arr.ndim), *(str(d) for d in arr.shape)]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def read_f64(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        payload = fh.read()
    if not header or header[0] != "F64":
        raise ShapeError(f"{path}: not an F64 tensor file")
    ndim = int(header[1])
    shape = tuple(int(d) for d in header[2:2 + ndim])
    if len(shape) != ndim:
        raise ShapeError(f"{path}: header declares {ndim} dims but lists {len(shape)}")
    expected = 8 * math.prod(shape)
    if len(payload) != expected:
        raise ShapeError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def write_pnm(path, img):
    """Write an 8-bit PGM (``(H, W)`` or ``(1, H, W)``) or PPM (``(3, H, W)``).

    Values are clipped to [0, 1] and mapped linearly onto 0..255.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 2:
        magic, data = b"P5", img
    elif img.ndim == 3 and img.shape[0] == 3:
        magic, data = b"P6", np.moveaxis(img, 0, -1)
    else:
        raise ShapeError(f"cannot write shape {img.shape} as PGM/PPM")
    h, w = data.shape[:2]
    bytes_ = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(bytes_.tobytes())


def read_pnm(path):
    """Read a binary 8-bit PGM/PPM into [0, 1]; PGM gives ``(H, W)``, PPM ``(3, H, W)``."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ShapeError(f"{path}: only 8-bit binary PGM/PPM is supported")
    channels = 1 if magic == b"P5" else 3
    data = np.frombuffer(raw[pos:pos + w * h * channels], dtype=np.uint8)
    if data.size != w * h * channels:
        raise ShapeError(f"{path}: truncated raster")
    img = data.astype(np.float64) / 255.0
    if channels == 1:
        return img.reshape(h, w)
    return np.moveaxis(img.reshape(h, w, 3), -1, 0)
