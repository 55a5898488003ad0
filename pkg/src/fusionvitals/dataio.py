"""Tensor file format (TNSR) and timestamped-series CSV I/O.

Everything downstream moves data through the two formats defined here:

* ``.tnsr`` -- a minimal binary container for float64 n-d arrays:
  magic ``TNSR``, u8 version (=1), u8 dtype code (1 = float64 LE),
  u8 ndim, ndim x u32 LE dims, then the raw row-major payload.
  Total size is exactly ``7 + 4*ndim + 8*prod(dims)`` bytes.
* ``.csv`` -- two columns ``timestamp_ms,value`` with a header row,
  integer-millisecond timestamps, strictly increasing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"TNSR"
VERSION = 1
DTYPE_F64 = 1


class TensorIOError(Exception):
    """Base class for tensor container format errors."""


class BadMagicError(TensorIOError):
    pass


class UnsupportedFormatError(TensorIOError):
    """Unknown version or dtype code."""


class TruncatedFileError(TensorIOError):
    pass


def as_tensor(data, dims=None) -> np.ndarray:
    """Coerce to a float64 array and check the tensor invariants."""
    t = np.asarray(data, dtype=np.float64)
    if dims is not None:
        t = t.reshape(tuple(dims))
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite values")
    return t


def write_tensor(path, t) -> None:
    """Write a float64 array to `path` in the TNSR container format."""
    t = as_tensor(t)
    path = Path(path)
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_F64, t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    except OSError as e:
        raise TensorIOError(f"cannot write tensor to {path}: {e}") from e


def read_tensor(path) -> np.ndarray:
    """Read a TNSR file back into a float64 array."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise TensorIOError(f"cannot read tensor from {path}: {e}") from e

    if len(raw) < 7:
        raise TruncatedFileError(f"{path}: file shorter than fixed header")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    version, dtype_code, ndim = struct.unpack("<BBB", raw[4:7])
    if version != VERSION:
        raise UnsupportedFormatError(f"{path}: unsupported version {version}")
    if dtype_code != DTYPE_F64:
        raise UnsupportedFormatError(f"{path}: unsupported dtype code {dtype_code}")
    dims_end = 7 + 4 * ndim
    if len(raw) < dims_end:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(f"<{ndim}I", raw[7:dims_end])
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = dims_end + 8 * count
    if len(raw) != expected:
        raise TruncatedFileError(
            f"{path}: expected {expected} bytes for dims {list(dims)}, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f8", offset=dims_end, count=count)
    t = data.reshape(dims).astype(np.float64)
    if not np.all(np.isfinite(t)):
        raise TensorIOError(f"{path}: payload contains non-finite values")
    return t


@dataclass(frozen=True)
class TimeSeries:
    """A sampled trace: integer-millisecond timestamps and float values."""

    timestamps_ms: np.ndarray  # int64, strictly increasing
    values: np.ndarray  # float64, same length
    nominal_rate_hz: float

    def __post_init__(self):
        ts = np.asarray(self.timestamps_ms, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if len(ts) != len(vals):
            raise ValueError("timestamps and values differ in length")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps not strictly increasing")
        if not self.nominal_rate_hz > 0:
            raise ValueError("nominal_rate_hz must be positive")
        object.__setattr__(self, "timestamps_ms", ts)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.timestamps_ms)

    @property
    def span_ms(self):
        return int(self.timestamps_ms[0]), int(self.timestamps_ms[-1])


def make_series(timestamps_ms, values) -> TimeSeries:
    """Build a TimeSeries, estimating the nominal rate from the span."""
    ts = np.asarray(timestamps_ms, dtype=np.int64)
    if len(ts) < 2:
        raise ValueError("need at least two samples to estimate a rate")
    rate = (len(ts) - 1) / ((ts[-1] - ts[0]) / 1000.0)
    return TimeSeries(ts, np.asarray(values, dtype=np.float64), rate)


def read_series_csv(path) -> TimeSeries:
    """Read a `timestamp_ms,value` CSV into a TimeSeries.

    The nominal rate is estimated as (n-1) / span_seconds, so the file must
    contain at least two rows. Non-monotone timestamps raise with the
    1-based data row index of the first offender.
    """
    path = Path(path)
    with open(path, "r", newline="") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = lines[0].replace(" ", "")
    if header != "timestamp_ms,value":
        raise ValueError(f"{path}: expected header 'timestamp_ms,value', got {lines[0]!r}")
    if len(lines) < 3:
        raise ValueError(f"{path}: need at least two data rows to estimate a rate")
    ts = np.empty(len(lines) - 1, dtype=np.int64)
    vals = np.empty(len(lines) - 1, dtype=np.float64)
    for i, line in enumerate(lines[1:]):
        parts = line.split(",")
        if len(parts) != 2:
            raise ValueError(f"{path}: malformed row {i + 1}: {line!r}")
        ts[i] = int(parts[0])
        vals[i] = float(parts[1])
        if i > 0 and ts[i] <= ts[i - 1]:
            raise ValueError(f"{path}: timestamps not strictly increasing at row {i + 1}")
    return make_series(ts, vals)


def write_series_csv(path, timestamps_ms, values) -> None:
    """Write a `timestamp_ms,value` CSV (repr floats, so it round-trips)."""
    ts = np.asarray(timestamps_ms, dtype=np.int64)
    vals = np.asarray(values, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        fh.write("timestamp_ms,value\n")
        for t, v in zip(ts, vals):
            fh.write(f"{int(t)},{v!r}\n")
