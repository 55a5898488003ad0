"""Multi-rate stream alignment onto the video clock, and window cutting.

Video runs at ~30 fps while the reference traces arrive at their own rates
(PPG 20 Hz, respiration 50 Hz, SpO2 ~1 Hz). The video clock is the master:
labels are linearly resampled onto the kept RGB frame timestamps, IR frames
are paired to RGB frames by nearest timestamp within a +/-25 ms tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import TimeSeries

# Nearest-neighbour pairing tolerance between RGB and IR frames. Roughly 3/4
# of a 30 fps frame interval: tolerates jitter without pairing across frames.
PAIR_TOLERANCE_MS = 25
# If more than this fraction of candidate frame pairs misses the tolerance,
# the streams are considered out of sync and alignment fails.
MAX_DROP_FRACTION = 0.10

VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class AlignedSession:
    """One recording with every stream resampled onto the kept frame clock."""

    frame_clock_ms: np.ndarray  # [T] int64, strictly increasing
    rgb: np.ndarray  # [T, H, W, 3]
    ir: np.ndarray  # [T, H, W, 1]
    bvp: np.ndarray  # [T]
    rr: np.ndarray  # [T]
    spo2: np.ndarray  # [T], percent

    def __post_init__(self):
        T = len(self.frame_clock_ms)
        for name in ("rgb", "ir", "bvp", "rr", "spo2"):
            if len(getattr(self, name)) != T:
                raise ValueError(f"{name} length does not match frame clock ({T})")
        if T > 1 and not np.all(np.diff(self.frame_clock_ms) > 0):
            raise ValueError("frame clock not strictly increasing")
        if np.any(self.spo2 < 0) or np.any(self.spo2 > 100):
            raise ValueError("spo2 outside [0, 100]")

    @property
    def n_frames(self):
        return len(self.frame_clock_ms)

    @property
    def fs_hz(self):
        span = (self.frame_clock_ms[-1] - self.frame_clock_ms[0]) / 1000.0
        return (self.n_frames - 1) / span


@dataclass(frozen=True)
class Window:
    """One training/inference unit: L aligned frames plus per-frame labels."""

    rgb: np.ndarray  # [L, H, W, 3]
    ir: np.ndarray  # [L, H, W, 1]
    bvp: np.ndarray  # [L], standardized
    rr: np.ndarray  # [L], standardized
    spo2_mean: float


@dataclass(frozen=True)
class WindowBatch:
    windows: list
    window_len: int

    def __len__(self):
        return len(self.windows)


def resample_linear(s: TimeSeries, target_clock_ms) -> np.ndarray:
    """Linearly interpolate a series at the target times (endpoint hold outside)."""
    if len(s) == 0:
        raise ValueError("cannot resample an empty series")
    target = np.asarray(target_clock_ms, dtype=np.float64)
    return np.interp(target, s.timestamps_ms.astype(np.float64), s.values)


def align_session(
    rgb, rgb_clock_ms, ir, ir_clock_ms, ppg: TimeSeries, rr: TimeSeries, spo2: TimeSeries
) -> AlignedSession:
    """Align RGB/IR frames and the three reference traces onto one clock.

    The output clock is the RGB frame timestamps restricted to the common
    overlap of all five streams. Each kept RGB frame is paired with its
    nearest IR frame; pairs further apart than PAIR_TOLERANCE_MS are dropped,
    and alignment fails if more than MAX_DROP_FRACTION of pairs drop.
    """
    rgb_clock = np.asarray(rgb_clock_ms, dtype=np.int64)
    ir_clock = np.asarray(ir_clock_ms, dtype=np.int64)
    for name, clock in (("rgb", rgb_clock), ("ir", ir_clock)):
        if len(clock) == 0:
            raise ValueError(f"{name} clock is empty")
        if not np.all(np.diff(clock) > 0):
            raise ValueError(f"{name} clock not strictly increasing")
    if len(rgb) != len(rgb_clock) or len(ir) != len(ir_clock):
        raise ValueError("frame count does not match clock length")

    lo = max(rgb_clock[0], ir_clock[0], ppg.timestamps_ms[0], rr.timestamps_ms[0],
             spo2.timestamps_ms[0])
    hi = min(rgb_clock[-1], ir_clock[-1], ppg.timestamps_ms[-1], rr.timestamps_ms[-1],
             spo2.timestamps_ms[-1])
    if lo > hi:
        raise ValueError("streams have no common time overlap")

    keep = (rgb_clock >= lo) & (rgb_clock <= hi)
    cand_times = rgb_clock[keep]
    if len(cand_times) == 0:
        raise ValueError("no RGB frames inside the common overlap")

    # Nearest IR frame per candidate RGB frame.
    pos = np.searchsorted(ir_clock, cand_times)
    left = np.clip(pos - 1, 0, len(ir_clock) - 1)
    right = np.clip(pos, 0, len(ir_clock) - 1)
    d_left = np.abs(cand_times - ir_clock[left])
    d_right = np.abs(ir_clock[right] - cand_times)
    nearest = np.where(d_left <= d_right, left, right)
    dist = np.minimum(d_left, d_right)
    matched = dist <= PAIR_TOLERANCE_MS

    drop_frac = 1.0 - matched.mean()
    if drop_frac > MAX_DROP_FRACTION:
        raise ValueError(
            f"{drop_frac:.1%} of frame pairs exceed the +/-{PAIR_TOLERANCE_MS} ms "
            f"pairing tolerance (limit {MAX_DROP_FRACTION:.0%})"
        )

    rgb_idx = np.flatnonzero(keep)[matched]
    ir_idx = nearest[matched]
    clock = rgb_clock[rgb_idx]

    return AlignedSession(
        frame_clock_ms=clock,
        rgb=np.asarray(rgb)[rgb_idx],
        ir=np.asarray(ir)[ir_idx],
        bvp=resample_linear(ppg, clock),
        rr=resample_linear(rr, clock),
        spo2=resample_linear(spo2, clock),
    )


def standardize(x, floor=VARIANCE_FLOOR) -> np.ndarray:
    """Zero-mean, unit-variance rescaling with a variance floor."""
    x = np.asarray(x, dtype=np.float64)
    var = x.var()
    return (x - x.mean()) / np.sqrt(max(var, floor))


def make_windows(a: AlignedSession, window_len: int, stride: int) -> WindowBatch:
    """Cut fixed-length windows; waveform labels standardized per window."""
    T = a.n_frames
    if window_len > T:
        raise ValueError(f"window_len {window_len} exceeds session length {T}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = (T - window_len) // stride + 1
    windows = []
    for i in range(n):
        s = slice(i * stride, i * stride + window_len)
        windows.append(
            Window(
                rgb=a.rgb[s],
                ir=a.ir[s],
                bvp=standardize(a.bvp[s]),
                rr=standardize(a.rr[s]),
                spo2_mean=float(a.spo2[s].mean()),
            )
        )
    return WindowBatch(windows=windows, window_len=window_len)
