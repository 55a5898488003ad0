"""Synthetic skin-patch renderer with known embedded vitals.

Every acceptance experiment runs on sessions produced here: a textured skin
patch whose green channel pulses at the heart rate, whose red/IR pulsatile
amplitude ratio encodes SpO2 (ratio-of-ratios convention, amplitudes taken
relative to each channel's baseline: 100% -> ratio 0.5, 80% -> ratio 1.0),
plus a slow whole-patch respiration modulation, optional occluding dark
rectangles, RGB-only illumination drift, and pixel noise. Reference traces
are written at the acquisition rates of the real rig (PPG 20 Hz, respiration
50 Hz, SpO2 1 Hz) so the alignment path is exercised end to end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import dataio, timeline
from .dataset import Scenario

VIDEO_FPS = 30.0
PPG_RATE_HZ = 20.0
RR_RATE_HZ = 50.0
SPO2_RATE_HZ = 1.0

IR_PULSE_SCALE = 0.6  # IR carries the pulse at 0.6x the green amplitude
BLUE_PULSE_SCALE = 0.2


def spo2_to_red_ir_ratio(spo2_pct: float) -> float:
    """Linear ratio-of-ratios calibration: 100% -> 0.5, 80% -> 1.0."""
    return 0.5 + 0.025 * (100.0 - spo2_pct)


@dataclass(frozen=True)
class SynthSpec:
    hr_bpm: float
    rr_bpm: float
    spo2_pct: float
    pulse_amp: float = 0.02
    resp_amp: float = 0.01
    occlusion_frac_rgb: float = 0.0
    occlusion_frac_ir: float = 0.0
    illum_drift_amp: float = 0.0
    noise_sigma: float = 0.005
    seed: int = 0
    base_rgb: tuple = (0.65, 0.50, 0.38)
    base_ir: float = 0.55

    def __post_init__(self):
        checks = [
            (40 <= self.hr_bpm <= 180, f"hr_bpm {self.hr_bpm} outside [40, 180]"),
            (8 <= self.rr_bpm <= 30, f"rr_bpm {self.rr_bpm} outside [8, 30]"),
            (80 <= self.spo2_pct <= 100, f"spo2_pct {self.spo2_pct} outside [80, 100]"),
            (0 <= self.occlusion_frac_rgb <= 1, "occlusion_frac_rgb outside [0, 1]"),
            (0 <= self.occlusion_frac_ir <= 1, "occlusion_frac_ir outside [0, 1]"),
            (self.pulse_amp > 0, "pulse_amp must be positive"),
            (self.noise_sigma >= 0, "noise_sigma must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        object.__setattr__(self, "base_rgb", tuple(float(v) for v in self.base_rgb))

    def to_dict(self):
        d = asdict(self)
        d["base_rgb"] = list(self.base_rgb)
        return d


@dataclass(frozen=True)
class SynthSession:
    """Raw rendered streams plus their aligned view and the generating spec."""

    spec: SynthSpec
    duration_s: float
    rgb: np.ndarray  # [T, H, W, 3]
    ir: np.ndarray  # [T, H, W, 1]
    rgb_clock_ms: np.ndarray
    ir_clock_ms: np.ndarray
    ppg: dataio.TimeSeries
    rr: dataio.TimeSeries
    spo2: dataio.TimeSeries
    aligned: timeline.AlignedSession


def _occlusion_mask(rng, n_frames: int, frac: float):
    """Pick round(frac*T) frames to occlude, grouped into short runs."""
    occ = np.zeros(n_frames, dtype=bool)
    target = int(round(frac * n_frames))
    while occ.sum() < target:
        start = int(rng.integers(0, n_frames))
        length = int(rng.integers(5, 21))
        occ[start:min(n_frames, start + length)] = True
    extra = np.flatnonzero(occ)[target:]
    occ[extra] = False
    return occ


def _apply_occlusion(frames, occ, rng):
    """Dark rectangles (>= 40% of the patch) over each occluded run."""
    H, W = frames.shape[1], frames.shape[2]
    t = 0
    T = len(occ)
    while t < T:
        if not occ[t]:
            t += 1
            continue
        end = t
        while end < T and occ[end]:
            end += 1
        hfrac, wfrac = rng.uniform(0.65, 0.95, size=2)
        hh, ww = max(1, int(hfrac * H)), max(1, int(wfrac * W))
        y0 = int(rng.integers(0, H - hh + 1))
        x0 = int(rng.integers(0, W - ww + 1))
        dark = float(rng.uniform(0.04, 0.15))
        frames[t:end, y0:y0 + hh, x0:x0 + ww, :] = dark
        t = end


def generate(spec: SynthSpec, duration_s: float, hw=(36, 36)) -> SynthSession:
    """Render one session. Pure function of (spec, duration, patch size)."""
    if duration_s < 5.0:
        raise ValueError("duration must be at least 5 s")
    H, W = hw
    # Independent child streams so that e.g. changing the RGB occlusion or the
    # illumination drift cannot perturb the IR render.
    kids = np.random.SeedSequence(spec.seed).spawn(7)
    rng_tex_rgb, rng_tex_ir, rng_occ_rgb, rng_occ_ir, rng_noise_rgb, \
        rng_noise_ir, rng_illum = (np.random.default_rng(s) for s in kids)

    n_frames = int(duration_s * VIDEO_FPS)
    frame_clock = np.round(np.arange(n_frames) * 1000.0 / VIDEO_FPS).astype(np.int64)
    t = frame_clock / 1000.0

    pulse = np.sin(2 * np.pi * spec.hr_bpm / 60.0 * t)
    resp = np.sin(2 * np.pi * spec.rr_bpm / 60.0 * t)

    ratio = spo2_to_red_ir_ratio(spec.spo2_pct)
    amp_ir = IR_PULSE_SCALE * spec.pulse_amp
    amps_rgb = np.array([ratio * amp_ir, spec.pulse_amp, BLUE_PULSE_SCALE * spec.pulse_amp])

    base_rgb = np.asarray(spec.base_rgb) * (
        1.0 + 0.03 * rng_tex_rgb.standard_normal((H, W, 1)))
    base_ir = spec.base_ir * (1.0 + 0.03 * rng_tex_ir.standard_normal((H, W, 1)))

    respm = (1.0 + spec.resp_amp * resp)[:, None, None]
    drift_freq = rng_illum.uniform(0.02, 0.08)
    drift_phase = rng_illum.uniform(0, 2 * np.pi)
    illum = 1.0 + spec.illum_drift_amp * np.sin(2 * np.pi * drift_freq * t + drift_phase)

    pulsed = 1.0 + amps_rgb[None, :] * pulse[:, None]  # [T, 3]
    rgb = base_rgb[None] * pulsed[:, None, None, :] * respm[..., None] \
        * illum[:, None, None, None]
    ir = base_ir[None] * (1.0 + amp_ir * pulse)[:, None, None, None] * respm[..., None]

    _apply_occlusion(rgb, _occlusion_mask(rng_occ_rgb, n_frames, spec.occlusion_frac_rgb),
                     rng_occ_rgb)
    _apply_occlusion(ir, _occlusion_mask(rng_occ_ir, n_frames, spec.occlusion_frac_ir),
                     rng_occ_ir)
    if spec.noise_sigma > 0:
        rgb = rgb + rng_noise_rgb.normal(0, spec.noise_sigma, rgb.shape)
        ir = ir + rng_noise_ir.normal(0, spec.noise_sigma, ir.shape)

    def trace(rate_hz, values_of_t):
        n = int(duration_s * rate_hz) + 1
        ts = np.round(np.arange(n) * 1000.0 / rate_hz).astype(np.int64)
        return dataio.TimeSeries(ts, values_of_t(ts / 1000.0), rate_hz)

    ppg = trace(PPG_RATE_HZ, lambda tt: np.sin(2 * np.pi * spec.hr_bpm / 60.0 * tt))
    rr = trace(RR_RATE_HZ, lambda tt: np.sin(2 * np.pi * spec.rr_bpm / 60.0 * tt))
    spo2 = trace(SPO2_RATE_HZ, lambda tt: np.full(len(tt), spec.spo2_pct))

    aligned = timeline.align_session(rgb, frame_clock, ir, frame_clock, ppg, rr, spo2)
    return SynthSession(spec=spec, duration_s=duration_s, rgb=rgb, ir=ir,
                        rgb_clock_ms=frame_clock, ir_clock_ms=frame_clock,
                        ppg=ppg, rr=rr, spo2=spo2, aligned=aligned)


def write_session(sess: SynthSession, out_dir) -> None:
    """Write one session in the on-disk layout consumed by dataset.scan_dataset."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_tensor(out / "rgb.tnsr", sess.rgb)
    dataio.write_tensor(out / "ir.tnsr", sess.ir)
    dataio.write_series_csv(out / "rgb_clock.csv", sess.rgb_clock_ms,
                            np.arange(len(sess.rgb_clock_ms), dtype=np.float64))
    dataio.write_series_csv(out / "ir_clock.csv", sess.ir_clock_ms,
                            np.arange(len(sess.ir_clock_ms), dtype=np.float64))
    dataio.write_series_csv(out / "ppg.csv", sess.ppg.timestamps_ms, sess.ppg.values)
    dataio.write_series_csv(out / "rr.csv", sess.rr.timestamps_ms, sess.rr.values)
    dataio.write_series_csv(out / "spo2.csv", sess.spo2.timestamps_ms, sess.spo2.values)
    payload = {"duration_s": sess.duration_s, "spec": sess.spec.to_dict()}
    (out / "synth_spec.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class SynthRanges:
    """Population-level knobs for batch generation."""

    hr_range: tuple = (50.0, 110.0)
    rr_rest_range: tuple = (10.0, 16.0)
    rr_exercise_range: tuple = (18.0, 28.0)
    spo2_rest_range: tuple = (92.0, 99.5)
    spo2_exercise_range: tuple = (82.0, 90.0)
    pulse_amp: float = 0.02
    resp_amp: float = 0.01
    occlusion_rgb: float = 0.0  # floor applied to every session
    occlusion_ir: float = 0.0
    care_occlusion: float = 0.10  # minimum during personal-care scenarios
    illum_drift_amp: float = 0.02
    noise_sigma: float = 0.005


_SCENARIO_ORDER = list(Scenario)


def _session_spec(ranges: SynthRanges, traits, scenario: Scenario, rng, seed: int):
    hr_lo, hr_hi = ranges.hr_range
    resting = traits["resting_hr"]
    care = scenario in (Scenario.SIT_CARE, Scenario.STAND_CARE)
    if scenario is Scenario.SIT_REST:
        hr = resting + rng.uniform(-3, 3)
    elif scenario is Scenario.SIT_CARE:
        hr = resting + rng.uniform(2, 10)
    elif scenario is Scenario.STAND_REST:
        hr = resting + rng.uniform(3, 12)
    elif scenario is Scenario.STAND_CARE:
        hr = resting + rng.uniform(5, 15)
    else:  # post-exercise: upper half of the population range, above resting
        hr = max((hr_lo + hr_hi) / 2.0, resting + rng.uniform(15, 40))
    hr = float(np.clip(hr, hr_lo, hr_hi))

    if scenario is Scenario.POST_EXERCISE:
        rr_bpm = rng.uniform(*ranges.rr_exercise_range)
        spo2 = rng.uniform(*ranges.spo2_exercise_range)  # lower half of range
    else:
        rr_bpm = traits["resting_rr"] + rng.uniform(-1, 2)
        rr_bpm = float(np.clip(rr_bpm, *ranges.rr_rest_range))
        spo2 = traits["spo2_base"] + rng.uniform(-1.0, 1.0)
        spo2 = float(np.clip(spo2, *ranges.spo2_rest_range))

    occ_rgb = max(ranges.occlusion_rgb, ranges.care_occlusion if care else 0.0)
    occ_ir = max(ranges.occlusion_ir, ranges.care_occlusion if care else 0.0)
    return SynthSpec(
        hr_bpm=hr, rr_bpm=rr_bpm, spo2_pct=spo2,
        pulse_amp=ranges.pulse_amp, resp_amp=ranges.resp_amp,
        occlusion_frac_rgb=occ_rgb, occlusion_frac_ir=occ_ir,
        illum_drift_amp=ranges.illum_drift_amp, noise_sigma=ranges.noise_sigma,
        seed=seed, base_rgb=traits["base_rgb"], base_ir=traits["base_ir"])


def batch_dataset(ranges: SynthRanges, n_subjects: int, n_days: int, out_dir,
                  duration_s: float = 12.0, seed: int = 0, hw=(36, 36)):
    """Emit a full on-disk tree: subjects x days x the five scenarios.

    Subject traits (skin tone, resting rates) persist across days; scenario
    draws vary per day. Returns the list of written session directories.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for si in range(n_subjects):
        t_rng = np.random.default_rng(np.random.SeedSequence((seed, 10_000 + si)))
        traits = {
            "base_rgb": tuple(t_rng.uniform(*r) for r in
                              ((0.55, 0.75), (0.42, 0.58), (0.30, 0.45))),
            "base_ir": float(t_rng.uniform(0.45, 0.68)),
            "resting_hr": float(t_rng.uniform(55, 80)),
            "resting_rr": float(t_rng.uniform(11, 15)),
            "spo2_base": float(t_rng.uniform(93.5, 98.0)),
        }
        for day in range(1, n_days + 1):
            for sc_i, scenario in enumerate(_SCENARIO_ORDER):
                ss = np.random.SeedSequence((seed, si, day, sc_i))
                rng = np.random.default_rng(ss)
                session_seed = int(ss.generate_state(1)[0])
                spec = _session_spec(ranges, traits, scenario, rng, session_seed)
                sess = generate(spec, duration_s, hw=hw)
                sdir = out / f"s{si + 1:02d}" / f"day{day:02d}" / scenario.value
                write_session(sess, sdir)
                written.append(sdir)
    return written
