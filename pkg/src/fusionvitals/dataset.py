"""On-disk session layout ("LADH-lite"), metadata, and split protocols.

Layout: ``root/<subject>/day<NN>/<scenario>/`` where each session directory
holds ``rgb.tnsr``, ``ir.tnsr``, ``rgb_clock.csv``, ``ir_clock.csv``,
``ppg.csv``, ``rr.csv`` and ``spo2.csv``. Scenario directories use the five
recording states: sit_rest, sit_care, stand_rest, stand_care, post_exercise.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass
from pathlib import Path

from . import dataio, timeline


class Scenario(enum.Enum):
    SIT_REST = "sit_rest"
    SIT_CARE = "sit_care"
    STAND_REST = "stand_rest"
    STAND_CARE = "stand_care"
    POST_EXERCISE = "post_exercise"


SESSION_FILES = (
    "rgb.tnsr",
    "ir.tnsr",
    "rgb_clock.csv",
    "ir_clock.csv",
    "ppg.csv",
    "rr.csv",
    "spo2.csv",
)


@dataclass(frozen=True)
class SessionMeta:
    subject_id: str
    day_index: int  # >= 1
    scenario: Scenario
    path: Path

    def __post_init__(self):
        if self.day_index < 1:
            raise ValueError("day_index must be >= 1")


class SplitMode(enum.Enum):
    SUBJECT_WISE = "subject"
    DAY_WISE = "day"


@dataclass(frozen=True)
class SplitPlan:
    train: list
    val: list
    test: list
    mode: SplitMode

    def __post_init__(self):
        parts = [self.train, self.val, self.test]
        key = (lambda m: m.subject_id) if self.mode is SplitMode.SUBJECT_WISE else (
            lambda m: m.day_index)
        sets = [set(map(key, p)) for p in parts]
        for i in range(3):
            for j in range(i + 1, 3):
                common = sets[i] & sets[j]
                if common:
                    raise ValueError(f"partitions share {self.mode.value}(s): {sorted(common)}")
        all_sessions = self.train + self.val + self.test
        if len({id(m) for m in all_sessions}) != len(all_sessions):
            raise ValueError("a session appears in more than one partition")


def scan_dataset(root):
    """Find complete session directories under `root`.

    Returns (sessions, skip_report) where skip_report is a list of
    ``SKIP <path> <missing-file>`` lines for incomplete directories.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"dataset root {root} is not a readable directory")
    scenario_names = {s.value: s for s in Scenario}
    sessions, skips = [], []
    for subject_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for day_dir in sorted(p for p in subject_dir.iterdir() if p.is_dir()):
            if not day_dir.name.startswith("day"):
                continue
            try:
                day_index = int(day_dir.name[3:])
            except ValueError:
                continue
            for sc_dir in sorted(p for p in day_dir.iterdir() if p.is_dir()):
                scenario = scenario_names.get(sc_dir.name)
                if scenario is None:
                    continue
                missing = [f for f in SESSION_FILES if not (sc_dir / f).is_file()]
                if missing:
                    skips.extend(f"SKIP {sc_dir} {f}" for f in missing)
                    continue
                sessions.append(
                    SessionMeta(subject_dir.name, day_index, scenario, sc_dir))
    return sessions, skips


def load_session(meta: SessionMeta) -> timeline.AlignedSession:
    """Load one session directory and align all streams onto the video clock."""
    return load_session_dir(meta.path)


def load_session_dir(path) -> timeline.AlignedSession:
    p = Path(path)
    rgb = dataio.read_tensor(p / "rgb.tnsr")
    ir = dataio.read_tensor(p / "ir.tnsr")
    rgb_clock = dataio.read_series_csv(p / "rgb_clock.csv").timestamps_ms
    ir_clock = dataio.read_series_csv(p / "ir_clock.csv").timestamps_ms
    ppg = dataio.read_series_csv(p / "ppg.csv")
    rr = dataio.read_series_csv(p / "rr.csv")
    spo2 = dataio.read_series_csv(p / "spo2.csv")
    return timeline.align_session(rgb, rgb_clock, ir, ir_clock, ppg, rr, spo2)


def split_subject_wise(sessions, train_subjects: int, val_subjects: int, seed: int) -> SplitPlan:
    """Shuffle subjects deterministically by seed and partition their sessions.

    First `train_subjects` shuffled subjects go to train, the next
    `val_subjects` to val, the remainder to test. All sessions of a subject
    travel together.
    """
    subjects = sorted({m.subject_id for m in sessions})
    if len(subjects) < train_subjects + val_subjects:
        raise ValueError(
            f"need at least {train_subjects + val_subjects} subjects, have {len(subjects)}")
    rng = random.Random(seed)
    rng.shuffle(subjects)
    train_set = set(subjects[:train_subjects])
    val_set = set(subjects[train_subjects:train_subjects + val_subjects])
    by = lambda pick: [m for m in sessions if pick(m)]
    return SplitPlan(
        train=by(lambda m: m.subject_id in train_set),
        val=by(lambda m: m.subject_id in val_set),
        test=by(lambda m: m.subject_id not in train_set and m.subject_id not in val_set),
        mode=SplitMode.SUBJECT_WISE,
    )


def split_day_wise(sessions, train_days: int, val_days: int) -> SplitPlan:
    """Chronological day split: earliest days train, latest days test."""
    days = sorted({m.day_index for m in sessions})
    if len(days) < train_days + val_days + 1:
        raise ValueError(
            f"need at least {train_days + val_days + 1} distinct days, have {len(days)}")
    train_set = set(days[:train_days])
    val_set = set(days[train_days:train_days + val_days])
    by = lambda pick: [m for m in sessions if pick(m)]
    return SplitPlan(
        train=by(lambda m: m.day_index in train_set),
        val=by(lambda m: m.day_index in val_set),
        test=by(lambda m: m.day_index not in train_set and m.day_index not in val_set),
        mode=SplitMode.DAY_WISE,
    )
