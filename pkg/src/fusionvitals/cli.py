"""Command-line entry point: synth / train / eval / infer.

Exit codes: 0 success, 1 runtime failure, 2 usage error. A JSON config file
can set any training/model/windowing field; explicit flags override it.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset, sigproc, synth, timeline, train as train_mod
from .dataio import write_series_csv
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, TASK_ALIASES

DEFAULT_WINDOW_LEN = 150
DEFAULT_STRIDE = 60

SPLIT_DEFAULTS = {"train_subjects": 8, "val_subjects": 3,
                  "train_days": 7, "val_days": 2, "seed": 0}


def _load_config_file(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as e:
        raise RuntimeError(f"cannot read config file: {e}") from e
    except json.JSONDecodeError as e:
        raise RuntimeError(f"config file {path}: invalid JSON at line {e.lineno}, "
                           f"column {e.colno}: {e.msg}") from e
    if not isinstance(cfg, dict):
        raise RuntimeError(f"config file {path}: top level must be an object")
    return cfg


def _merged(file_section: dict, overrides: dict) -> dict:
    out = dict(file_section)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _build_model_config(cfg_file, args, in_hw, window_len) -> ModelConfig:
    section = dict(cfg_file.get("model", {}))
    section.setdefault("in_hw", list(in_hw))
    section["window_len"] = window_len
    section["modality"] = args.modality
    try:
        return ModelConfig.from_dict({**ModelConfig().to_dict(), **section})
    except (TypeError, ValueError) as e:
        raise RuntimeError(f"config field 'model': {e}") from e


def _parse_tasks(tasks_arg: str):
    mask = []
    for name in tasks_arg.split(","):
        name = name.strip().lower()
        if name not in TASK_ALIASES:
            raise RuntimeError(f"unknown task {name!r}; choose from hr, spo2, rr")
        alias = TASK_ALIASES[name]
        if alias not in mask:
            mask.append(alias)
    return tuple(mask)


def _scan_and_split(args, cfg_file):
    sessions, skips = dataset.scan_dataset(args.data)
    for line in skips:
        print(line, file=sys.stderr)
    if getattr(args, "subject", None):
        sessions = [m for m in sessions if m.subject_id == args.subject]
    if not sessions:
        raise RuntimeError(f"no complete sessions under {args.data}")
    sp = {**SPLIT_DEFAULTS, **cfg_file.get("split", {})}
    for key in ("train_subjects", "val_subjects", "train_days", "val_days"):
        v = getattr(args, key, None)
        if v is not None:
            sp[key] = v
    if getattr(args, "seed_split", None) is not None:
        sp["seed"] = args.seed_split
    if args.split == "subject":
        return dataset.split_subject_wise(sessions, sp["train_subjects"],
                                          sp["val_subjects"], sp["seed"])
    return dataset.split_day_wise(sessions, sp["train_days"], sp["val_days"])


def _load_windows(metas, window_len, stride):
    sessions, windows = [], []
    for meta in metas:
        aligned = dataset.load_session(meta)
        sessions.append(aligned)
        windows.extend(timeline.make_windows(aligned, window_len, stride).windows)
    return sessions, windows


def _row_label(modality: str, task_mask) -> str:
    name = {"both": "Both", "rgb": "RGB", "ir": "IR"}[modality]
    kind = "Multi Task" if len(set(task_mask)) == 3 else "Single Task"
    return f"{name}({kind})"


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    ranges = synth.SynthRanges(
        occlusion_rgb=args.occlusion_rgb, occlusion_ir=args.occlusion_ir,
        illum_drift_amp=args.illum_drift, noise_sigma=args.noise_sigma)
    written = synth.batch_dataset(ranges, args.subjects, args.days, args.out,
                                  duration_s=args.duration, seed=args.seed,
                                  hw=(args.patch, args.patch))
    print(f"{len(written)} sessions")
    return 0


def cmd_train(args) -> int:
    cfg_file = _load_config_file(args.config)
    window_len = args.window_len or cfg_file.get("window_len", DEFAULT_WINDOW_LEN)
    stride = args.stride or cfg_file.get("stride", DEFAULT_STRIDE)

    plan = _scan_and_split(args, cfg_file)
    if not plan.train or not plan.val:
        raise RuntimeError("split produced an empty train or val partition")

    train_sessions, train_windows = _load_windows(plan.train, window_len, stride)
    val_sessions, val_windows = _load_windows(plan.val, window_len, stride)

    hw = train_sessions[0].rgb.shape[1:3]
    model_cfg = _build_model_config(cfg_file, args, hw, window_len)

    tsec = _merged(cfg_file.get("train", {}),
                   {"lr": args.lr, "epochs": args.epochs, "batch_size": args.batch_size,
                    "seed": args.seed, "loss_spo2_coeff": args.spo2_coeff})
    tsec["task_mask"] = _parse_tasks(args.tasks)
    try:
        train_cfg = TrainConfig(**tsec)
    except (TypeError, ValueError) as e:
        raise RuntimeError(f"config field 'train': {e}") from e

    print(f"training {_row_label(args.modality, train_cfg.task_mask)}: "
          f"{len(train_windows)} train / {len(val_windows)} val windows, "
          f"{train_cfg.epochs} epochs, batch {train_cfg.batch_size}, lr {train_cfg.lr}")
    params, report = train_mod.train(model_cfg, train_cfg, train_windows, val_windows)
    for e, (tl, vl) in enumerate(zip(report.train_loss, report.val_loss)):
        print(f"  epoch {e + 1:3d}/{train_cfg.epochs}  train {tl:.5f}  val {vl:.5f}")
    print(f"selected epoch {report.selected_epoch + 1} "
          f"(val {report.val_loss[report.selected_epoch]:.5f})")

    for split_name, sessions in (("train", train_sessions), ("val", val_sessions)):
        report.metrics[split_name] = train_mod.evaluate(
            params, sessions, window_len=window_len, stride=stride)
    if plan.test:
        test_sessions = [dataset.load_session(m) for m in plan.test]
        report.metrics["test"] = train_mod.evaluate(
            params, test_sessions, window_len=window_len, stride=stride)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint", params)
    report.save(out / "train_report.json")
    for split_name, metrics in report.metrics.items():
        print(f"[{split_name}] " + ", ".join(
            f"{t} MAE {m['mae']:.2f}" for t, m in metrics.items()))
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(_checkpoint_stem(args.checkpoint))
    cfg_file = _load_config_file(args.config)
    window_len = args.window_len or cfg_file.get("window_len",
                                                 params.config.window_len)
    stride = args.stride or cfg_file.get("stride", DEFAULT_STRIDE)
    plan = _scan_and_split(args, cfg_file)
    metas = {"train": plan.train, "val": plan.val, "test": plan.test}[args.partition]
    if not metas:
        raise RuntimeError(f"partition {args.partition!r} is empty")
    sessions = [dataset.load_session(m) for m in metas]
    metrics = train_mod.evaluate(params, sessions, window_len=window_len, stride=stride)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(train_mod.metrics_to_csv(metrics))
    label = _row_label(params.config.modality, ("bvp", "rr", "spo2"))
    table = train_mod.metrics_to_table(metrics, label)
    (out / "metrics.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_infer(args) -> int:
    params = load_checkpoint(_checkpoint_stem(args.checkpoint))
    session = dataset.load_session_dir(args.session)
    window_len = params.config.window_len
    bvp_hat, rr_hat, spo2_hat, batch = train_mod._predict_session(
        params, session, window_len, stride=window_len)

    # Non-overlapping windows: concatenate per-frame predictions.
    n = len(batch.windows)
    covered = session.frame_clock_ms[:n * window_len]
    centers = [session.frame_clock_ms[i * window_len + window_len // 2] for i in range(n)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_series_csv(out / "bvp.csv", covered, bvp_hat.reshape(-1))
    write_series_csv(out / "rr.csv", covered, rr_hat.reshape(-1))
    write_series_csv(out / "spo2.csv", centers, spo2_hat)

    fs = session.fs_hz
    hr = float(np.mean([sigproc.dominant_rate_bpm(bvp_hat[i], fs, sigproc.HR_BAND)
                        for i in range(n)]))
    rr = float(np.mean([sigproc.dominant_rate_bpm(rr_hat[i], fs, sigproc.RR_BAND)
                        for i in range(n)]))
    spo2 = float(np.mean(spo2_hat))
    print(f"HR={hr:.1f} BPM RR={rr:.1f} BPM SpO2={spo2:.1f}%")
    return 0


def _checkpoint_stem(path) -> Path:
    p = Path(path)
    if p.suffix in (".tnsr", ".json"):
        p = p.with_suffix("")
    if not p.with_suffix(".tnsr").is_file() or not p.with_suffix(".json").is_file():
        raise RuntimeError(f"checkpoint not found at {p}(.tnsr/.json)")
    return p


# ---------------------------------------------------------------------------
# argument parsing


def _add_split_flags(p):
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--split", choices=("subject", "day"), required=True)
    p.add_argument("--subject", help="restrict to one subject id (day-wise use)")
    p.add_argument("--train-subjects", type=int, dest="train_subjects")
    p.add_argument("--val-subjects", type=int, dest="val_subjects")
    p.add_argument("--train-days", type=int, dest="train_days")
    p.add_argument("--val-days", type=int, dest="val_days")
    p.add_argument("--split-seed", type=int, dest="seed_split", default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fusionvitals",
        description="HR/RR/SpO2 estimation from synchronized RGB+IR facial video")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset tree")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--days", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=12.0, help="seconds per session")
    p.add_argument("--patch", type=int, default=36, help="square patch size in pixels")
    p.add_argument("--occlusion-rgb", type=float, default=0.0, dest="occlusion_rgb")
    p.add_argument("--occlusion-ir", type=float, default=0.0, dest="occlusion_ir")
    p.add_argument("--illum-drift", type=float, default=0.02, dest="illum_drift")
    p.add_argument("--noise-sigma", type=float, default=0.005, dest="noise_sigma")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset tree")
    _add_split_flags(p)
    p.add_argument("--modality", choices=("rgb", "ir", "both"), default="both")
    p.add_argument("--tasks", default="hr,spo2,rr",
                   help="comma-separated subset of hr,spo2,rr")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--spo2-coeff", type=float, dest="spo2_coeff", default=None)
    p.add_argument("--window-len", type=int, dest="window_len", default=None)
    p.add_argument("--stride", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split partition")
    _add_split_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--partition", choices=("train", "val", "test"), default="test")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True)
    p.add_argument("--window-len", type=int, dest="window_len", default=None)
    p.add_argument("--stride", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="run one session through a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--session", required=True, help="one session directory")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # runtime failures -> exit 1 with a message
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
