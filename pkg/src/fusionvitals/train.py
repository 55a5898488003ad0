"""Joint multi-task loss, the optimizer loop, and metric evaluation.

The loss couples the three tasks:

    loss = MSE_bvp + MSE_rr + coeff * MSE_spo2 * (100 - spo2_gt)

with coeff defaulting to 0.002. The SpO2 weight uses the ground-truth window
mean, so hypoxic windows weigh more and a perfect-saturation window (100%)
contributes nothing; using the prediction there instead would let the model
zero its own penalty by predicting 100.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import sigproc, timeline

TASKS = ("bvp", "rr", "spo2")
# CLI-facing task names map onto loss mask entries.
TASK_ALIASES = {"hr": "bvp", "bvp": "bvp", "rr": "rr", "spo2": "spo2"}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 9e-3
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    loss_spo2_coeff: float = 0.002
    task_mask: tuple = TASKS

    def __post_init__(self):
        object.__setattr__(self, "task_mask", tuple(self.task_mask))
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        unknown = set(self.task_mask) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")
        if not self.task_mask:
            raise ValueError("task_mask must be nonempty")

    def to_dict(self):
        return {"lr": self.lr, "epochs": self.epochs, "batch_size": self.batch_size,
                "seed": self.seed, "loss_spo2_coeff": self.loss_spo2_coeff,
                "task_mask": list(self.task_mask)}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch, terms):
        self.epoch, self.batch, self.terms = epoch, batch, terms
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {terms}")


def joint_loss(bvp_hat, bvp_gt, rr_hat, rr_gt, spo2_hat, spo2_gt,
               coeff: float = 0.002, mask=TASKS):
    """Masked multi-task loss and its partials w.r.t. each prediction.

    Returns (loss, partials) with partials = {"bvp": [L], "rr": [L],
    "spo2": float}; masked-out tasks contribute zero loss and zero partials.
    """
    bvp_hat = np.asarray(bvp_hat, dtype=np.float64)
    bvp_gt = np.asarray(bvp_gt, dtype=np.float64)
    rr_hat = np.asarray(rr_hat, dtype=np.float64)
    rr_gt = np.asarray(rr_gt, dtype=np.float64)
    if bvp_hat.shape != bvp_gt.shape or rr_hat.shape != rr_gt.shape:
        raise ValueError("prediction/target length mismatch")
    if not 0.0 <= spo2_gt <= 100.0:
        raise ValueError(f"spo2_gt {spo2_gt} outside [0, 100]")

    L = bvp_hat.shape[-1]
    loss = 0.0
    d_bvp = np.zeros_like(bvp_hat)
    d_rr = np.zeros_like(rr_hat)
    d_spo2 = 0.0
    if "bvp" in mask:
        r = bvp_hat - bvp_gt
        loss += float(np.mean(r ** 2))
        d_bvp = 2.0 * r / L
    if "rr" in mask:
        r = rr_hat - rr_gt
        loss += float(np.mean(r ** 2))
        d_rr = 2.0 * r / L
    if "spo2" in mask:
        w = coeff * (100.0 - spo2_gt)
        e = spo2_hat - spo2_gt
        loss += float(w * e * e)
        d_spo2 = 2.0 * w * e
    return loss, {"bvp": d_bvp, "rr": d_rr, "spo2": d_spo2}


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)  # one entry per epoch
    val_loss: list = field(default_factory=list)
    selected_epoch: int = -1  # argmin val loss, ties -> earliest
    metrics: dict = field(default_factory=dict)  # split -> task -> {mae, mape}
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"train_loss": self.train_loss, "val_loss": self.val_loss,
             "selected_epoch": self.selected_epoch, "metrics": self.metrics,
             "config": self.config},
            indent=2, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())


def _batch_loss(params, windows, cfg: TrainConfig, want_grad: bool):
    """Mean loss over one window batch; optionally the mean flat gradient."""
    res = model_mod.forward_batch(
        [w.rgb for w in windows], [w.ir for w in windows], params,
        want_cache=want_grad)
    n = len(windows)
    total = 0.0
    d_bvp = np.zeros_like(res.bvp)
    d_rr = np.zeros_like(res.rr)
    d_spo2 = np.zeros(n)
    terms = []
    for i, w in enumerate(windows):
        loss_i, parts = joint_loss(res.bvp[i], w.bvp, res.rr[i], w.rr,
                                   float(res.spo2[i]), w.spo2_mean,
                                   coeff=cfg.loss_spo2_coeff, mask=cfg.task_mask)
        total += loss_i
        terms.append(loss_i)
        d_bvp[i] = parts["bvp"] / n
        d_rr[i] = parts["rr"] / n
        d_spo2[i] = parts["spo2"] / n
    mean_loss = total / n
    if not want_grad:
        return mean_loss, None
    grad = model_mod.backward_batch(params, res, d_bvp, d_rr, d_spo2)
    return mean_loss, grad


def _dataset_loss(params, windows, cfg: TrainConfig, batch_size: int) -> float:
    total, n = 0.0, 0
    for s in range(0, len(windows), batch_size):
        chunk = windows[s:s + batch_size]
        loss, _ = _batch_loss(params, chunk, cfg, want_grad=False)
        total += loss * len(chunk)
        n += len(chunk)
    return total / n


def train(model_config: model_mod.ModelConfig, cfg: TrainConfig,
          train_windows, val_windows):
    """Mini-batch Adam over the joint loss; returns the best-validation params.

    Deterministic for a fixed seed: parameter init, epoch shuffles, and
    gradient accumulation order are all seeded or fixed.
    """
    if not train_windows or not val_windows:
        raise ValueError("train and val window sets must be nonempty")
    params = model_mod.init_params(model_config, cfg.seed)
    m = np.zeros_like(params.flat)
    v = np.zeros_like(params.flat)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(config={"model": model_config.to_dict(),
                                 "train": cfg.to_dict()})
    best_val = np.inf
    best_params = params.copy()

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_windows))
        epoch_loss, seen = 0.0, 0
        for bi, s in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_windows[j] for j in order[s:s + cfg.batch_size]]
            loss, grad = _batch_loss(params, batch, cfg, want_grad=True)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, bi, {"loss": loss})
            epoch_loss += loss * len(batch)
            seen += len(batch)
            step += 1
            m = beta1 * m + (1 - beta1) * grad
            v = beta2 * v + (1 - beta2) * grad * grad
            m_hat = m / (1 - beta1 ** step)
            v_hat = v / (1 - beta2 ** step)
            params.flat -= cfg.lr * m_hat / (np.sqrt(v_hat) + eps)

        val = _dataset_loss(params, val_windows, cfg, cfg.batch_size)
        if not np.isfinite(val):
            raise TrainingDiverged(epoch, -1, {"val_loss": val})
        report.train_loss.append(epoch_loss / seen)
        report.val_loss.append(val)
        if val < best_val:
            best_val = val
            report.selected_epoch = epoch
            best_params = params.copy()
    return best_params, report


# ---------------------------------------------------------------------------
# evaluation


def _predict_session(params, session, window_len, stride):
    """Per-window predictions for one aligned session (the default predictor)."""
    batch = timeline.make_windows(session, window_len, stride)
    res = model_mod.forward_batch([w.rgb for w in batch.windows],
                                  [w.ir for w in batch.windows], params)
    return res.bvp, res.rr, res.spo2, batch


def evaluate(params, sessions, window_len: int = 150, stride: int | None = None,
             hr_band: sigproc.SpectralBand = sigproc.HR_BAND,
             rr_band: sigproc.SpectralBand = sigproc.RR_BAND,
             predict_fn=None) -> dict:
    """MAE/MAPE per task over per-session estimates.

    HR and RR come from the dominant spectral rate of each predicted window
    waveform, averaged over the session's windows; ground truth runs through
    the same estimator on the reference waveforms so both sides share the
    spectral resolution. SpO2 compares session means of the per-window values.
    `predict_fn(session) -> (bvp [N,L], rr [N,L], spo2 [N], WindowBatch)` can
    replace the model-driven predictor (used for estimator-only checks).
    """
    if not sessions:
        raise ValueError("empty session list")
    stride = stride if stride is not None else window_len
    if predict_fn is None:
        predict_fn = lambda s: _predict_session(params, s, window_len, stride)

    est = {t: {"pred": [], "gt": []} for t in ("hr", "rr", "spo2")}
    for session in sessions:
        bvp_hat, rr_hat, spo2_hat, batch = predict_fn(session)
        fs = session.fs_hz
        wins = batch.windows
        est["hr"]["pred"].append(np.mean(
            [sigproc.dominant_rate_bpm(bvp_hat[i], fs, hr_band) for i in range(len(wins))]))
        est["hr"]["gt"].append(np.mean(
            [sigproc.dominant_rate_bpm(w.bvp, fs, hr_band) for w in wins]))
        est["rr"]["pred"].append(np.mean(
            [sigproc.dominant_rate_bpm(rr_hat[i], fs, rr_band) for i in range(len(wins))]))
        est["rr"]["gt"].append(np.mean(
            [sigproc.dominant_rate_bpm(w.rr, fs, rr_band) for w in wins]))
        est["spo2"]["pred"].append(float(np.mean(spo2_hat)))
        est["spo2"]["gt"].append(float(np.mean([w.spo2_mean for w in wins])))

    return {task: {"mae": sigproc.mae(d["pred"], d["gt"]),
                   "mape": sigproc.mape(d["pred"], d["gt"])}
            for task, d in est.items()}


def metrics_to_csv(metrics: dict) -> str:
    lines = ["task,mae,mape"]
    for task in ("hr", "spo2", "rr"):
        m = metrics[task]
        lines.append(f"{task},{m['mae']:.6f},{m['mape']:.6f}")
    return "\n".join(lines) + "\n"


def metrics_to_table(metrics: dict, row_label: str) -> str:
    """Plain-text table in the usual benchmark layout (tasks x MAE/MAPE)."""
    header = (f"{'Training Set':<24}"
              f"{'HR MAE':>9}{'HR MAPE':>10}"
              f"{'SpO2 MAE':>10}{'SpO2 MAPE':>11}"
              f"{'RR MAE':>9}{'RR MAPE':>10}")
    row = (f"{row_label:<24}"
           f"{metrics['hr']['mae']:>9.2f}{metrics['hr']['mape']:>10.2f}"
           f"{metrics['spo2']['mae']:>10.2f}{metrics['spo2']['mape']:>11.2f}"
           f"{metrics['rr']['mae']:>9.2f}{metrics['rr']['mape']:>10.2f}")
    return header + "\n" + row + "\n"
