"""Model evaluation: waveform post-processing, error metrics, the device
accuracy rule, and cost/error Pareto fronts.

Predicted pressure waveforms are smoothed with a zero-phase low-pass filter
whose cutoff adapts to signal amplitude before beat labels are read off.
Metrics are mean absolute error per target plus the signed error statistics
the device rule needs, with a per-subject breakdown.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal as sp_signal

from .signals import FS_DEFAULT, extract_labels

AAMI_ME_LIMIT = 5.0
AAMI_STD_LIMIT = 8.0
AAMI_MIN_SUBJECTS = 85


# ---------------------------------------------------------------------------
# waveform smoothing
# ---------------------------------------------------------------------------

def smooth_output(series: np.ndarray, fs: float = FS_DEFAULT, coeff: float = 0.1,
                  cutoff_hz: float | None = None) -> np.ndarray:
    """Zero-phase 5th-order Butterworth low-pass along the last axis.

    The cutoff scales with signal amplitude, coeff * mean(|x|) Hz per series,
    clamped to [1, 0.45 * fs] with a warning when the clamp engages.  Pass
    cutoff_hz to pin the cutoff instead.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot smooth an empty series")
    if x.ndim == 1:
        return _smooth_1d(x, fs, coeff, cutoff_hz)
    flat = x.reshape(-1, x.shape[-1])
    out = np.stack([_smooth_1d(row, fs, coeff, cutoff_hz) for row in flat])
    return out.reshape(x.shape)


def _smooth_1d(x: np.ndarray, fs: float, coeff: float, cutoff_hz: float | None):
    fc = coeff * float(np.abs(x).mean()) if cutoff_hz is None else float(cutoff_hz)
    lo, hi = 1.0, 0.45 * fs
    if fc < lo or fc > hi:
        warnings.warn(f"adaptive cutoff {fc:.3g} Hz clamped to [{lo}, {hi:.3g}]")
        fc = min(max(fc, lo), hi)
    b, a = sp_signal.butter(5, fc, btype="low", fs=fs)
    return sp_signal.filtfilt(b, a, x)


def waveform_to_labels(abp_pred: np.ndarray, fs: float = FS_DEFAULT,
                       coeff: float = 0.1):
    """Beat labels from predicted waveforms: (N, 2) values and a valid mask.

    Each window is smoothed, then peaks and troughs are read with the same
    detector used for ground-truth labeling.  Windows where detection fails
    get a False mask entry and zeros.
    """
    x = np.asarray(abp_pred, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, 0, :]
    if x.ndim != 2:
        raise ValueError(f"expected (N, L) or (N, 1, L) waveforms, got {x.shape}")
    labels = np.zeros((x.shape[0], 2))
    valid = np.zeros(x.shape[0], dtype=bool)
    for i, row in enumerate(x):
        res = extract_labels(smooth_output(row, fs=fs, coeff=coeff), fs)
        if res is not None:
            labels[i] = (res.sbp, res.dbp)
            valid[i] = True
    return labels, valid


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    mae_sbp: float
    mae_dbp: float
    me_sbp: float
    me_dbp: float
    std_sbp: float
    std_dbp: float
    n_windows: int
    n_subjects: int
    per_subject: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save_json(self, path: str):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)


def _stats(err: np.ndarray):
    return float(np.abs(err).mean()), float(err.mean()), float(err.std())


def compute_mae(preds: np.ndarray, truths: np.ndarray,
                subjects=None) -> MetricsReport:
    """Error report over (N, 2) prediction/truth pairs, columns (SBP, DBP)."""
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {truths.shape}")
    if preds.ndim != 2 or preds.shape[1] != 2 or preds.shape[0] == 0:
        raise ValueError(f"expected nonempty (N, 2) arrays, got {preds.shape}")
    err = preds - truths
    mae_s, me_s, std_s = _stats(err[:, 0])
    mae_d, me_d, std_d = _stats(err[:, 1])
    per_subject = {}
    if subjects is not None:
        subjects = list(subjects)
        if len(subjects) != len(preds):
            raise ValueError("one subject id per pair required")
        for sid in sorted(set(subjects)):
            rows = err[np.asarray(subjects) == sid]
            per_subject[sid] = {"mae_sbp": float(np.abs(rows[:, 0]).mean()),
                                "mae_dbp": float(np.abs(rows[:, 1]).mean()),
                                "n": int(len(rows))}
    return MetricsReport(mae_s, mae_d, me_s, me_d, std_s, std_d,
                         n_windows=len(preds),
                         n_subjects=len(per_subject) if per_subject else 0,
                         per_subject=per_subject)


def aami_check(report: MetricsReport) -> tuple[bool, str]:
    """Device accuracy rule: |mean error| <= 5 and error std <= 8, per target."""
    ok = (abs(report.me_sbp) <= AAMI_ME_LIMIT and report.std_sbp <= AAMI_STD_LIMIT
          and abs(report.me_dbp) <= AAMI_ME_LIMIT
          and report.std_dbp <= AAMI_STD_LIMIT)
    note = "pass" if ok else "fail"
    if report.n_subjects < AAMI_MIN_SUBJECTS:
        note += (f"; cohort has {report.n_subjects} subjects, below the "
                 f"{AAMI_MIN_SUBJECTS}-subject minimum the standard requires")
    return ok, note


# ---------------------------------------------------------------------------
# Pareto fronts
# ---------------------------------------------------------------------------

@dataclass
class ParetoPoint:
    cost: float
    mae_sbp: float
    mae_dbp: float
    stage: str = ""
    lambda_: float = 0.0
    model_ref: str = ""

    def __post_init__(self):
        if not self.cost > 0:
            raise ValueError(f"cost must be positive, got {self.cost}")

    def mae(self, objective: str) -> float:
        if objective not in ("sbp", "dbp"):
            raise ValueError(f"objective must be sbp or dbp, got {objective!r}")
        return self.mae_sbp if objective == "sbp" else self.mae_dbp


def pareto_front(points, objective: str = "sbp"):
    """Non-dominated subset under (cost down, error down), sorted by cost.

    A point is dropped only when another point is at least as good on both
    axes and strictly better on one; exact ties on both axes are all kept.
    """
    points = list(points)
    if not points:
        raise ValueError("no points given")
    kept = []
    for p in points:
        dominated = False
        for q in points:
            if (q.cost <= p.cost and q.mae(objective) <= p.mae(objective)
                    and (q.cost < p.cost or q.mae(objective) < p.mae(objective))):
                dominated = True
                break
        if not dominated:
            kept.append(p)
    return sorted(kept, key=lambda p: p.cost)


def points_to_csv(points, path: str):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cost", "mae_sbp", "mae_dbp", "stage", "lambda", "model_ref"])
        for p in points:
            w.writerow([repr(p.cost), repr(p.mae_sbp), repr(p.mae_dbp),
                        p.stage, repr(p.lambda_), p.model_ref])


def points_from_csv(path: str):
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(ParetoPoint(float(row["cost"]), float(row["mae_sbp"]),
                                   float(row["mae_dbp"]), row["stage"],
                                   float(row["lambda"]), row["model_ref"]))
    return out


def scatter_svg(points, path: str, objective: str = "sbp",
                front=None, title: str = "cost vs error"):
    """Cost/error scatter with the front highlighted, written as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    stages = sorted({p.stage for p in points})
    for stage in stages:
        pts = [p for p in points if p.stage == stage]
        ax.scatter([p.cost for p in pts], [p.mae(objective) for p in pts],
                   s=18, alpha=0.7, label=stage or "points")
    if front:
        xs = [p.cost for p in front]
        ys = [p.mae(objective) for p in front]
        ax.plot(xs, ys, "k--", lw=1, label="front")
    ax.set_xscale("log")
    ax.set_xlabel("cost")
    ax.set_ylabel(f"MAE {objective.upper()} [mmHg]")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
