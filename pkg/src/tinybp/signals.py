"""Signal acquisition, cleaning, windowing, and split management.

Covers the data path from raw (or synthesized) PPG/ABP recordings to
training-ready 5 s windows:

* deterministic synthetic cohort generator with per-subject blood-pressure
  baselines and BP-dependent pulse morphology,
* cross-correlation alignment of PPG against ABP,
* non-overlapping windowing with physiological plausibility checks,
* beat detection, SBP/DBP label extraction, PPG baseline correction,
* subject-wise k-fold splits and per-subject fine-tuning splits.

Thresholds that gate window quality are declared defaults here, not derived
quantities; they are parameters on the public functions.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.signal import correlate, find_peaks

FS_DEFAULT = 125
WINDOW_SECONDS = 5.0

# plausibility bounds for ABP windows
ABP_MIN, ABP_MAX = 30.0, 220.0
PULSE_PRESSURE_MIN = 10.0
HR_MIN, HR_MAX = 35.0, 140.0
# beat detector: minimum inter-peak spacing uses a 200 BPM detection cap so
# that rates above the 140 BPM plausibility limit remain measurable
HR_DETECT_CAP = 200.0
PROMINENCE_FRAC = 0.1
MIN_BEATS = 3
# PPG quality: peak/valley amplitude spread relative to the mean pulse span
PPG_STD_FRAC = 0.25

REASON_AMPLITUDE = "amplitude"
REASON_BEATS = "beats"
REASON_PULSE_PRESSURE = "pulse pressure"
REASON_HEART_RATE = "heart rate"
REASON_PPG_QUALITY = "ppg quality"


@dataclass
class SubjectRecord:
    subject_id: str
    fs: float
    ppg: np.ndarray
    abp: np.ndarray | None = None
    sbp: float | None = None  # discrete labels for recordings without an ABP waveform
    dbp: float | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class Window:
    subject_id: str
    index: int
    ppg: np.ndarray
    abp: np.ndarray | None
    sbp: float | None
    dbp: float | None
    valid: bool
    reason: str | None = None


@dataclass
class LabelResult:
    sbp: float
    dbp: float
    n_beats: int
    hr: float
    peak_idx: np.ndarray


# ---------------------------------------------------------------------------
# synthetic cohort
# ---------------------------------------------------------------------------

def synth_generate(n_subjects: int, seconds: float = 60.0, fs: float = FS_DEFAULT,
                   seed: int = 0) -> list[SubjectRecord]:
    """Generate a deterministic synthetic PPG/ABP cohort.

    Per subject: baseline SBP in [90, 180] and DBP in [50, 110] mmHg with a
    guaranteed pulse pressure, heart rate in [40, 130] BPM, slow drifts, and
    a PPG built as a phase-lagged, amplitude-normalized nonlinear transform
    of the ABP plus baseline wander and noise.  Systolic width and dicrotic
    bump height depend on the drawn pressures so the task is learnable from
    pulse shape alone.  Bitwise identical output for identical arguments.
    """
    rng = np.random.default_rng(seed)
    n = int(round(seconds * fs))
    t = np.arange(n) / fs
    records = []
    for si in range(n_subjects):
        dbp0 = rng.uniform(50.0, 110.0)
        pp = rng.uniform(28.0, 70.0)
        sbp0 = float(np.clip(dbp0 + pp, 90.0, 180.0))
        hr0 = rng.uniform(40.0, 130.0)
        lag_s = rng.uniform(0.15, 0.35)
        # systolic width and dicrotic shoulder are tied to the drawn pressures
        # so the regression target is recoverable from pulse shape; the
        # shoulder is kept on the falling edge (never a second local max) so
        # beat detection stays unambiguous
        width = 0.10 + 0.05 * (180.0 - sbp0) / 90.0
        bump = 0.15 + 0.30 * (dbp0 - 50.0) / 60.0
        ph1, ph2, ph3, ph4 = rng.uniform(0, 2 * np.pi, size=4)

        abp = np.empty(n)
        start = 0.0
        while start < seconds:
            period = 60.0 / hr0 * (1.0 + 0.02 * float(np.clip(rng.standard_normal(), -2, 2)))
            i0 = int(round(start * fs))
            i1 = min(int(round((start + period) * fs)), n)
            if i1 <= i0:
                break
            center = 0.5 * (start + start + period)
            sbp_c = sbp0 + 1.2 * math.sin(2 * np.pi * center / 45.0 + ph1)
            dbp_c = dbp0 + 0.9 * math.sin(2 * np.pi * center / 37.0 + ph2)
            phase = np.arange(i1 - i0) / max(i1 - i0, 1)
            shape = (np.exp(-0.5 * ((phase - 0.28) / width) ** 2)
                     + bump * np.exp(-0.5 * ((phase - 0.50) / 0.13) ** 2))
            shape = (shape - shape.min()) / (shape.max() - shape.min())
            abp[i0:i1] = dbp_c + (sbp_c - dbp_c) * shape
            start += period
        abp += 0.15 * rng.standard_normal(n)

        lag = int(round(lag_s * fs))
        src = np.concatenate([np.full(lag, abp[0]), abp[:-lag]]) if lag else abp.copy()
        z = (src - src.mean()) / src.std()
        ppg = np.tanh(0.8 * z)
        ppg = (ppg - ppg.min()) / (ppg.max() - ppg.min())
        gain = rng.uniform(0.7, 1.3)
        ppg = gain * ppg
        ppg = ppg + 0.05 * np.sin(2 * np.pi * t / 9.0 + ph3) \
                  + 0.03 * np.sin(2 * np.pi * t / 23.0 + ph4) \
                  + 0.008 * rng.standard_normal(n)

        records.append(SubjectRecord(
            subject_id=f"S{si:03d}", fs=fs, ppg=ppg, abp=abp,
            meta={"sbp0": sbp0, "dbp0": dbp0, "hr0": hr0, "lag_s": lag_s}))
    return records


def save_records(records: list[SubjectRecord], dirpath: str):
    os.makedirs(dirpath, exist_ok=True)
    for rec in records:
        path = os.path.join(dirpath, rec.subject_id + ".csv")
        tcol = np.arange(len(rec.ppg)) / rec.fs
        with open(path, "w") as f:
            f.write("time,ppg,abp\n")
            for ti, pi, ai in zip(tcol, rec.ppg, rec.abp):
                f.write(f"{ti:.6f},{pi:.8f},{ai:.6f}\n")


def load_records(dirpath: str, fs: float = FS_DEFAULT) -> list[SubjectRecord]:
    """Read one CSV per subject: time,ppg,abp or time,ppg,sbp,dbp (discrete labels)."""
    records = []
    for name in sorted(os.listdir(dirpath)):
        if not name.endswith(".csv"):
            continue
        path = os.path.join(dirpath, name)
        with open(path) as f:
            header = f.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        cols = {h: data[:, i] for i, h in enumerate(header)}
        if "ppg" not in cols:
            raise ValueError(f"{name}: missing required 'ppg' column")
        sid = os.path.splitext(name)[0]
        if "abp" in cols:
            records.append(SubjectRecord(sid, fs, cols["ppg"], abp=cols["abp"]))
        elif "sbp" in cols and "dbp" in cols:
            records.append(SubjectRecord(sid, fs, cols["ppg"], abp=None,
                                         sbp=float(cols["sbp"][0]), dbp=float(cols["dbp"][0])))
        else:
            raise ValueError(f"{name}: need either an 'abp' column or 'sbp'+'dbp' columns")
    return records


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------

def align_xcorr(ppg: np.ndarray, abp: np.ndarray, fs: float,
                max_lag_s: float = 2.0) -> tuple[np.ndarray, np.ndarray, int]:
    """Align ABP against PPG by the peak of their normalized cross-correlation.

    Returns (ppg_aligned, abp_aligned, shift) where ``shift`` is the number of
    samples ABP lags PPG (negative when PPG lags ABP).  The search is limited
    to +-max_lag_s.  Raises on constant signals.
    """
    if len(ppg) != len(abp):
        raise ValueError("ppg and abp must have equal length")
    if ppg.std() == 0 or abp.std() == 0:
        raise ValueError("cannot align constant (zero-variance) signals")
    n = len(ppg)
    a = (abp - abp.mean()) / abp.std()
    p = (ppg - ppg.mean()) / ppg.std()
    corr = correlate(a, p, mode="full")
    lags = np.arange(-(n - 1), n)
    max_lag = int(round(max_lag_s * fs))
    sel = np.abs(lags) <= max_lag
    shift = int(lags[sel][np.argmax(corr[sel])])
    if shift >= 0:
        return ppg[:n - shift] if shift else ppg.copy(), abp[shift:], shift
    return ppg[-shift:], abp[:n + shift], shift


# ---------------------------------------------------------------------------
# beats, labels, quality
# ---------------------------------------------------------------------------

def _detect_peaks(x: np.ndarray, fs: float) -> np.ndarray:
    rng_x = float(x.max() - x.min())
    dist = max(1, int(fs * 60.0 / HR_DETECT_CAP))
    peaks, _ = find_peaks(x, distance=dist, prominence=max(PROMINENCE_FRAC * rng_x, 1e-9))
    return peaks


def extract_labels(abp_seg: np.ndarray, fs: float) -> LabelResult | None:
    """SBP/DBP labels from an ABP window.

    SBP is the median of per-cycle maxima (systolic peaks), DBP the median of
    the minima between consecutive peaks.  Heart rate comes from the median
    inter-peak interval.  Returns None when fewer than MIN_BEATS beats are
    found, which marks the window invalid.
    """
    peaks = _detect_peaks(abp_seg, fs)
    if len(peaks) < MIN_BEATS:
        return None
    troughs = [float(abp_seg[a:b].min()) for a, b in zip(peaks[:-1], peaks[1:])]
    sbp = float(np.median(abp_seg[peaks]))
    dbp = float(np.median(troughs))
    hr = 60.0 * fs / float(np.median(np.diff(peaks)))
    return LabelResult(sbp=sbp, dbp=dbp, n_beats=len(peaks), hr=hr, peak_idx=peaks)


def ppg_quality_ok(ppg_seg: np.ndarray, fs: float,
                   std_frac: float = PPG_STD_FRAC) -> bool:
    """Reject windows whose peak or valley amplitudes are too dispersed.

    The spread of systolic peak (and valley) amplitudes is compared against
    ``std_frac`` times the mean peak-to-valley span of the window.
    """
    peaks = _detect_peaks(ppg_seg, fs)
    valleys = _detect_peaks(-ppg_seg, fs)
    if len(peaks) < 2 or len(valleys) < 2:
        return False
    pk, vl = ppg_seg[peaks], ppg_seg[valleys]
    span = float(pk.mean() - vl.mean())
    if span <= 0:
        return False
    return pk.std() <= std_frac * span and vl.std() <= std_frac * span


def baseline_correct(ppg_seg: np.ndarray, fs: float) -> np.ndarray:
    """Subtract the baseline interpolated through the PPG valleys.

    Cubic spline when there are at least 4 valleys, linear interpolation
    otherwise; either way the valley samples land within float tolerance of
    zero.  Raises when fewer than 2 valleys exist.
    """
    valleys = _detect_peaks(-ppg_seg, fs)
    if len(valleys) < 2:
        raise ValueError("baseline correction needs at least 2 PPG valleys")
    x = np.arange(len(ppg_seg), dtype=float)
    if len(valleys) >= 4:
        base = CubicSpline(valleys.astype(float), ppg_seg[valleys], extrapolate=True)(x)
    else:
        base = np.interp(x, valleys.astype(float), ppg_seg[valleys])
    return ppg_seg - base


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

def segment_and_filter(record: SubjectRecord, window_s: float = WINDOW_SECONDS,
                       std_frac: float = PPG_STD_FRAC) -> list[Window]:
    """Cut a record into non-overlapping windows and screen each one.

    Checks run in a fixed order and the first failure is recorded as the
    rejection reason: amplitude bounds, beat count, pulse pressure, heart
    rate, then PPG quality.  Valid windows carry baseline-corrected PPG and
    median SBP/DBP labels.  Leftover samples after the last full window are
    dropped.
    """
    fs = record.fs
    wlen = int(round(window_s * fs))
    n_win = len(record.ppg) // wlen
    windows: list[Window] = []
    for wi in range(n_win):
        sl = slice(wi * wlen, (wi + 1) * wlen)
        ppg_w = record.ppg[sl].copy()
        abp_w = record.abp[sl].copy() if record.abp is not None else None

        reason = None
        sbp = dbp = None
        if abp_w is not None:
            if abp_w.min() < ABP_MIN or abp_w.max() > ABP_MAX:
                reason = REASON_AMPLITUDE
            else:
                labels = extract_labels(abp_w, fs)
                if labels is None:
                    reason = REASON_BEATS
                elif labels.sbp - labels.dbp <= PULSE_PRESSURE_MIN:
                    sbp, dbp = labels.sbp, labels.dbp
                    reason = REASON_PULSE_PRESSURE
                elif not (HR_MIN <= labels.hr <= HR_MAX):
                    sbp, dbp = labels.sbp, labels.dbp
                    reason = REASON_HEART_RATE
                else:
                    sbp, dbp = labels.sbp, labels.dbp
        else:
            sbp, dbp = record.sbp, record.dbp
            if sbp is None or dbp is None:
                raise ValueError(f"record {record.subject_id}: no ABP and no discrete labels")
            if not (ABP_MIN <= dbp <= sbp <= ABP_MAX):
                reason = REASON_AMPLITUDE
            elif sbp - dbp <= PULSE_PRESSURE_MIN:
                reason = REASON_PULSE_PRESSURE

        if reason is None:
            if not ppg_quality_ok(ppg_w, fs, std_frac=std_frac):
                reason = REASON_PPG_QUALITY
            else:
                try:
                    ppg_w = baseline_correct(ppg_w, fs)
                except ValueError:
                    reason = REASON_PPG_QUALITY

        windows.append(Window(subject_id=record.subject_id, index=wi, ppg=ppg_w,
                              abp=abp_w, sbp=sbp, dbp=dbp,
                              valid=reason is None, reason=reason))
    return windows


def records_to_windows(records: list[SubjectRecord], window_s: float = WINDOW_SECONDS,
                       align: bool = True) -> list[Window]:
    out = []
    for rec in records:
        if align and rec.abp is not None:
            ppg_al, abp_al, _ = align_xcorr(rec.ppg, rec.abp, rec.fs)
            rec = SubjectRecord(rec.subject_id, rec.fs, ppg_al, abp=abp_al,
                                sbp=rec.sbp, dbp=rec.dbp, meta=rec.meta)
        out.extend(segment_and_filter(rec, window_s=window_s))
    return out


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class FoldSplit:
    fold: int
    train_subjects: list[str]
    val_subjects: list[str]
    test_subjects: list[str]
    train: list[Window]
    val: list[Window]
    test: list[Window]

    def manifest(self) -> dict:
        return {"fold": self.fold, "train_subjects": self.train_subjects,
                "val_subjects": self.val_subjects, "test_subjects": self.test_subjects}


@dataclass
class SplitDataset:
    k: int
    seed: int
    folds: list[FoldSplit]


def subject_kfold(windows: list[Window], k: int = 5, seed: int = 0,
                  val_frac: float = 0.2) -> SplitDataset:
    """Subject-wise k-fold cross-validation over valid windows.

    Every subject's windows land in exactly one of train/val/test per fold;
    validation subjects (for architecture parameters and early stopping) are
    drawn from the training pool, val_frac of it, at least one subject.
    """
    valid = [w for w in windows if w.valid]
    subjects = sorted({w.subject_id for w in valid})
    if len(subjects) < max(k, 3):
        raise ValueError(f"need at least {max(k, 3)} subjects with valid windows, "
                         f"got {len(subjects)}")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(subjects))
    fold_subjects = [list(chunk) for chunk in np.array_split(order, k)]
    by_subject: dict[str, list[Window]] = {}
    for w in valid:
        by_subject.setdefault(w.subject_id, []).append(w)

    folds = []
    for fi in range(k):
        test_s = sorted(fold_subjects[fi])
        pool = [s for s in order if s not in fold_subjects[fi]]
        n_val = max(1, int(round(val_frac * len(pool))))
        val_s = sorted(pool[:n_val])  # pool order is already a seeded permutation
        train_s = sorted(pool[n_val:])
        assert not (set(train_s) & set(val_s)) and not (set(train_s) & set(test_s)) \
            and not (set(val_s) & set(test_s))
        folds.append(FoldSplit(
            fold=fi, train_subjects=train_s, val_subjects=val_s, test_subjects=test_s,
            train=[w for s in train_s for w in by_subject[s]],
            val=[w for s in val_s for w in by_subject[s]],
            test=[w for s in test_s for w in by_subject[s]]))
    return SplitDataset(k=k, seed=seed, folds=folds)


@dataclass
class FinetuneSplit:
    train: list[Window]
    eval: list[Window]
    mode: str


def finetune_split(windows: list[Window], mode: str = "temporal",
                   eval_frac: float = 0.2, small_train: bool = False,
                   seed: int = 0) -> FinetuneSplit:
    """Per-subject personalization split.

    temporal: the evaluation set is the chronologically last ``eval_frac`` of
    windows; training uses everything before it (or, with ``small_train``,
    only the same-sized slice immediately preceding it).  shuffled: same
    sizes from a seeded permutation.  Needs at least 5 windows.
    """
    if mode not in ("temporal", "shuffled"):
        raise ValueError(f"unknown finetune split mode {mode!r}")
    subj = {w.subject_id for w in windows}
    if len(subj) != 1:
        raise ValueError(f"finetune_split expects a single subject, got {sorted(subj)}")
    ws = sorted(windows, key=lambda w: w.index)
    n = len(ws)
    if n < 5:
        raise ValueError(f"need at least 5 windows to fine-tune, got {n}")
    n_eval = max(1, int(round(eval_frac * n)))
    if mode == "temporal":
        ev = ws[n - n_eval:]
        tr = ws[n - 2 * n_eval: n - n_eval] if small_train else ws[: n - n_eval]
    else:
        rng = np.random.default_rng(seed)
        perm = list(rng.permutation(n))
        ev = [ws[i] for i in perm[:n_eval]]
        rest = perm[n_eval:]
        tr = [ws[i] for i in (rest[:n_eval] if small_train else rest)]
    if not tr:
        raise ValueError("fine-tune training split is empty")
    return FinetuneSplit(train=tr, eval=ev, mode=mode)
