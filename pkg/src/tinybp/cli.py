"""Staged compression pipeline with on-disk artifacts.

Each stage reads the previous stage's outputs from the run directory, trains
or transforms its models, and writes one artifact directory per
(input model, lambda) pair: config.json, the serialized model, the full
training log, and val/test metrics.  A stage run is keyed by a hash of its
configuration, its input model bytes, and the dataset files; re-running with
nothing changed skips the completed directories.

Model selection between stages uses validation MAE; reported numbers and
Pareto fronts use the test split.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from .autodiff import no_grad
from .config import ExperimentConfig, STAGES
from .evalkit import (MetricsReport, ParetoPoint, compute_mae, pareto_front,
                      points_to_csv, scatter_svg, waveform_to_labels)
from .graph import ModelGraph
from .intrt import footprint, int_forward
from .nas import build_supernet, dnas_train, extract_architecture
from .pruning import attach_masks, export_pruned, pit_train
from .quant import (QuantGraph, QuantizedModel, attach_quant, decode_output,
                    export_quantized, fold_norms, mps_train, quantize_input,
                    reference_forward)
from .signals import (FoldSplit, Window, load_records, records_to_windows,
                      save_records, subject_kfold, synth_generate,
                      finetune_split)
from .training import (MODE_SIGNAL, MODE_VALUE, Normalizer, TaskData,
                       assemble_task, fit, run_search, SearchSettings)


class MissingArtifactError(RuntimeError):
    """A stage was asked to run before the stage that produces its inputs."""


class LeakageError(RuntimeError):
    """A per-subject adaptation touched a subject the model trained on."""


ARCH_MODES = {"resnet1d": MODE_VALUE, "unet1d": MODE_SIGNAL}


# ---------------------------------------------------------------------------
# small file helpers
# ---------------------------------------------------------------------------

def _write_json(path: str, payload: dict):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def _read_json(path: str) -> dict:
    with open(path) as f:
        return json.load(f)


def _hash_obj(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _hash_files(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(os.path.basename(p).encode())
        with open(p, "rb") as f:
            h.update(f.read())
    return h.hexdigest()


def _model_files(dirpath: str) -> list:
    names = [n for n in os.listdir(dirpath)
             if n.startswith("model.") and not n.endswith(".json.tmp")]
    return [os.path.join(dirpath, n) for n in sorted(names)]


# ---------------------------------------------------------------------------
# window persistence
# ---------------------------------------------------------------------------

def save_windows(windows: list, path: str):
    """One npz for the whole windowed dataset, NaN-padded where absent."""
    n = len(windows)
    if n == 0:
        raise ValueError("no windows to save")
    length = len(windows[0].ppg)
    ppg = np.stack([w.ppg for w in windows]).astype(np.float64)
    abp = np.full((n, length), np.nan)
    for i, w in enumerate(windows):
        if w.abp is not None:
            abp[i] = w.abp
    sbp = np.array([np.nan if w.sbp is None else w.sbp for w in windows])
    dbp = np.array([np.nan if w.dbp is None else w.dbp for w in windows])
    np.savez_compressed(
        path, ppg=ppg, abp=abp, sbp=sbp, dbp=dbp,
        valid=np.array([w.valid for w in windows], dtype=bool),
        reason=np.array([w.reason or "" for w in windows]),
        subject=np.array([w.subject_id for w in windows]),
        index=np.array([w.index for w in windows], dtype=np.int64))


def load_windows(path: str) -> list:
    z = np.load(path, allow_pickle=False)
    out = []
    for i in range(len(z["ppg"])):
        abp = z["abp"][i]
        sbp, dbp = float(z["sbp"][i]), float(z["dbp"][i])
        reason = str(z["reason"][i])
        out.append(Window(
            subject_id=str(z["subject"][i]), index=int(z["index"][i]),
            ppg=z["ppg"][i],
            abp=None if np.isnan(abp).all() else abp,
            sbp=None if np.isnan(sbp) else sbp,
            dbp=None if np.isnan(dbp) else dbp,
            valid=bool(z["valid"][i]),
            reason=reason if reason else None))
    return out


def _fold_from_manifest(windows: list, man: dict) -> FoldSplit:
    groups = {}
    for key in ("train", "val", "test"):
        subs = set(man[key + "_subjects"])
        groups[key] = [w for w in windows if w.valid and w.subject_id in subs]
    return FoldSplit(fold=man["fold"],
                     train_subjects=man["train_subjects"],
                     val_subjects=man["val_subjects"],
                     test_subjects=man["test_subjects"],
                     train=groups["train"], val=groups["val"],
                     test=groups["test"])


def _load_fold(cfg: ExperimentConfig):
    wpath = os.path.join(cfg.data_dir, "windows.npz")
    spath = os.path.join(cfg.data_dir, "splits.json")
    for p in (wpath, spath):
        if not os.path.exists(p):
            raise MissingArtifactError(
                f"missing {p}; run the preprocess stage first")
    windows = load_windows(wpath)
    splits = _read_json(spath)
    if not 0 <= cfg.fold < len(splits["folds"]):
        raise ValueError(f"fold {cfg.fold} outside 0..{len(splits['folds']) - 1}")
    fold = _fold_from_manifest(windows, splits["folds"][cfg.fold])
    data_hash = _hash_files([wpath, spath])
    return fold, data_hash


# ---------------------------------------------------------------------------
# prediction and metrics
# ---------------------------------------------------------------------------

def _forward_batched(model, x: np.ndarray, batch: int = 128) -> np.ndarray:
    outs = []
    for i in range(0, len(x), batch):
        xb = x[i: i + batch]
        if isinstance(model, QuantizedModel):
            q = reference_forward(model, quantize_input(model, xb))
            outs.append(decode_output(model, q))
        else:
            with no_grad():
                outs.append(model.forward(xb).data)
    return np.concatenate(outs, axis=0)


def predict_labels(model, windows: list, norm: Normalizer, mode: str,
                   fs: float):
    """Run a model over windows and reduce its output to SBP/DBP pairs.

    Returns (pred_labels, true_labels, subjects, n_dropped); waveform
    predictions that yield no usable beats are dropped from both sides.
    """
    x = np.stack([w.ppg for w in windows]).astype(np.float64)[:, None, :]
    xn = norm.norm_x(x)
    raw = _forward_batched(model, xn)
    if not isinstance(model, QuantizedModel):
        raw = norm.denorm_y(raw)
    truths = np.array([[w.sbp, w.dbp] for w in windows], dtype=np.float64)
    subjects = [w.subject_id for w in windows]
    if mode == MODE_VALUE:
        return raw, truths, subjects, 0
    labels, ok = waveform_to_labels(raw, fs=fs)
    keep = np.flatnonzero(ok)
    kept_subjects = [subjects[i] for i in keep]
    return labels[keep], truths[keep], kept_subjects, int((~ok).sum())


def eval_model(model, windows: list, norm: Normalizer, mode: str,
               fs: float) -> MetricsReport:
    preds, truths, subjects, _ = predict_labels(model, windows, norm,
                                                mode, fs)
    if len(preds) == 0:
        # every predicted waveform failed label extraction; report it as an
        # unusable model rather than crashing the sweep
        inf = float("inf")
        return MetricsReport(mae_sbp=inf, mae_dbp=inf, me_sbp=0.0, me_dbp=0.0,
                             std_sbp=0.0, std_dbp=0.0, n_windows=0,
                             n_subjects=0, per_subject={})
    return compute_mae(preds, truths, subjects=subjects)


def float_cost_bits(graph: ModelGraph) -> float:
    return float(graph.param_count() * 32)


def quant_cost_bits(qm: QuantizedModel) -> float:
    """Model-size metric the precision search optimizes: every parameter of a
    coded layer counted at that layer's searched width.  Exact container bytes
    (32-bit biases, affine tables, packing padding) live in footprint.json."""
    total = 0
    for spec in qm.layers:
        if spec.w_codes is not None:
            total += (spec.w_codes.size + len(spec.bias_q)) * spec.bits_w
    return float(total)


# ---------------------------------------------------------------------------
# artifact bookkeeping
# ---------------------------------------------------------------------------

def _run_complete(run_dir: str, run_key: str) -> bool:
    cfg_p = os.path.join(run_dir, "config.json")
    met_p = os.path.join(run_dir, "metrics.json")
    if not (os.path.exists(cfg_p) and os.path.exists(met_p)):
        return False
    return _read_json(cfg_p).get("run_key") == run_key


def _metrics_payload(val: MetricsReport, test: MetricsReport,
                     cost_bits: float) -> dict:
    return {"val": val.to_dict(), "test": test.to_dict(),
            "cost_bits": cost_bits}


def _candidate_row(name: str, run_dir: str, stage: str, lam,
                   metrics: dict) -> dict:
    return {"name": name, "dir": run_dir, "stage": stage,
            "lambda": lam,
            "val_mae_sbp": metrics["val"]["mae_sbp"],
            "val_mae_dbp": metrics["val"]["mae_dbp"],
            "test_mae_sbp": metrics["test"]["mae_sbp"],
            "test_mae_dbp": metrics["test"]["mae_dbp"],
            "cost_bits": metrics["cost_bits"]}


def _write_stage_index(stage_dir: str, rows: list):
    _write_json(os.path.join(stage_dir, "candidates.json"), {"models": rows})
    points = [ParetoPoint(cost=r["cost_bits"], mae_sbp=r["test_mae_sbp"],
                          mae_dbp=r["test_mae_dbp"], stage=r["stage"],
                          lambda_=r["lambda"] or 0.0, model_ref=r["dir"])
              for r in rows]
    points_to_csv(points, os.path.join(stage_dir, "points.csv"))


def _stage_dir(cfg: ExperimentConfig, stage: str) -> str:
    return os.path.join(cfg.out_dir, cfg.seed_arch, f"fold{cfg.fold}", stage)


def _load_candidates(cfg: ExperimentConfig, stage: str) -> list:
    path = os.path.join(_stage_dir(cfg, stage), "candidates.json")
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing {path}; run the {stage} stage first")
    return _read_json(path)["models"]


def _select_inputs(cands: list, with_smallest: bool) -> list:
    """Pick {lowest val SBP MAE, lowest val DBP MAE, seed baseline} and
    optionally the cheapest model; duplicates collapse onto the first pick."""
    picks, seen = [], set()

    def add(name, row):
        if row is not None and row["dir"] not in seen:
            seen.add(row["dir"])
            picks.append((name, row))

    add("sbp", min(cands, key=lambda r: r["val_mae_sbp"]))
    add("dbp", min(cands, key=lambda r: r["val_mae_dbp"]))
    add("seed", next((r for r in cands if r["name"] == "seed"), None))
    if with_smallest:
        add("small", min(cands, key=lambda r: r["cost_bits"]))
    return picks


def _save_run(run_dir: str, graph, log, metrics: dict, cfg_payload: dict):
    os.makedirs(run_dir, exist_ok=True)
    graph.save(run_dir, "model")
    log.to_csv(os.path.join(run_dir, "log.csv"))
    _write_json(os.path.join(run_dir, "metrics.json"), metrics)
    _write_json(os.path.join(run_dir, "config.json"), cfg_payload)


def _base_payload(cfg: ExperimentConfig, stage: str, lam, run_key: str,
                  data: TaskData, seed: int) -> dict:
    return {"stage": stage, "arch": cfg.seed_arch, "fold": cfg.fold,
            "lambda": lam, "seed": seed, "run_key": run_key,
            "mode": data.mode, "norm": data.norm.to_dict(),
            "train_subjects": data.train_subjects,
            "val_subjects": data.val_subjects}


# ---------------------------------------------------------------------------
# data stages
# ---------------------------------------------------------------------------

def stage_synth(cfg: ExperimentConfig) -> dict:
    records = synth_generate(cfg.n_subjects, seconds=cfg.seconds, fs=cfg.fs,
                             seed=cfg.seed)
    rec_dir = os.path.join(cfg.data_dir, "records")
    save_records(records, rec_dir)
    print(f"synth-data: wrote {len(records)} subject records to {rec_dir}")
    return {"records_dir": rec_dir, "n_subjects": len(records)}


def stage_preprocess(cfg: ExperimentConfig) -> dict:
    rec_dir = os.path.join(cfg.data_dir, "records")
    if not os.path.isdir(rec_dir):
        raise MissingArtifactError(
            f"missing {rec_dir}; run the synth-data stage first")
    records = load_records(rec_dir, fs=cfg.fs)
    windows = records_to_windows(records)
    wpath = os.path.join(cfg.data_dir, "windows.npz")
    save_windows(windows, wpath)

    split = subject_kfold(windows, k=cfg.k_folds, seed=cfg.seed)
    spath = os.path.join(cfg.data_dir, "splits.json")
    _write_json(spath, {"k": split.k, "seed": split.seed,
                        "folds": [f.manifest() for f in split.folds]})

    reasons = {}
    for w in windows:
        if not w.valid:
            reasons[w.reason] = reasons.get(w.reason, 0) + 1
    summary = {"n_windows": len(windows),
               "n_valid": sum(w.valid for w in windows),
               "rejected": reasons}
    _write_json(os.path.join(cfg.data_dir, "preprocess_summary.json"), summary)
    print(f"preprocess: {summary['n_valid']}/{summary['n_windows']} windows "
          f"valid, {cfg.k_folds} folds -> {spath}")
    return {"windows": wpath, "splits": spath, **summary}


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------

def _task_for_fold(cfg: ExperimentConfig, fold: FoldSplit) -> TaskData:
    return assemble_task(fold.train, fold.val, mode=ARCH_MODES[cfg.seed_arch])


def _run_metrics(graph, data: TaskData, fold: FoldSplit, cfg, cost) -> dict:
    val = eval_model(graph, fold.val, data.norm, data.mode, cfg.fs)
    test = eval_model(graph, fold.test, data.norm, data.mode, cfg.fs)
    return _metrics_payload(val, test, cost)


def stage_nas(cfg: ExperimentConfig) -> dict:
    from .seeds import build_seed
    fold, data_hash = _load_fold(cfg)
    data = _task_for_fold(cfg, fold)
    stage_dir = _stage_dir(cfg, "nas")
    rows = []

    def seed_graph():
        return build_seed(cfg.seed_arch, input_len=cfg.input_len,
                          widths=cfg.widths, seed=cfg.seed)

    # plain seed baseline: no search, just the training budget
    run_dir = os.path.join(stage_dir, "seed")
    key = _hash_obj({"stage": "nas-seed", "cfg": dataclasses.asdict(cfg.nas),
                     "arch": cfg.seed_arch, "widths": cfg.widths,
                     "fold": cfg.fold, "seed": cfg.seed, "data": data_hash})
    if _run_complete(run_dir, key):
        rows.append(_candidate_row("seed", run_dir, "nas",
                                   None, _read_json(os.path.join(run_dir, "metrics.json"))))
    else:
        g = seed_graph()
        log = fit(g, data, epochs=cfg.nas.finetune_epochs, lr=cfg.nas.lr_w,
                  patience=cfg.nas.patience, batch_size=cfg.nas.batch_size,
                  seed=cfg.seed)
        metrics = _run_metrics(g, data, fold, cfg, float_cost_bits(g))
        payload = _base_payload(cfg, "nas", None, key, data, cfg.seed)
        _save_run(run_dir, g, log, metrics, payload)
        rows.append(_candidate_row("seed", run_dir, "nas", None, metrics))

    for i, lam in enumerate(cfg.lambda_grid):
        name = f"lam{i:02d}"
        run_dir = os.path.join(stage_dir, name)
        ncfg = dataclasses.replace(cfg.nas, lambda_=float(lam),
                                   seed=cfg.seed + 100 + i)
        key = _hash_obj({"stage": "nas", "cfg": dataclasses.asdict(ncfg),
                         "arch": cfg.seed_arch, "widths": cfg.widths,
                         "fold": cfg.fold, "data": data_hash})
        if _run_complete(run_dir, key):
            rows.append(_candidate_row(name, run_dir, "nas", float(lam),
                                       _read_json(os.path.join(run_dir, "metrics.json"))))
            continue
        supernet = build_supernet(seed_graph(), seed_rng=ncfg.seed)
        dnas_train(supernet, data, ncfg)
        g = extract_architecture(supernet)
        log = fit(g, data, epochs=ncfg.finetune_epochs, lr=ncfg.lr_w,
                  patience=ncfg.patience, batch_size=ncfg.batch_size,
                  seed=ncfg.seed + 1)
        metrics = _run_metrics(g, data, fold, cfg, float_cost_bits(g))
        payload = _base_payload(cfg, "nas", float(lam), key, data, ncfg.seed)
        payload["selected"] = {n.id: n.meta["selected"]
                               for n in g.nodes.values() if "selected" in n.meta}
        _save_run(run_dir, g, log, metrics, payload)
        rows.append(_candidate_row(name, run_dir, "nas", float(lam), metrics))
        print(f"nas {name}: lambda={lam:.3g} cost={metrics['cost_bits']:.3g} "
              f"val SBP MAE={metrics['val']['mae_sbp']:.2f}")

    _write_stage_index(stage_dir, rows)
    return {"stage_dir": stage_dir, "models": rows}


def stage_prune(cfg: ExperimentConfig) -> dict:
    fold, data_hash = _load_fold(cfg)
    data = _task_for_fold(cfg, fold)
    stage_dir = _stage_dir(cfg, "prune")
    inputs = _select_inputs(_load_candidates(cfg, "nas"), cfg.with_smallest)
    rows = []
    for in_name, src in inputs:
        in_hash = _hash_files(_model_files(src["dir"]))
        src_cfg = _read_json(os.path.join(src["dir"], "config.json"))
        for i, lam in enumerate(cfg.lambda_grid):
            name = f"{in_name}-lam{i:02d}"
            run_dir = os.path.join(stage_dir, name)
            pcfg = dataclasses.replace(cfg.pit, lambda_=float(lam),
                                       seed=cfg.seed + 200 + i)
            key = _hash_obj({"stage": "prune",
                             "cfg": dataclasses.asdict(pcfg),
                             "input": in_hash, "fold": cfg.fold,
                             "data": data_hash})
            if _run_complete(run_dir, key):
                rows.append(_candidate_row(name, run_dir, "prune", float(lam),
                                           _read_json(os.path.join(run_dir, "metrics.json"))))
                continue
            masked = attach_masks(ModelGraph.load(src["dir"], "model"),
                                  theta_init=pcfg.theta_init)
            log = pit_train(masked, data, pcfg)
            retained = {nid: mv.retained_fraction()
                        for nid, mv in masked.mask_views().items()}
            g = export_pruned(masked)
            metrics = _run_metrics(g, data, fold, cfg, float_cost_bits(g))
            payload = _base_payload(cfg, "prune", float(lam), key, data,
                                    pcfg.seed)
            payload.update({"input": src["dir"], "retained": retained,
                            "selected": src_cfg.get("selected", {})})
            _save_run(run_dir, g, log, metrics, payload)
            rows.append(_candidate_row(name, run_dir, "prune", float(lam),
                                       metrics))
            print(f"prune {name}: lambda={lam:.3g} "
                  f"cost={metrics['cost_bits']:.3g} "
                  f"val SBP MAE={metrics['val']['mae_sbp']:.2f}")
    _write_stage_index(stage_dir, rows)
    return {"stage_dir": stage_dir, "models": rows}


def stage_mps(cfg: ExperimentConfig) -> dict:
    fold, data_hash = _load_fold(cfg)
    data = _task_for_fold(cfg, fold)
    stage_dir = _stage_dir(cfg, "mps")
    pool = _load_candidates(cfg, "nas") + _load_candidates(cfg, "prune")
    inputs = _select_inputs(pool, cfg.with_smallest)
    rows = []
    for in_name, src in inputs:
        in_hash = _hash_files(_model_files(src["dir"]))
        src_cfg = _read_json(os.path.join(src["dir"], "config.json"))
        for i, lam in enumerate(cfg.mps_lambda_grid):
            name = f"{in_name}-lam{i:02d}"
            run_dir = os.path.join(stage_dir, name)
            mcfg = dataclasses.replace(cfg.mps, lambda_=float(lam),
                                       seed=cfg.seed + 300 + i)
            key = _hash_obj({"stage": "mps", "cfg": dataclasses.asdict(mcfg),
                             "input": in_hash, "fold": cfg.fold,
                             "data": data_hash})
            if _run_complete(run_dir, key):
                rows.append(_candidate_row(name, run_dir, "mps", float(lam),
                                           _read_json(os.path.join(run_dir, "metrics.json"))))
                continue
            g = fold_norms(ModelGraph.load(src["dir"], "model"))
            qg = attach_quant(g, mcfg)
            log = mps_train(qg, data, mcfg)
            qm = export_quantized(qg, meta={"norm": data.norm.to_dict(),
                                            "mode": data.mode,
                                            "arch": cfg.seed_arch})
            cost = quant_cost_bits(qm)
            metrics = _run_metrics(qm, data, fold, cfg, cost)
            payload = _base_payload(cfg, "mps", float(lam), key, data,
                                    mcfg.seed)
            payload.update({"input": src["dir"],
                            "frozen_bits": qg.frozen_bits,
                            "retained": src_cfg.get("retained", {}),
                            "selected": src_cfg.get("selected", {})})
            os.makedirs(run_dir, exist_ok=True)
            qg.save(run_dir, "model")
            qm.save(run_dir, "model")
            _write_json(os.path.join(run_dir, "footprint.json"), footprint(qm))
            log.to_csv(os.path.join(run_dir, "log.csv"))
            _write_json(os.path.join(run_dir, "metrics.json"), metrics)
            _write_json(os.path.join(run_dir, "config.json"), payload)
            rows.append(_candidate_row(name, run_dir, "mps", float(lam),
                                       metrics))
            print(f"mps {name}: lambda={lam:.3g} cost={cost:.3g} "
                  f"val SBP MAE={metrics['val']['mae_sbp']:.2f}")
    _write_stage_index(stage_dir, rows)
    return {"stage_dir": stage_dir, "models": rows}


# ---------------------------------------------------------------------------
# per-subject adaptation
# ---------------------------------------------------------------------------

def _load_artifact(model_dir: str):
    """Return (model object, config payload, kind) for a run directory."""
    cfg_p = os.path.join(model_dir, "config.json")
    if not os.path.exists(cfg_p):
        raise MissingArtifactError(f"no config.json under {model_dir}")
    payload = _read_json(cfg_p)
    if os.path.exists(os.path.join(model_dir, "model.quant.json")):
        return QuantGraph.load(model_dir, "model"), payload, "quant"
    return ModelGraph.load(model_dir, "model"), payload, "float"


def _task_from_windows(train_ws, val_ws, norm: Normalizer, mode: str,
                       subject: str) -> TaskData:
    def xs(ws):
        return norm.norm_x(np.stack([w.ppg for w in ws])
                           .astype(np.float64)[:, None, :])

    def ys(ws):
        if mode == MODE_VALUE:
            y = np.array([[w.sbp, w.dbp] for w in ws], dtype=np.float64)
        else:
            y = np.stack([w.abp for w in ws]).astype(np.float64)[:, None, :]
        return norm.norm_y(y)

    return TaskData(mode=mode, x_train=xs(train_ws), y_train=ys(train_ws),
                    x_val=xs(val_ws), y_val=ys(val_ws), norm=norm,
                    train_subjects=[subject], val_subjects=[subject])


def _eval_windows_hash(windows: list) -> str:
    h = hashlib.sha256()
    for w in windows:
        h.update(np.ascontiguousarray(w.ppg).tobytes())
        h.update(repr((w.subject_id, w.index, w.sbp, w.dbp)).encode())
    return h.hexdigest()


def finetune_subject(model_dir: str, subject: str, data_dir: str,
                     split_mode: str = "temporal", small_train: bool = False,
                     epochs: int = 30, lr: float = 1e-4, fs: float = 125.0,
                     seed: int = 0, windows: list | None = None) -> dict:
    """Adapt a trained artifact to one held-out subject.

    Hard-fails if the subject contributed to the artifact's training or
    validation pool.  The evaluation windows are fixed before adaptation and
    verified unchanged afterwards; with an empty adaptation set the model is
    returned untouched, so post equals pre.
    """
    model, payload, kind = _load_artifact(model_dir)
    manifest = set(payload["train_subjects"]) | set(payload["val_subjects"])
    if subject in manifest:
        raise LeakageError(
            f"subject {subject!r} is in the model's training manifest; "
            f"per-subject adaptation requires a held-out subject")

    if windows is None:
        rec_dir = os.path.join(data_dir, "records")
        if not os.path.isdir(rec_dir):
            raise MissingArtifactError(
                f"missing {rec_dir}; run the synth-data stage first")
        recs = [r for r in load_records(rec_dir, fs=fs)
                if r.subject_id == subject]
        if not recs:
            raise ValueError(f"no record for subject {subject!r} in {rec_dir}")
        windows = records_to_windows(recs)
    windows = [w for w in windows if w.valid and w.subject_id == subject]

    split = finetune_split(windows, mode=split_mode, small_train=small_train,
                           seed=seed)
    norm = Normalizer.from_dict(payload["norm"])
    mode = payload["mode"]

    eval_hash = _eval_windows_hash(split.eval)
    graph_for_eval = model.graph if kind == "quant" else model

    def current_metrics():
        if kind == "quant":
            qm = export_quantized(model, meta={"norm": payload["norm"],
                                               "mode": mode})
            return eval_model(qm, split.eval, norm, mode, fs)
        return eval_model(model, split.eval, norm, mode, fs)

    pre = current_metrics()

    if split.train:
        task = _task_from_windows(split.train, split.train, norm, mode,
                                  subject)
        if kind == "quant":
            from .quant import MpsProblem
            prob = MpsProblem(model)
            run_search(prob, task, SearchSettings(
                epochs=epochs, warmup=epochs, patience=epochs,
                batch_size=min(16, len(split.train)), lr_w=lr, seed=seed))
        else:
            fit(graph_for_eval, task, epochs=epochs, lr=lr, patience=epochs,
                batch_size=min(16, len(split.train)), seed=seed)

    post = current_metrics()
    if _eval_windows_hash(split.eval) != eval_hash:
        raise RuntimeError("evaluation windows changed during adaptation")

    result = {"subject": subject, "split_mode": split.mode,
              "n_train": len(split.train), "n_eval": len(split.eval),
              "eval_hash": eval_hash,
              "pre": pre.to_dict(), "post": post.to_dict()}
    _write_json(os.path.join(model_dir, f"finetune-{subject}.json"), result)
    print(f"finetune {subject}: SBP MAE {pre.mae_sbp:.2f} -> "
          f"{post.mae_sbp:.2f}, DBP MAE {pre.mae_dbp:.2f} -> "
          f"{post.mae_dbp:.2f} on {len(split.eval)} held-out windows")
    return result


# ---------------------------------------------------------------------------
# evaluation / export / integer execution
# ---------------------------------------------------------------------------

def _fold_for_payload(cfg: ExperimentConfig, payload: dict) -> FoldSplit:
    sub_cfg = dataclasses.replace(cfg, fold=payload.get("fold", cfg.fold))
    fold, _ = _load_fold(sub_cfg)
    return fold


def stage_eval(cfg: ExperimentConfig, model_dir: str,
               split: str = "test") -> dict:
    model, payload, kind = _load_artifact(model_dir)
    if kind == "quant":
        model = export_quantized(model, meta={"norm": payload["norm"],
                                              "mode": payload["mode"]})
    fold = _fold_for_payload(cfg, payload)
    windows = getattr(fold, split)
    norm = Normalizer.from_dict(payload["norm"])
    report = eval_model(model, windows, norm, payload["mode"], cfg.fs)
    out = report.to_dict()
    _write_json(os.path.join(model_dir, f"eval-{split}.json"), out)
    print(f"eval {split}: SBP MAE {report.mae_sbp:.2f}  "
          f"DBP MAE {report.mae_dbp:.2f}  ({report.n_windows} windows)")
    return out


def stage_export(cfg: ExperimentConfig, model_dir: str) -> dict:
    model, payload, kind = _load_artifact(model_dir)
    if kind != "quant":
        raise ValueError(f"{model_dir} holds a float model; only "
                         f"precision-searched artifacts export to integers")
    qm = export_quantized(model, meta={"norm": payload["norm"],
                                       "mode": payload["mode"],
                                       "arch": payload.get("arch", "")})
    qm.save(model_dir, "model")
    fp = footprint(qm)
    _write_json(os.path.join(model_dir, "footprint.json"), fp)
    print(f"export: {fp['total_bytes']} bytes "
          f"({fp['weight_bytes']} weights, {fp['bias_bytes']} biases, "
          f"{fp['scale_bytes']} scales)")
    return fp


def stage_run_int(cfg: ExperimentConfig, model_dir: str,
                  split: str = "test") -> dict:
    qpath = os.path.join(model_dir, "model.qmodel.json")
    if not os.path.exists(qpath):
        raise MissingArtifactError(
            f"missing {qpath}; run the export stage first")
    qm = QuantizedModel.load(model_dir, "model")
    payload = _read_json(os.path.join(model_dir, "config.json"))
    fold = _fold_for_payload(cfg, payload)
    windows = getattr(fold, split)
    norm = Normalizer.from_dict(payload["norm"])

    from .intrt import quantize_input as int_codes
    x = np.stack([w.ppg for w in windows]).astype(np.float64)[:, None, :]
    xn = norm.norm_x(x)
    q_in = int_codes(qm, xn)
    q_int = int_forward(qm, q_in)
    q_ref = reference_forward(qm, q_in.astype(np.float64))
    parity = float(np.max(np.abs(q_int.astype(np.float64) - q_ref)))

    decoded = decode_output(qm, q_int.astype(np.float64))
    truths = np.array([[w.sbp, w.dbp] for w in windows], dtype=np.float64)
    subjects = [w.subject_id for w in windows]
    if payload["mode"] == MODE_VALUE:
        preds = decoded
    else:
        labels, ok = waveform_to_labels(decoded, fs=cfg.fs)
        keep = np.flatnonzero(ok)
        preds, truths = labels[keep], truths[keep]
        subjects = [subjects[i] for i in keep]
    report = compute_mae(preds, truths, subjects=subjects)

    with open(os.path.join(model_dir, f"predictions-{split}.csv"), "w") as f:
        f.write("subject,pred_sbp,pred_dbp,true_sbp,true_dbp\n")
        for s, p, t in zip(subjects, preds, truths):
            f.write(f"{s},{p[0]:.4f},{p[1]:.4f},{t[0]:.4f},{t[1]:.4f}\n")
    out = {"parity_max_code_diff": parity, "metrics": report.to_dict(),
           "footprint": footprint(qm)}
    _write_json(os.path.join(model_dir, f"runint-{split}.json"), out)
    print(f"run-int {split}: integer/reference max code diff {parity:.1f}, "
          f"SBP MAE {report.mae_sbp:.2f}, DBP MAE {report.mae_dbp:.2f}")
    return out


# ---------------------------------------------------------------------------
# reporting stages
# ---------------------------------------------------------------------------

_CHOICE_NAMES = {"C": "conv", "DW": "depthwise separable", "ID": "bypassed"}


def model_table(model_dir: str) -> list:
    """Per-layer rows: (id, kind, operator choice, retained fraction, bits)."""
    model, payload, kind = _load_artifact(model_dir)
    graph = model.graph if kind == "quant" else model
    retained = payload.get("retained", {})
    selected = payload.get("selected", {})
    bits = payload.get("frozen_bits") or {}
    rows = []
    for node in graph.nodes.values():
        if node.layer.kind not in ("conv1d", "linear"):
            continue
        choice = _CHOICE_NAMES.get(
            node.meta.get("selected", selected.get(node.id, "C")), "conv")
        if node.meta.get("part") == "depthwise":
            choice = "depthwise separable"
        rows.append({"id": node.id, "kind": node.layer.kind,
                     "choice": choice,
                     "retained": float(retained.get(node.id, 1.0)),
                     "bits": int(bits.get(node.id, 32))})
    return rows


def stage_summarize(cfg: ExperimentConfig) -> dict:
    base = os.path.join(cfg.out_dir, cfg.seed_arch, f"fold{cfg.fold}")
    if not os.path.isdir(base):
        raise MissingArtifactError(
            f"no runs under {base}; run the training stages first")
    lines = ["stage,name,lambda,cost_bits,val_mae_sbp,val_mae_dbp,"
             "test_mae_sbp,test_mae_dbp,dir"]
    found = []
    for stage in ("nas", "prune", "mps"):
        idx = os.path.join(base, stage, "candidates.json")
        if not os.path.exists(idx):
            continue
        for r in _read_json(idx)["models"]:
            lam = "" if r["lambda"] is None else repr(r["lambda"])
            lines.append(f"{r['stage']},{r['name']},{lam},"
                         f"{r['cost_bits']!r},{r['val_mae_sbp']!r},"
                         f"{r['val_mae_dbp']!r},{r['test_mae_sbp']!r},"
                         f"{r['test_mae_dbp']!r},{r['dir']}")
            found.append(r)
            table = model_table(r["dir"])
            with open(os.path.join(r["dir"], "layers.txt"), "w") as f:
                f.write(f"{'layer':24s} {'op':22s} {'retained':>8s} "
                        f"{'bits':>4s}\n")
                for row in table:
                    f.write(f"{row['id']:24s} {row['choice']:22s} "
                            f"{row['retained']:8.3f} {row['bits']:4d}\n")
    if not found:
        raise MissingArtifactError(
            f"no candidates under {base}; run the training stages first")
    path = os.path.join(base, "summary.csv")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    print(f"summarize: {len(found)} models -> {path}")
    for r in found:
        print(f"  {r['stage']:6s} {r['name']:12s} cost={r['cost_bits']:.4g} "
              f"test SBP MAE={r['test_mae_sbp']:.2f} "
              f"DBP MAE={r['test_mae_dbp']:.2f}")
    return {"summary": path, "models": found}


def stage_pareto(cfg: ExperimentConfig, objective: str = "sbp") -> dict:
    base = os.path.join(cfg.out_dir, cfg.seed_arch, f"fold{cfg.fold}")
    points = []
    for stage in ("nas", "prune", "mps"):
        idx = os.path.join(base, stage, "candidates.json")
        if not os.path.exists(idx):
            continue
        for r in _read_json(idx)["models"]:
            points.append(ParetoPoint(
                cost=r["cost_bits"], mae_sbp=r["test_mae_sbp"],
                mae_dbp=r["test_mae_dbp"], stage=r["stage"],
                lambda_=r["lambda"] or 0.0, model_ref=r["dir"]))
    if not points:
        raise MissingArtifactError(
            f"no stage candidates under {base}; run the training stages first")
    out_dir = os.path.join(base, "pareto")
    os.makedirs(out_dir, exist_ok=True)
    front = pareto_front(points, objective=objective)
    points_to_csv(points, os.path.join(out_dir, "points.csv"))
    points_to_csv(front, os.path.join(out_dir, f"front-{objective}.csv"))
    svg = os.path.join(out_dir, f"pareto-{objective}.svg")
    scatter_svg(points, svg, objective=objective, front=front,
                title=f"{cfg.seed_arch} fold {cfg.fold} ({objective.upper()})")
    print(f"pareto: {len(front)}/{len(points)} non-dominated points "
          f"({objective}) -> {svg}")
    for p in front:
        print(f"  cost={p.cost:.4g} MAE={p.mae(objective):.2f} "
              f"[{p.stage}] {p.model_ref}")
    return {"points": points, "front": front, "dir": out_dir}


# ---------------------------------------------------------------------------
# dispatch and argument parsing
# ---------------------------------------------------------------------------

def run_stage(cfg: ExperimentConfig, **kw) -> dict:
    table = {"synth-data": stage_synth, "preprocess": stage_preprocess,
             "nas": stage_nas, "prune": stage_prune, "mps": stage_mps,
             "summarize": stage_summarize}
    if cfg.stage in table:
        return table[cfg.stage](cfg)
    if cfg.stage == "pareto":
        return stage_pareto(cfg, objective=kw.get("objective", "sbp"))
    if cfg.stage == "finetune":
        return finetune_subject(
            kw["model_dir"], kw["subject"], cfg.data_dir,
            split_mode=kw.get("split_mode", "temporal"),
            small_train=kw.get("small_train", False),
            epochs=kw.get("epochs", 30), lr=kw.get("lr", 1e-4),
            fs=cfg.fs, seed=cfg.seed)
    if cfg.stage == "eval":
        return stage_eval(cfg, kw["model_dir"], split=kw.get("split", "test"))
    if cfg.stage == "export":
        return stage_export(cfg, kw["model_dir"])
    if cfg.stage == "run-int":
        return stage_run_int(cfg, kw["model_dir"],
                             split=kw.get("split", "test"))
    raise ValueError(f"unknown stage {cfg.stage!r}")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--data-dir")
    common.add_argument("--out-dir")
    common.add_argument("--arch", choices=sorted(ARCH_MODES))
    common.add_argument("--fold", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--subjects", type=int, dest="n_subjects")
    common.add_argument("--seconds", type=float)
    common.add_argument("--fs", type=float)
    common.add_argument("--widths", help="comma-separated channel widths")
    common.add_argument("--lambdas", help="comma-separated lambda grid")
    common.add_argument("--with-smallest", action="store_true", default=None)
    common.add_argument("--warmup-epochs", type=int)
    common.add_argument("--search-epochs", type=int)
    common.add_argument("--finetune-epochs", type=int)
    common.add_argument("--patience", type=int)
    common.add_argument("--batch-size", type=int)

    p = argparse.ArgumentParser(
        prog="tinybp",
        description="staged compression pipeline for PPG-to-BP models")
    sub = p.add_subparsers(dest="stage", required=True)
    helps = {
        "synth-data": "generate a synthetic subject cohort",
        "preprocess": "window, filter, label, and split the records",
        "nas": "architecture search sweep over the lambda grid",
        "prune": "channel-pruning sweep over selected models",
        "mps": "mixed-precision sweep over selected models",
        "finetune": "adapt one artifact to a held-out subject",
        "eval": "re-evaluate an artifact on a data split",
        "export": "write the integer container for a quantized artifact",
        "run-int": "execute the integer container and check parity",
        "summarize": "tabulate every artifact and its per-layer structure",
        "pareto": "combined cost/error front across all stages",
    }
    for name in STAGES:
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        if name in ("finetune", "eval", "export", "run-int"):
            sp.add_argument("--model-dir", required=True)
        if name in ("eval", "run-int"):
            sp.add_argument("--split", default="test",
                            choices=("train", "val", "test"))
        if name == "finetune":
            sp.add_argument("--subject", required=True)
            sp.add_argument("--ft-mode", default="temporal",
                            choices=("temporal", "shuffled"))
            sp.add_argument("--small-train", action="store_true")
            sp.add_argument("--epochs", type=int, default=30)
            sp.add_argument("--lr", type=float, default=1e-4)
        if name == "pareto":
            sp.add_argument("--objective", default="sbp",
                            choices=("sbp", "dbp"))
    return p


def _config_from_args(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        cfg = dataclasses.replace(cfg, stage=args.stage)
    else:
        cfg = ExperimentConfig(stage=args.stage)
    simple = {"data_dir": args.data_dir, "out_dir": args.out_dir,
              "seed_arch": args.arch, "fold": args.fold, "seed": args.seed,
              "n_subjects": args.n_subjects, "seconds": args.seconds,
              "fs": args.fs, "with_smallest": args.with_smallest}
    updates = {k: v for k, v in simple.items() if v is not None}
    if args.widths:
        updates["widths"] = tuple(int(w) for w in args.widths.split(","))
    if args.lambdas:
        grid = [float(s) for s in args.lambdas.split(",")]
        which = "mps_lambda_grid" if args.stage == "mps" else "lambda_grid"
        updates[which] = grid
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    epochs = {"warmup_epochs": args.warmup_epochs,
              "search_epochs": args.search_epochs,
              "finetune_epochs": args.finetune_epochs,
              "patience": args.patience, "batch_size": args.batch_size}
    epochs = {k: v for k, v in epochs.items() if v is not None}
    if epochs:
        cfg = dataclasses.replace(
            cfg, nas=dataclasses.replace(cfg.nas, **epochs),
            pit=dataclasses.replace(cfg.pit, **epochs),
            mps=dataclasses.replace(cfg.mps, **epochs))
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    cfg = _config_from_args(args)
    kw = {}
    if hasattr(args, "model_dir"):
        kw["model_dir"] = args.model_dir
    if hasattr(args, "split"):
        kw["split"] = args.split
    if hasattr(args, "subject"):
        kw.update(subject=args.subject, split_mode=args.ft_mode,
                  small_train=args.small_train, epochs=args.epochs,
                  lr=args.lr)
    if hasattr(args, "objective"):
        kw["objective"] = args.objective
    try:
        run_stage(cfg, **kw)
    except (MissingArtifactError, LeakageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
