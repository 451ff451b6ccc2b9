import dataclasses
import json
import os

import numpy as np
import pytest

from tinybp import cli
from tinybp.config import ExperimentConfig, MpsConfig, NasConfig, PitConfig
from tinybp.graph import ModelGraph
from tinybp.quant import QuantizedModel
from tinybp.signals import Window, records_to_windows, synth_generate
from tinybp.training import LOG_COLUMNS


def toy_config(root, arch="resnet1d", **kw):
    base = dict(
        seed_arch=arch, stage="synth-data",
        data_dir=os.path.join(root, "data"),
        out_dir=os.path.join(root, "runs"),
        fold=0, k_folds=3, seed=0, n_subjects=6, seconds=30.0,
        widths=(4, 6) if arch == "resnet1d" else (4, 6, 8),
        lambda_grid=[1e-8, 3e-4], mps_lambda_grid=[1e-8, 3e-3],
        nas=NasConfig(warmup_epochs=2, search_epochs=6, finetune_epochs=6,
                      patience=40, batch_size=16),
        pit=PitConfig(search_epochs=6, finetune_epochs=4, patience=40,
                      batch_size=16),
        mps=MpsConfig(search_epochs=6, finetune_epochs=4, patience=40,
                      batch_size=16))
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full toy resnet pipeline: synth -> preprocess -> nas -> prune -> mps."""
    root = str(tmp_path_factory.mktemp("pipe"))
    cfg = toy_config(root)
    for stage in ("synth-data", "preprocess", "nas", "prune", "mps"):
        cli.run_stage(dataclasses.replace(cfg, stage=stage))
    return cfg


def _stage_dir(cfg, stage):
    return os.path.join(cfg.out_dir, cfg.seed_arch, f"fold{cfg.fold}", stage)


def _run_dirs(cfg, stage):
    base = _stage_dir(cfg, stage)
    return [os.path.join(base, d) for d in sorted(os.listdir(base))
            if os.path.isdir(os.path.join(base, d))]


# -- window persistence -------------------------------------------------------

def test_windows_roundtrip(tmp_path):
    records = synth_generate(2, seconds=20, seed=3)
    windows = records_to_windows(records)
    path = str(tmp_path / "w.npz")
    cli.save_windows(windows, path)
    back = cli.load_windows(path)
    assert len(back) == len(windows)
    for a, b in zip(windows, back):
        assert a.subject_id == b.subject_id and a.index == b.index
        assert a.valid == b.valid and a.reason == b.reason
        assert np.array_equal(a.ppg, b.ppg)
        if a.abp is None:
            assert b.abp is None
        else:
            assert np.array_equal(a.abp, b.abp)
        assert (a.sbp is None) == (b.sbp is None)
        if a.sbp is not None:
            assert a.sbp == b.sbp and a.dbp == b.dbp


# -- artifact layout -----------------------------------------------------------

def test_every_run_dir_is_complete(pipeline):
    cfg = pipeline
    for stage in ("nas", "prune", "mps"):
        for rd in _run_dirs(cfg, stage):
            payload = json.load(open(os.path.join(rd, "config.json")))
            for key in ("run_key", "train_subjects", "val_subjects", "norm",
                        "mode", "stage", "seed"):
                assert key in payload, (rd, key)
            assert payload["stage"] == stage
            assert os.path.exists(os.path.join(rd, "model.json"))
            assert os.path.exists(os.path.join(rd, "model.bin"))
            metrics = json.load(open(os.path.join(rd, "metrics.json")))
            assert set(metrics) == {"val", "test", "cost_bits"}
            with open(os.path.join(rd, "log.csv")) as f:
                assert f.readline().strip() == ",".join(LOG_COLUMNS)
        idx = json.load(open(os.path.join(_stage_dir(cfg, stage),
                                          "candidates.json")))
        assert len(idx["models"]) == len(_run_dirs(cfg, stage))
        assert os.path.exists(os.path.join(_stage_dir(cfg, stage),
                                           "points.csv"))


def test_train_subject_manifest_disjoint_from_test(pipeline):
    cfg = pipeline
    splits = json.load(open(os.path.join(cfg.data_dir, "splits.json")))
    test_subjects = set(splits["folds"][cfg.fold]["test_subjects"])
    for rd in _run_dirs(cfg, "nas"):
        payload = json.load(open(os.path.join(rd, "config.json")))
        pool = set(payload["train_subjects"]) | set(payload["val_subjects"])
        assert not (pool & test_subjects)


def test_mps_artifacts_have_quant_state_and_container(pipeline):
    cfg = pipeline
    for rd in _run_dirs(cfg, "mps"):
        for name in ("model.quant.json", "model.qmodel.json",
                     "model.qweights.bin", "model.qbias.bin",
                     "footprint.json"):
            assert os.path.exists(os.path.join(rd, name)), (rd, name)
        payload = json.load(open(os.path.join(rd, "config.json")))
        assert payload["frozen_bits"]
        assert all(b in (2, 4, 8) for b in payload["frozen_bits"].values())


# -- idempotency ---------------------------------------------------------------

def test_rerun_skips_and_preserves_artifacts(pipeline):
    cfg = pipeline
    before = {}
    for rd in _run_dirs(cfg, "nas"):
        p = os.path.join(rd, "model.bin")
        before[p] = (os.path.getmtime(p), open(p, "rb").read())
    cli.run_stage(dataclasses.replace(cfg, stage="nas"))
    for p, (mtime, blob) in before.items():
        assert os.path.getmtime(p) == mtime
        assert open(p, "rb").read() == blob


# -- prerequisites -------------------------------------------------------------

def test_missing_prerequisites_are_named(tmp_path):
    cfg = toy_config(str(tmp_path))
    with pytest.raises(cli.MissingArtifactError, match="synth-data"):
        cli.run_stage(dataclasses.replace(cfg, stage="preprocess"))
    with pytest.raises(cli.MissingArtifactError, match="preprocess"):
        cli.run_stage(dataclasses.replace(cfg, stage="nas"))
    cli.run_stage(dataclasses.replace(cfg, stage="synth-data"))
    cli.run_stage(dataclasses.replace(cfg, stage="preprocess"))
    with pytest.raises(cli.MissingArtifactError, match="nas"):
        cli.run_stage(dataclasses.replace(cfg, stage="prune"))


def test_run_int_requires_export(pipeline, tmp_path):
    cfg = pipeline
    with pytest.raises(cli.MissingArtifactError, match="export"):
        cli.stage_run_int(cfg, str(tmp_path))


# -- stage input selection -----------------------------------------------------

def _row(name, dirname, vs, vd, cost):
    return {"name": name, "dir": dirname, "stage": "nas", "lambda": 0.0,
            "val_mae_sbp": vs, "val_mae_dbp": vd,
            "test_mae_sbp": vs, "test_mae_dbp": vd, "cost_bits": cost}


def test_select_inputs_rules():
    cands = [_row("seed", "d0", 5.0, 5.0, 100.0),
             _row("lam00", "d1", 3.0, 6.0, 80.0),
             _row("lam01", "d2", 6.0, 2.0, 20.0),
             _row("lam02", "d3", 7.0, 7.0, 10.0)]
    picks = cli._select_inputs(cands, with_smallest=False)
    assert [(n, r["dir"]) for n, r in picks] == [
        ("sbp", "d1"), ("dbp", "d2"), ("seed", "d0")]
    picks = cli._select_inputs(cands, with_smallest=True)
    assert picks[-1] == ("small", cands[3])


def test_select_inputs_dedupes_overlapping_picks():
    cands = [_row("seed", "d0", 1.0, 1.0, 5.0)]
    picks = cli._select_inputs(cands, with_smallest=True)
    assert len(picks) == 1 and picks[0][0] == "sbp"


def test_prune_inputs_point_at_selected_nas_models(pipeline):
    cfg = pipeline
    nas_cands = json.load(open(os.path.join(_stage_dir(cfg, "nas"),
                                            "candidates.json")))["models"]
    best_sbp = min(nas_cands, key=lambda r: r["val_mae_sbp"])["dir"]
    for rd in _run_dirs(cfg, "prune"):
        if os.path.basename(rd).startswith("sbp-"):
            payload = json.load(open(os.path.join(rd, "config.json")))
            assert payload["input"] == best_sbp


# -- cost accounting -----------------------------------------------------------

def test_candidate_costs_recompute_from_artifacts(pipeline):
    cfg = pipeline
    for stage in ("nas", "prune"):
        idx = json.load(open(os.path.join(_stage_dir(cfg, stage),
                                          "candidates.json")))
        for r in idx["models"]:
            g = ModelGraph.load(r["dir"], "model")
            assert r["cost_bits"] == g.param_count() * 32
    idx = json.load(open(os.path.join(_stage_dir(cfg, "mps"),
                                      "candidates.json")))
    for r in idx["models"]:
        qm = QuantizedModel.load(r["dir"], "model")
        assert r["cost_bits"] == cli.quant_cost_bits(qm)
        got = sum((spec.w_codes.size + len(spec.bias_q)) * spec.bits_w
                  for spec in qm.layers if spec.w_codes is not None)
        assert r["cost_bits"] == float(got)
        bits = json.load(open(os.path.join(r["dir"], "config.json")))["frozen_bits"]
        per_layer = sum((spec.w_codes.size + len(spec.bias_q)) * bits[spec.id]
                        for spec in qm.layers if spec.w_codes is not None)
        assert r["cost_bits"] == float(per_layer)


def test_default_lambda_grids():
    cfg = ExperimentConfig()
    assert len(cfg.lambda_grid) == 18
    assert np.isclose(cfg.lambda_grid[0], 1e-11, rtol=1e-12)
    assert np.isclose(cfg.lambda_grid[-1], 1e-7, rtol=1e-12)
    assert len(cfg.mps_lambda_grid) == 9


# -- pareto and summaries --------------------------------------------------------

def test_pareto_combines_all_stages(pipeline):
    cfg = pipeline
    res = cli.run_stage(dataclasses.replace(cfg, stage="pareto"))
    stages = {p.stage for p in res["points"]}
    assert stages == {"nas", "prune", "mps"}
    front = res["front"]
    assert len(front) >= 2
    costs = [p.cost for p in front]
    assert costs == sorted(costs)
    for i in range(len(front) - 1):
        assert front[i + 1].mae_sbp <= front[i].mae_sbp
    assert os.path.exists(os.path.join(res["dir"], "front-sbp.csv"))
    assert os.path.exists(os.path.join(res["dir"], "pareto-sbp.svg"))


def test_summarize_writes_tables(pipeline):
    cfg = pipeline
    res = cli.run_stage(dataclasses.replace(cfg, stage="summarize"))
    assert os.path.exists(res["summary"])
    rows = open(res["summary"]).read().strip().split("\n")
    assert len(rows) == len(res["models"]) + 1
    mps_dirs = _run_dirs(cfg, "mps")
    table = cli.model_table(mps_dirs[0])
    assert table, "expected at least one weighted layer"
    for row in table:
        assert row["bits"] in (2, 4, 8)
        assert 0.0 < row["retained"] <= 1.0
        assert row["choice"] in ("conv", "depthwise separable", "bypassed")
    assert os.path.exists(os.path.join(mps_dirs[0], "layers.txt"))


# -- export / integer execution --------------------------------------------------

def test_export_footprint_matches_files(pipeline):
    cfg = pipeline
    md = _run_dirs(cfg, "mps")[0]
    fp = cli.run_stage(dataclasses.replace(cfg, stage="export"), model_dir=md)
    assert fp["weight_bytes"] == os.path.getsize(
        os.path.join(md, "model.qweights.bin"))
    assert fp["bias_bytes"] == os.path.getsize(
        os.path.join(md, "model.qbias.bin"))


def test_export_rejects_float_artifacts(pipeline):
    cfg = pipeline
    with pytest.raises(ValueError, match="float model"):
        cli.run_stage(dataclasses.replace(cfg, stage="export"),
                      model_dir=_run_dirs(cfg, "nas")[0])


def test_run_int_exact_parity_and_predictions(pipeline):
    cfg = pipeline
    md = _run_dirs(cfg, "mps")[0]
    out = cli.run_stage(dataclasses.replace(cfg, stage="run-int"),
                        model_dir=md, split="test")
    assert out["parity_max_code_diff"] == 0.0
    assert out["metrics"]["n_windows"] > 0
    pred = os.path.join(md, "predictions-test.csv")
    header = open(pred).readline().strip()
    assert header == "subject,pred_sbp,pred_dbp,true_sbp,true_dbp"
    assert os.path.exists(os.path.join(md, "runint-test.json"))


# -- per-subject adaptation ------------------------------------------------------

def _splits(cfg):
    return json.load(open(os.path.join(cfg.data_dir, "splits.json")))


def test_finetune_rejects_training_subject(pipeline):
    cfg = pipeline
    md = _run_dirs(cfg, "mps")[0]
    subj = _splits(cfg)["folds"][cfg.fold]["train_subjects"][0]
    with pytest.raises(cli.LeakageError, match=subj):
        cli.finetune_subject(md, subj, cfg.data_dir, fs=cfg.fs)


def test_finetune_zero_epochs_leaves_model_unchanged(pipeline):
    cfg = pipeline
    md = _run_dirs(cfg, "nas")[0]
    subj = _splits(cfg)["folds"][cfg.fold]["test_subjects"][0]
    res = cli.finetune_subject(md, subj, cfg.data_dir, epochs=0, fs=cfg.fs)
    assert res["pre"] == res["post"]
    assert res["n_eval"] >= 1
    assert os.path.exists(os.path.join(md, f"finetune-{subj}.json"))


def test_finetune_improves_on_shifted_subject(pipeline):
    """A constant per-subject BP offset is invisible in the PPG, so only
    subject-level adaptation can remove it."""
    cfg = pipeline
    md = _run_dirs(cfg, "nas")[0]
    rec = synth_generate(1, seconds=60.0, fs=cfg.fs, seed=77)[0]
    rec = dataclasses.replace(rec, subject_id="SHIFT", abp=rec.abp + 25.0)
    windows = records_to_windows([rec])
    res = cli.finetune_subject(md, "SHIFT", cfg.data_dir, windows=windows,
                               epochs=40, lr=1e-2, fs=cfg.fs, seed=3)
    assert res["post"]["mae_sbp"] < res["pre"]["mae_sbp"]
    assert res["post"]["mae_dbp"] < res["pre"]["mae_dbp"]


def test_finetune_quant_artifact_reexports(pipeline):
    cfg = pipeline
    md = _run_dirs(cfg, "mps")[0]
    subj = _splits(cfg)["folds"][cfg.fold]["test_subjects"][0]
    res = cli.finetune_subject(md, subj, cfg.data_dir, epochs=4, lr=1e-3,
                               fs=cfg.fs)
    assert res["n_train"] >= 1
    assert np.isfinite(res["post"]["mae_sbp"])


# -- signal-mode chain -----------------------------------------------------------

def test_unet_signal_chain(tmp_path):
    cfg = toy_config(
        str(tmp_path), arch="unet1d", seed=1,
        lambda_grid=[1e-8], mps_lambda_grid=[1e-8],
        nas=NasConfig(warmup_epochs=1, search_epochs=3, finetune_epochs=4,
                      patience=40, batch_size=16),
        pit=PitConfig(search_epochs=3, finetune_epochs=2, patience=40,
                      batch_size=16),
        mps=MpsConfig(search_epochs=3, finetune_epochs=2, patience=40,
                      batch_size=16))
    for stage in ("synth-data", "preprocess", "nas", "prune", "mps"):
        cli.run_stage(dataclasses.replace(cfg, stage=stage))
    md = _run_dirs(cfg, "mps")[0]
    out = cli.run_stage(dataclasses.replace(cfg, stage="run-int"),
                        model_dir=md)
    assert out["parity_max_code_diff"] == 0.0


# -- command line ----------------------------------------------------------------

def test_parser_exposes_all_stages():
    from tinybp.config import STAGES
    parser = cli._build_parser()
    sub = parser._subparsers._group_actions[0]
    assert set(sub.choices) == set(STAGES)


def test_main_runs_data_stages(tmp_path):
    data = str(tmp_path / "data")
    rc = cli.main(["synth-data", "--data-dir", data, "--subjects", "6",
                   "--seconds", "20", "--seed", "5"])
    assert rc == 0
    assert len(os.listdir(os.path.join(data, "records"))) == 6
    rc = cli.main(["preprocess", "--data-dir", data, "--seed", "5"])
    assert rc == 0


def test_main_surfaces_missing_prerequisites(tmp_path):
    rc = cli.main(["prune", "--data-dir", str(tmp_path / "nope"),
                   "--out-dir", str(tmp_path / "runs")])
    assert rc == 2


def test_config_file_roundtrip_drives_main(tmp_path):
    cfg = toy_config(str(tmp_path), n_subjects=4, k_folds=3)
    path = str(tmp_path / "exp.json")
    cfg.save(path)
    assert cli.main(["synth-data", "--config", path]) == 0
    assert cli.main(["preprocess", "--config", path]) == 0
    assert os.path.exists(os.path.join(cfg.data_dir, "windows.npz"))
