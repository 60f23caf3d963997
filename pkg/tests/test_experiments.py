import json
from pathlib import Path

import numpy as np
import pytest
from conftest import make_scene

from experiments import (
    ExperimentConfig,
    Report,
    emit_outputs,
    grid_cluster_tuning,
    load_reports,
    run_experiment,
    timing_comparison,
    weight_study,
)
from hsi_data import write_dataset
from ledger_manager import LedgerManager
from patching import PatchConfig
from unet_core import load_checkpoint
from utils.errors import ConfigError
from utils.ledger_io import ledger_records, read_ledger_rows, read_series
from utils.messages import TEXT_NOTE_PARALLEL_SUBNETS, TEXT_NOTE_PARALLEL_TRIALS
from utils.reportgen import comparison_table
from utils.settings import get_settings


def tiny_config(dataset, **overrides) -> ExperimentConfig:
    values = {
        "name": "tiny",
        "dataset": dataset,
        "reduce_dim": 4,
        "model": "unet",
        "epochs": 3,
        "learning_rate": 1e-3,
        "batch_size": 16,
        "split": {"num_trials": 2, "seed": 1},
        "ensemble": {"k": 2, "min_cluster_size": 5, "num_trials": 2, "n_init": 2},
    }
    values.update(overrides)
    return ExperimentConfig.model_validate(values)


def test_single_unet_experiment(scene_dir):
    manager = LedgerManager()
    report = run_experiment(tiny_config(scene_dir), manager)
    assert report.status == "ok"
    assert report.model_label == "U-Net"
    assert len(report.trial_accuracies) == 2
    assert min(report.trial_accuracies) <= report.mean_accuracy <= max(report.trial_accuracies)
    assert len(report.trial_kappas) == 2
    assert report.config["reduce_dim"] == 4
    assert report.timings["reduction"] > 0
    ledger = manager.get_ledger("tiny")
    assert ledger.trial_accuracies() == report.trial_accuracies
    for trial, accuracy in enumerate(report.trial_accuracies):
        rows = [row for row in report.ledger if row["trial"] == trial]
        assert sum(row["correct"] for row in rows) / rows[0]["total"] == pytest.approx(accuracy)


def test_ensemble_experiment_writes_one_row_per_trial_and_cluster(scene_dir):
    report = run_experiment(tiny_config(scene_dir, model="ceunet"))
    assert report.status == "ok"
    assert report.cluster_k == 2
    assert len(report.ledger) == 4
    assert {(row["trial"], row["cluster"]) for row in report.ledger} == {(0, 0), (0, 1), (1, 0), (1, 1)}
    assert report.timings["clustering"] > 0


def test_same_seeds_give_identical_reports(scene_dir):
    cfg = tiny_config(scene_dir, model="ceunet")
    first = run_experiment(cfg)
    second = run_experiment(cfg)
    assert first.trial_accuracies == second.trial_accuracies
    assert [row["correct"] for row in first.ledger] == [row["correct"] for row in second.ledger]


def test_cpc_patched_experiment(scene_dir):
    report = run_experiment(tiny_config(scene_dir, patch={"mode": "cpc", "n": 3}))
    assert report.status == "ok"
    assert report.model_label == "U-Net (CPC)"


def test_downsampled_experiment(scene_dir):
    report = run_experiment(tiny_config(scene_dir, patch={"mode": "exclusive", "n": 2}, reduce_dim=3))
    assert report.status == "ok"
    assert report.dataset == "synthetic"
    assert report.model_label == "U-Net (exclusive n=2)"
    assert sum(row["test_size"] for row in report.ledger if row["trial"] == 0) > 0


def test_zero_epochs_runs_reduction_and_clustering_only(scene_dir):
    report = run_experiment(tiny_config(scene_dir, model="ceunet", epochs=0))
    assert report.status == "ok"
    assert report.trial_accuracies == []
    assert report.mean_accuracy is None
    assert report.timings["training"] == 0.0
    assert report.timings["reduction"] > 0
    assert report.timings["clustering"] > 0


def test_stage_failure_becomes_a_failed_report(scene_dir):
    cfg = tiny_config(scene_dir, model="ceunet", ensemble={"k": 2, "min_cluster_size": 1000, "num_trials": 2})
    report = run_experiment(cfg)
    assert report.status == "failed"
    assert report.failed_stage == "clustering"
    assert "SmallClusterError" in report.error


def test_invalid_config_is_rejected_before_running(tmp_path):
    with pytest.raises(ConfigError) as excinfo:
        run_experiment(tiny_config(tmp_path / "nowhere"))
    assert excinfo.value.issues


def test_parallel_trials_flag_timings(scene_dir):
    report = run_experiment(tiny_config(scene_dir, parallel_trials=2))
    assert report.status == "ok"
    assert report.timing_comparable is False
    assert report.reproducible is False
    assert report.notes == [TEXT_NOTE_PARALLEL_TRIALS]
    assert len(report.trial_accuracies) == 2


def test_parallel_subnets_mark_the_report_not_reproducible(scene_dir):
    ensemble = {"k": 2, "min_cluster_size": 5, "num_trials": 2, "n_init": 2, "parallel_subnets": 2}
    report = run_experiment(tiny_config(scene_dir, model="ceunet", ensemble=ensemble))
    assert report.status == "ok"
    assert report.timing_comparable is True
    assert report.reproducible is False
    assert report.notes == [TEXT_NOTE_PARALLEL_SUBNETS]


def test_sequential_runs_carry_no_notes(scene_dir):
    report = run_experiment(tiny_config(scene_dir))
    assert report.reproducible is True
    assert report.notes == []
    assert report.checkpoints == []


def test_checkpoints_are_written_per_trial_and_cluster(scene_dir, tmp_path):
    report = run_experiment(tiny_config(scene_dir, model="ceunet"), checkpoint_dir=tmp_path / "nets")
    assert sorted(Path(path).name for path in report.checkpoints) == [
        "trial0_cluster0.pt", "trial0_cluster1.pt", "trial1_cluster0.pt", "trial1_cluster1.pt"
    ]
    net = load_checkpoint(tmp_path / "nets" / "trial1_cluster0.pt")
    assert net.epochs_trained == 3
    assert net.seed == 1


def test_reduced_features_are_cached(scene_dir, monkeypatch):
    monkeypatch.setenv("CEUNET_USE_CACHE", "true")
    get_settings.cache_clear()
    first = run_experiment(tiny_config(scene_dir))
    assert any(get_settings().cache_dir.glob("*.npz"))
    second = run_experiment(tiny_config(scene_dir))
    assert first.trial_accuracies == second.trial_accuracies


def test_autoencoder_features_are_cached_per_learning_rate(scene_dir, monkeypatch):
    monkeypatch.setenv("CEUNET_USE_CACHE", "true")
    get_settings.cache_clear()
    cache_dir = get_settings().cache_dir
    for lr in (1e-4, 5e-2):
        cfg = tiny_config(scene_dir, model="unet", reducer="cae2d", cae_epochs=2, epochs=0, learning_rate=lr)
        assert run_experiment(cfg).status == "ok"
    assert len(list(cache_dir.glob("*.npz"))) == 4


def test_pca_features_ignore_learning_rate_in_cache(scene_dir, monkeypatch):
    monkeypatch.setenv("CEUNET_USE_CACHE", "true")
    get_settings.cache_clear()
    for lr in (1e-4, 5e-2):
        run_experiment(tiny_config(scene_dir, epochs=0, learning_rate=lr))
    assert len(list(get_settings().cache_dir.glob("*.npz"))) == 2


def test_grid_records_infeasible_cells(scene_dir):
    cells = grid_cluster_tuning(tiny_config(scene_dir), methods=["kmeans"], k_range=[2, 60])
    assert [(cell.method, cell.k) for cell in cells] == [("kmeans", 2), ("kmeans", 60)]
    assert cells[0].status == "ok" and cells[0].best
    assert cells[1].status == "failed" and not cells[1].best
    assert "SmallClusterError" in cells[1].error


def test_grid_two_blobs_prefers_two_clusters(tmp_path):
    blobs_dir = write_dataset(tmp_path / "two_blobs", *make_scene(num_classes=2, name="two_blobs"))
    cfg = tiny_config(blobs_dir, epochs=20, learning_rate=1e-2,
                      ensemble={"k": 2, "min_cluster_size": 2, "num_trials": 2, "n_init": 4})
    cells = grid_cluster_tuning(cfg, methods=["kmeans"], k_range=[2, 6])
    assert all(cell.status == "ok" for cell in cells)
    by_k = {cell.k: cell.mean_accuracy for cell in cells}
    assert by_k[2] >= by_k[6]
    assert by_k[2] > 0.95


def test_weight_study_reuses_splits(scene_dir):
    cells = weight_study(tiny_config(scene_dir), schemes=["constant", "abundance"])
    assert [cell.scheme for cell in cells] == ["constant", "abundance"]
    assert all(cell.status == "ok" for cell in cells)
    totals = [[row["total"] for row in cell.report.ledger] for cell in cells]
    assert totals[0] == totals[1]


def test_timing_comparison_cells(tmp_path):
    wide_dir = write_dataset(tmp_path / "wide", *make_scene(bands=32, name="wide"))
    cells = timing_comparison(tiny_config(wide_dir, epochs=2), patch_n=3)
    assert [(cell.model, cell.patched) for cell in cells] == [
        ("U-Net", False), ("U-Net", True), ("CEU-Net", False), ("CEU-Net", True)
    ]
    assert all(cell.status == "ok" for cell in cells)
    assert all(cell.seconds_per_epoch is not None and cell.seconds_per_epoch > 0 for cell in cells)
    assert cells[0].clustering_seconds == 0.0
    assert cells[2].clustering_seconds > 0.0


def test_emit_outputs_writes_tables_rows_and_series(tmp_path, scene_dir):
    reports = [run_experiment(tiny_config(scene_dir)), run_experiment(tiny_config(scene_dir, model="ceunet"))]
    grid = grid_cluster_tuning(tiny_config(scene_dir), methods=["kmeans"], k_range=[2])
    out = tmp_path / "out"
    written = emit_outputs(reports, out, grid=grid)
    assert out / "report.txt" in written
    text = (out / "report.txt").read_text(encoding="utf-8")
    assert "OVERALL TEST ACCURACY BY MODEL" in text
    assert "synthetic" in text
    assert "<== best" in text

    records = [record for report in reports for record in ledger_records(report)]
    assert read_ledger_rows(out / "ledger.csv") == records
    assert read_series(out / "series" / "grid.tsv")[0]["k"] == 2

    reloaded = load_reports([out / "report.json"])
    assert [r.trial_accuracies for r in reloaded] == [r.trial_accuracies for r in reports]


def test_emit_nothing_for_no_reports(tmp_path):
    assert emit_outputs([], tmp_path / "out") == []
    assert not (tmp_path / "out").exists()


def test_comparison_table_has_one_row_per_dataset():
    def report(dataset, label, accuracy, k=None):
        return Report(name=f"{dataset}-{label}", dataset=dataset, model_label=label, config={"reducer": "pca"},
                      mean_accuracy=accuracy, std_accuracy=0.0, cluster_k=k)

    table = comparison_table([
        report("botswana", "U-Net", 0.95),
        report("botswana", "CEU-Net", 0.9689, k=3),
        report("ksc", "U-Net (CPC)", 0.9),
    ])
    assert table["columns"] == ["U-Net", "CEU-Net", "U-Net (CPC)", "CEU-Net (CPC)"]
    assert set(table["rows"]) == {"botswana", "ksc"}
    assert table["rows"]["botswana"]["CEU-Net"] == (0.9689, 3)


def test_config_files_are_self_describing(tmp_path, scene_dir):
    cfg = tiny_config(scene_dir, model="ceunet", patch=PatchConfig(mode="cpc", n=3))
    path = tmp_path / "cfg.json"
    path.write_text(cfg.model_dump_json(), encoding="utf-8")
    assert ExperimentConfig.model_validate_json(path.read_text(encoding="utf-8")) == cfg
    assert json.loads(path.read_text())["ensemble"]["k"] == 2
    assert np.isclose(cfg.learning_rate, 1e-3)
