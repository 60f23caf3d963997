import json
import logging
import platform
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import torch
from pydantic import BaseModel, Field
from tqdm import tqdm

from ceu_ensemble import EnsembleConfig, fit_cluster, predict_ensemble, train_ensemble
from feature_reduction import CAE_DEFAULT_LATENT, fit_reducer
from hsi_data import SplitSpec, dataset_fingerprint, load_dataset, remove_background, split_indices
from ledger_manager import LedgerManager, TrialLedger, make_row
from patching import PatchConfig, apply_patching, extract_cpc
from unet_core import TrainConfig, UNetSpec, build_unet, classification_summary, predict, save_checkpoint, train
from utils.cache_manager import load_from_cache, make_cache_key, save_to_cache
from utils.config_checker import check_experiment_config
from utils.errors import ClusteringError, ConfigError, OutputError, StageError
from utils.ledger_io import ledger_records, write_ledger_rows, write_series
from utils.messages import (
    TEXT_CACHE_HIT,
    TEXT_EXPERIMENT_DONE,
    TEXT_EXPERIMENT_FAILED,
    TEXT_GRID_CELL_FAILED,
    TEXT_NO_REPORTS,
    TEXT_NOTE_PARALLEL_SUBNETS,
    TEXT_NOTE_PARALLEL_TRIALS,
    TEXT_OUTPUTS_WRITTEN,
    TEXT_PARALLEL_TRIALS,
    TEXT_TRAINING_UNET,
    TEXT_TRIAL_DONE,
)
from utils.reportgen import render_report_text
from utils.settings import get_settings

logger = logging.getLogger(__name__)

PHASES = ("loading", "patching", "reduction", "clustering", "training", "prediction")


class ExperimentConfig(BaseModel):
    name: str = "experiment"
    dataset: Path
    reducer: Literal["pca", "cae2d", "cae3d"] = "pca"
    reduce_dim: Optional[int] = Field(default=None, ge=1)
    cae_epochs: Optional[int] = Field(default=None, ge=1)
    patch: Optional[PatchConfig] = None
    model: Literal["unet", "ceunet"] = "ceunet"
    ensemble: EnsembleConfig = EnsembleConfig()
    split: SplitSpec = SplitSpec()
    seed: int = Field(default=0, ge=0)
    unet_epochs: int = Field(default=150, ge=1)
    # overrides unet_epochs / epochs_per_subnet; 0 runs reduction and clustering only
    epochs: Optional[int] = Field(default=None, ge=0)
    learning_rate: float = Field(default=1e-4, gt=0.0)
    batch_size: Optional[int] = Field(default=None, ge=2)
    parallel_trials: int = Field(default=1, ge=1)

    @property
    def resolved_dim(self) -> int:
        if self.reduce_dim is not None:
            return self.reduce_dim
        return CAE_DEFAULT_LATENT.get(self.reducer, 30)

    @property
    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return self.unet_epochs if self.model == "unet" else self.ensemble.epochs_per_subnet

    @property
    def model_label(self) -> str:
        label = "U-Net" if self.model == "unet" else "CEU-Net"
        if self.patch is None:
            return label
        if self.patch.mode == "cpc":
            return f"{label} (CPC)"
        return f"{label} ({self.patch.mode} n={self.patch.n})"


class Report(BaseModel):
    name: str
    dataset: str
    model_label: str
    config: dict
    status: Literal["ok", "failed"] = "ok"
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    trial_accuracies: list[float] = []
    trial_average_accuracies: list[float] = []
    trial_kappas: list[float] = []
    mean_accuracy: Optional[float] = None
    std_accuracy: Optional[float] = None
    cluster_k: Optional[int] = None
    timings: dict[str, float] = {}
    seconds_per_epoch: Optional[float] = None
    ledger: list[dict] = []
    hardware: str = ""
    timing_comparable: bool = True
    reproducible: bool = True
    notes: list[str] = []
    checkpoints: list[str] = []


def hardware_note() -> str:
    settings = get_settings()
    cpu = platform.processor() or platform.machine()
    return f"{cpu}, {platform.system()}, torch {torch.__version__}, device={settings.device}, threads={torch.get_num_threads()}"


@contextmanager
def _stage(name: str, timings: Optional[dict] = None):
    started = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e
    finally:
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - started


def _reduced_features(cfg: ExperimentConfig, cube, pixels, train_idx, trial: int, patched: bool) -> np.ndarray:
    """Fit the reducer on training spectra, then reduce the whole cube (cpc) or the labeled pixels"""
    settings = get_settings()
    key = make_cache_key(
        dataset=dataset_fingerprint(cfg.dataset), cube=cube.name, reducer=cfg.reducer, dim=cfg.resolved_dim,
        cae_epochs=cfg.cae_epochs, lr=cfg.learning_rate if cfg.reducer != "pca" else None,
        split=cfg.split.model_dump(), trial=trial, seed=cfg.seed,
        target="cube" if patched else "pixels",
        downsample=cfg.patch.model_dump() if cfg.patch is not None and cfg.patch.mode != "cpc" else None,
    )
    if settings.use_cache:
        cached = load_from_cache(key)
        if cached is not None:
            logger.info(TEXT_CACHE_HIT.format(key=f"{cfg.reducer}/{cfg.resolved_dim}/trial {trial}"))
            return cached["features"]

    reducer = fit_reducer(cfg.reducer, pixels.samples[train_idx], dim=cfg.resolved_dim, epochs=cfg.cae_epochs,
                          lr=cfg.learning_rate, seed=cfg.seed + trial)
    features = reducer.transform_cube(cube.data) if patched else reducer.transform(pixels.samples)
    if settings.use_cache:
        save_to_cache(key, {"features": features})
    return features


def _save_checkpoints(checkpoint_dir: Optional[Path], trial: int, nets: list, per_cluster: bool) -> list:
    if checkpoint_dir is None:
        return []
    with _stage("checkpoint"):
        if not per_cluster:
            return [str(save_checkpoint(Path(checkpoint_dir) / f"trial{trial}.pt", nets[0]))]
        return [
            str(save_checkpoint(Path(checkpoint_dir) / f"trial{trial}_cluster{j}.pt", net))
            for j, net in enumerate(nets)
        ]


def _run_trial(cfg: ExperimentConfig, cube, gt, pixels, trial: int, checkpoint_dir: Optional[Path] = None) -> dict:
    timings = {phase: 0.0 for phase in PHASES}
    patched = cfg.patch is not None and cfg.patch.mode == "cpc"
    seed = cfg.seed + trial

    with _stage("split"):
        train_idx, test_idx = split_indices(len(pixels), cfg.split, trial)

    with _stage("reduction", timings):
        features = _reduced_features(cfg, cube, pixels, train_idx, trial, patched)

    with _stage("patching", timings):
        if patched:
            data = extract_cpc(features, gt, cfg.patch)
        else:
            data = pixels.with_samples(features)
        train_set, test_set = data.subset(train_idx), data.subset(test_idx)

    epochs = cfg.resolved_epochs
    result = {"trial": trial, "timings": timings, "rows": [], "summary": None, "epoch_times": [], "checkpoints": []}

    if cfg.model == "ceunet":
        ensemble_cfg = cfg.ensemble.model_copy(update={
            "epochs_per_subnet": max(epochs, 1),
            "learning_rate": cfg.learning_rate,
            "batch_size": cfg.batch_size,
        })
        if epochs == 0:
            with _stage("clustering", timings):
                fit_cluster(train_set.spectra, ensemble_cfg.method, ensemble_cfg.k, seed=seed,
                            min_cluster_size=ensemble_cfg.min_cluster_size, n_init=ensemble_cfg.n_init,
                            reg_covar=ensemble_cfg.reg_covar)
            return result
        with _stage("training"):
            try:
                model = train_ensemble(train_set, ensemble_cfg, seed=seed, num_classes=gt.num_classes)
            except ClusteringError as e:
                raise StageError("clustering", e) from e
        timings["clustering"] += model.timings["clustering"]
        timings["training"] += model.timings["training"]
        result["epoch_times"] = [t for net in model.subnets for t in net.epoch_times[1:]]
        result["checkpoints"] = _save_checkpoints(checkpoint_dir, trial, model.subnets, per_cluster=True)
        with _stage("prediction", timings):
            labels, rows = predict_ensemble(model, test_set, trial=trial)
    else:
        if epochs == 0:
            return result
        spec = UNetSpec(
            input_spatial=(cfg.patch.n, cfg.patch.n) if patched else (1, 1),
            input_features=data.num_features,
            num_classes=gt.num_classes,
        )
        logger.info(TEXT_TRAINING_UNET.format(count=len(train_set)))
        with _stage("training", timings):
            net = build_unet(spec, seed=seed)
            net = train(net, train_set, TrainConfig(epochs=epochs, learning_rate=cfg.learning_rate,
                                                    batch_size=cfg.batch_size, seed=seed))
        result["epoch_times"] = net.epoch_times[1:]
        result["checkpoints"] = _save_checkpoints(checkpoint_dir, trial, [net], per_cluster=False)
        with _stage("prediction", timings):
            started = time.perf_counter()
            labels, _ = predict(net, test_set)
            correct = int(np.count_nonzero(labels == test_set.labels))
            rows = [make_row(trial, 0, len(train_set), len(test_set), correct, len(test_set),
                             timings["training"] + time.perf_counter() - started)]

    with _stage("evaluation"):
        result["rows"] = rows
        result["summary"] = classification_summary(labels, test_set.labels, gt.num_classes)
    return result


def _run_notes(cfg: ExperimentConfig) -> list:
    notes = []
    if cfg.parallel_trials > 1:
        notes.append(TEXT_NOTE_PARALLEL_TRIALS)
    if cfg.model == "ceunet" and cfg.ensemble.parallel_subnets > 1:
        notes.append(TEXT_NOTE_PARALLEL_SUBNETS)
    return notes


def run_experiment(cfg: ExperimentConfig, ledger_manager: Optional[LedgerManager] = None,
                   checkpoint_dir: Optional[Path] = None) -> Report:
    """reduce -> (patch) -> train -> evaluate over T trials"""
    issues = check_experiment_config(cfg)
    if issues:
        raise ConfigError(issues)

    settings = get_settings()
    if ledger_manager is not None:
        ledger_manager.clear_ledger(cfg.name)
    ledger = ledger_manager.get_ledger(cfg.name) if ledger_manager is not None else TrialLedger()
    notes = _run_notes(cfg)
    report = Report(
        name=cfg.name,
        dataset=cfg.dataset.name,
        model_label=cfg.model_label,
        config=json.loads(cfg.model_dump_json()),
        cluster_k=cfg.ensemble.k if cfg.model == "ceunet" else None,
        hardware=hardware_note(),
        timing_comparable=cfg.parallel_trials == 1,
        reproducible=not notes,
        notes=notes,
    )
    timings = {phase: 0.0 for phase in PHASES}

    try:
        with _stage("loading", timings):
            cube, gt = load_dataset(cfg.dataset)
        report.dataset = cube.name
        if cfg.patch is not None and cfg.patch.mode != "cpc":
            with _stage("patching", timings):
                cube, gt = apply_patching(cube, gt, cfg.patch)
        with _stage("loading", timings):
            pixels = remove_background(cube, gt)

        trials = range(cfg.split.num_trials)
        if cfg.parallel_trials > 1:
            logger.warning(TEXT_PARALLEL_TRIALS)
            with ThreadPoolExecutor(max_workers=cfg.parallel_trials) as pool:
                results = list(pool.map(lambda t: _run_trial(cfg, cube, gt, pixels, t, checkpoint_dir), trials))
        else:
            results = [
                _run_trial(cfg, cube, gt, pixels, t, checkpoint_dir)
                for t in tqdm(trials, desc=cfg.name, disable=not settings.progress_enabled, leave=False)
            ]
    except StageError as e:
        logger.error("Experiment %s failed: %s\n%s", cfg.name, e, traceback.format_exc())
        logger.warning(TEXT_EXPERIMENT_FAILED.format(name=cfg.name, stage=e.stage, cause=e.cause))
        return report.model_copy(update={
            "status": "failed",
            "failed_stage": e.stage,
            "error": f"{type(e.cause).__name__}: {e.cause}",
            "timings": timings,
        })

    epoch_times = []
    for result in results:
        for phase, seconds in result["timings"].items():
            timings[phase] = timings.get(phase, 0.0) + seconds
        epoch_times.extend(result["epoch_times"])
        ledger.add_rows(result["rows"])
        if result["rows"]:
            logger.info(TEXT_TRIAL_DONE.format(trial=result["trial"], accuracy=ledger.trial_accuracy(result["trial"])))

    summaries = [result["summary"] for result in results if result["summary"] is not None]
    accuracies = ledger.trial_accuracies()
    report = report.model_copy(update={
        "trial_accuracies": accuracies,
        "trial_average_accuracies": [s["average_accuracy"] for s in summaries],
        "trial_kappas": [s["kappa"] for s in summaries],
        "mean_accuracy": float(np.mean(accuracies)) if accuracies else None,
        "std_accuracy": float(np.std(accuracies)) if accuracies else None,
        "timings": timings,
        "seconds_per_epoch": float(np.mean(epoch_times)) if epoch_times else None,
        "ledger": [row.to_dict() for row in ledger.rows],
        "checkpoints": [path for result in results for path in result["checkpoints"]],
    })
    if accuracies:
        logger.info(TEXT_EXPERIMENT_DONE.format(name=cfg.name, mean=report.mean_accuracy, std=report.std_accuracy,
                                                trials=len(accuracies)))
    return report


class GridCell(BaseModel):
    method: str
    k: int
    mean_accuracy: Optional[float] = None
    std_accuracy: Optional[float] = None
    status: str = "ok"
    error: Optional[str] = None
    best: bool = False
    report: Optional[Report] = None


def grid_cluster_tuning(cfg: ExperimentConfig, methods=("kmeans", "gmm"), k_range=range(2, 7)) -> list:
    cells = []
    for method in methods:
        for k in k_range:
            cell_cfg = cfg.model_copy(update={
                "name": f"{cfg.name}-{method}-k{k}",
                "model": "ceunet",
                "ensemble": cfg.ensemble.model_copy(update={"method": method, "k": k, "weights": None}),
            })
            report = run_experiment(cell_cfg)
            if report.status != "ok":
                logger.warning(TEXT_GRID_CELL_FAILED.format(method=method, k=k, cause=report.error))
            cells.append(GridCell(
                method=method,
                k=k,
                mean_accuracy=report.mean_accuracy,
                std_accuracy=report.std_accuracy,
                status=report.status,
                error=report.error,
                report=report,
            ))
    feasible = [cell for cell in cells if cell.status == "ok" and cell.mean_accuracy is not None]
    if feasible:
        max(feasible, key=lambda cell: cell.mean_accuracy).best = True
    return cells


class WeightCell(BaseModel):
    scheme: str
    mean_accuracy: Optional[float] = None
    std_accuracy: Optional[float] = None
    status: str = "ok"
    error: Optional[str] = None
    report: Optional[Report] = None


def weight_study(cfg: ExperimentConfig, schemes=("constant", "abundance", "random")) -> list:
    """One mean accuracy per weight scheme; every arm reuses the same split membership"""
    cells = []
    for scheme in schemes:
        scheme_cfg = cfg.model_copy(update={
            "name": f"{cfg.name}-{scheme}",
            "model": "ceunet",
            "ensemble": cfg.ensemble.model_copy(update={"weight_scheme": scheme, "weights": None}),
        })
        report = run_experiment(scheme_cfg)
        cells.append(WeightCell(
            scheme=scheme,
            mean_accuracy=report.mean_accuracy,
            std_accuracy=report.std_accuracy,
            status=report.status,
            error=report.error,
            report=report,
        ))
    return cells


class TimingCell(BaseModel):
    model: str
    patched: bool
    seconds_per_epoch: Optional[float] = None
    total_seconds: float = 0.0
    clustering_seconds: float = 0.0
    reduction_seconds: float = 0.0
    status: str = "ok"
    report: Optional[Report] = None


def timing_comparison(cfg: ExperimentConfig, patch_n: int = 10) -> list:
    """Training time of U-Net and CEU-Net with and without CPC patching, PCA-30 throughout"""
    cells = []
    for model in ("unet", "ceunet"):
        for patched in (False, True):
            cell_cfg = cfg.model_copy(update={
                "name": f"{cfg.name}-{model}-{'cpc' if patched else 'pixels'}",
                "model": model,
                "reducer": "pca",
                "reduce_dim": 30,
                "cae_epochs": None,
                "patch": PatchConfig(mode="cpc", n=patch_n) if patched else None,
                "parallel_trials": 1,
            })
            report = run_experiment(cell_cfg)
            cells.append(TimingCell(
                model="U-Net" if model == "unet" else "CEU-Net",
                patched=patched,
                seconds_per_epoch=report.seconds_per_epoch,
                total_seconds=report.timings.get("training", 0.0),
                clustering_seconds=report.timings.get("clustering", 0.0),
                reduction_seconds=report.timings.get("reduction", 0.0),
                status=report.status,
                report=report,
            ))
    return cells


def _write_text(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise OutputError(path, e) from e


def emit_outputs(reports, out_dir, grid=None, weights=None, timing=None) -> list:
    """report.txt, report.json, ledger.csv and series/*.tsv"""
    reports = list(reports)
    if not reports:
        logger.info(TEXT_NO_REPORTS)
        return []
    out_dir = Path(out_dir)
    written = []

    report_txt = out_dir / "report.txt"
    _write_text(report_txt, render_report_text(reports, grid=grid, weights=weights, timing=timing))
    written.append(report_txt)

    report_json = out_dir / "report.json"
    _write_text(report_json, json.dumps([report.model_dump(mode="json") for report in reports], indent=2))
    written.append(report_json)

    records = [record for report in reports for record in ledger_records(report)]
    try:
        written.append(write_ledger_rows(out_dir / "ledger.csv", records))
        if grid:
            written.append(write_series(
                out_dir / "series" / "grid.tsv",
                [[c.method, c.k, c.mean_accuracy, c.std_accuracy, c.status] for c in grid],
                ["method", "k", "mean_accuracy", "std_accuracy", "status"],
            ))
        if weights:
            written.append(write_series(
                out_dir / "series" / "weights.tsv",
                [[c.scheme, c.mean_accuracy, c.std_accuracy, c.status] for c in weights],
                ["scheme", "mean_accuracy", "std_accuracy", "status"],
            ))
        if timing:
            written.append(write_series(
                out_dir / "series" / "timing.tsv",
                [[c.model, c.patched, c.seconds_per_epoch, c.total_seconds, c.clustering_seconds,
                  c.reduction_seconds] for c in timing],
                ["model", "patched", "seconds_per_epoch", "total_seconds", "clustering_seconds",
                 "reduction_seconds"],
            ))
    except OSError as e:
        raise OutputError(out_dir, e) from e

    logger.info(TEXT_OUTPUTS_WRITTEN.format(count=len(written), path=out_dir))
    return written


def load_reports(paths) -> list:
    reports = []
    for path in paths:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        for item in payload if isinstance(payload, list) else [payload]:
            reports.append(Report.model_validate(item))
    return reports
