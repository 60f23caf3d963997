import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.special import logsumexp
from tqdm import tqdm

from hsi_data import SplitSpec, random_split
from ledger_manager import TrialLedger, make_row
from unet_core import TrainConfig, TrainedUNet, UNetSpec, build_unet, predict, train as train_unet
from utils.errors import (
    ClusteringError,
    DimensionError,
    DivergenceError,
    MetricError,
    SmallClusterError,
    TrialError,
    WeightError,
)
from utils.messages import TEXT_CLUSTERING, TEXT_PARALLEL_SUBNETS, TEXT_TRAINING_SUBNET, TEXT_TRIAL_DONE
from utils.settings import get_settings

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterModel:
    method: str
    k: int
    seed: int
    centroids: Optional[np.ndarray] = None
    means: Optional[np.ndarray] = None
    covariances: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    # k-means inertia per Lloyd iteration, or GMM mean log-likelihood per EM iteration
    history: tuple = ()

    @property
    def dim(self) -> int:
        return (self.centroids if self.method == "kmeans" else self.means).shape[1]


def _spectra(data) -> np.ndarray:
    return np.asarray(getattr(data, "spectra", data), dtype=np.float64)


def squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    distances = np.empty((len(x), len(centroids)))
    for j, centroid in enumerate(centroids):
        distances[:, j] = ((x - centroid) ** 2).sum(axis=1)
    return distances


def _kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(len(x))]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            index = rng.choice(len(x), p=closest / total)
        else:
            index = rng.integers(len(x))
        centroids[i] = x[index]
        closest = np.minimum(closest, ((x - centroids[i]) ** 2).sum(axis=1))
    return centroids


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int) -> tuple:
    history = []
    labels = None
    for _ in range(max_iter):
        distances = squared_distances(x, centroids)
        new_labels = np.argmin(distances, axis=1)
        history.append(float(distances[np.arange(len(x)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centroids = centroids.copy()
        point_cost = distances[np.arange(len(x)), labels]
        for j in range(len(centroids)):
            members = labels == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                # relocate an empty centroid onto the worst-served point
                far = int(np.argmax(point_cost))
                centroids[j] = x[far]
                point_cost[far] = 0.0
    else:
        distances = squared_distances(x, centroids)
        labels = np.argmin(distances, axis=1)
        history.append(float(distances[np.arange(len(x)), labels].sum()))
    return centroids, labels, history


def _fit_kmeans(x: np.ndarray, k: int, seed: int, n_init: int, max_iter: int) -> tuple:
    best = None
    for restart in range(n_init):
        rng = np.random.default_rng([seed, restart])
        centroids, labels, history = _lloyd(x, _kmeans_plus_plus(x, k, rng), max_iter)
        if best is None or history[-1] < best[2][-1]:
            best = (centroids, labels, history)
    return best


def _log_gaussians(x: np.ndarray, means: np.ndarray, covariances: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """log(weight_j) + log N(x | mean_j, cov_j) for every sample and component"""
    n, d = x.shape
    out = np.empty((n, len(means)))
    for j, (mean, cov) in enumerate(zip(means, covariances)):
        try:
            lower = cholesky(cov, lower=True)
        except LinAlgError as e:
            raise ClusteringError(f"GMM component {j} covariance is not positive definite") from e
        z = solve_triangular(lower, (x - mean).T, lower=True)
        log_det = 2.0 * np.log(np.diag(lower)).sum()
        out[:, j] = np.log(weights[j]) - 0.5 * (d * np.log(2.0 * np.pi) + log_det + (z**2).sum(axis=0))
    return out


def _gmm_m_step(x: np.ndarray, resp: np.ndarray, reg_covar: float) -> tuple:
    n, d = x.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    means = resp.T @ x / nk[:, None]
    covariances = np.empty((len(nk), d, d))
    for j in range(len(nk)):
        diff = x - means[j]
        covariances[j] = (resp[:, j, None] * diff).T @ diff / nk[j]
        covariances[j].flat[:: d + 1] += reg_covar
    weights = nk / nk.sum()
    return means, covariances, weights / weights.sum()


def _fit_gmm(x: np.ndarray, k: int, seed: int, n_init: int, max_iter: int, tol: float, reg_covar: float) -> tuple:
    _, labels, _ = _fit_kmeans(x, k, seed, n_init, max_iter=300)
    resp = np.zeros((len(x), k))
    resp[np.arange(len(x)), labels] = 1.0
    means, covariances, weights = _gmm_m_step(x, resp, reg_covar)

    history = []
    for _ in range(max_iter):
        log_prob = _log_gaussians(x, means, covariances, weights)
        log_norm = logsumexp(log_prob, axis=1)
        history.append(float(log_norm.mean()))
        if len(history) > 1 and history[-1] - history[-2] < tol:
            break
        resp = np.exp(log_prob - log_norm[:, None])
        means, covariances, weights = _gmm_m_step(x, resp, reg_covar)
    else:
        history.append(float(logsumexp(_log_gaussians(x, means, covariances, weights), axis=1).mean()))
    return means, covariances, weights, history


def fit_cluster(
    train,
    method: Literal["kmeans", "gmm"],
    k: int,
    seed: int = 0,
    min_cluster_size: int = 1,
    n_init: int = 10,
    max_iter: int = 300,
    gmm_max_iter: int = 100,
    gmm_tol: float = 1e-6,
    reg_covar: float = 1e-6,
) -> ClusterModel:
    """Partition spectra only; labels are never read"""
    x = _spectra(train)
    if x.ndim != 2:
        raise DimensionError(f"clustering expects an N x d matrix of spectra, got shape {x.shape}")
    if k < 1:
        raise ClusteringError(f"cluster count must be at least 1, got {k}")
    if k > len(x):
        raise ClusteringError(f"cannot form {k} clusters from {len(x)} samples")
    logger.info(TEXT_CLUSTERING.format(count=len(x), method=method, k=k))

    if method == "kmeans":
        centroids, _, history = _fit_kmeans(x, k, seed, n_init, max_iter)
        model = ClusterModel(method, k, seed, centroids=centroids, history=tuple(history))
    elif method == "gmm":
        means, covariances, weights, history = _fit_gmm(x, k, seed, n_init, gmm_max_iter, gmm_tol, reg_covar)
        model = ClusterModel(method, k, seed, means=means, covariances=covariances, weights=weights,
                             history=tuple(history))
    else:
        raise ClusteringError(f"unknown clustering method {method}")

    sizes = np.bincount(assign(model, x), minlength=k)
    if sizes.min() < min_cluster_size:
        raise SmallClusterError(sizes, min_cluster_size)
    return model


def assign(model: ClusterModel, pixels) -> np.ndarray:
    x = _spectra(pixels)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise DimensionError(f"cluster model expects {model.dim} features, got shape {x.shape}")
    if model.method == "kmeans":
        return np.argmin(squared_distances(x, model.centroids), axis=1)
    return np.argmax(_log_gaussians(x, model.means, model.covariances, model.weights), axis=1)


def make_weights(scheme: str, cluster_sizes, seed: int = 0) -> np.ndarray:
    sizes = np.asarray(cluster_sizes, dtype=np.float64)
    if sizes.size < 1:
        raise WeightError("at least one cluster is needed to build a weight vector")
    if np.any(sizes <= 0):
        raise WeightError(f"cluster sizes must be positive, got {sizes.astype(int).tolist()}")
    k = sizes.size
    if scheme == "constant":
        return np.full(k, 1.0 / k)
    if scheme == "abundance":
        return sizes / sizes.sum()
    if scheme == "random":
        weights = np.random.default_rng(seed).dirichlet(np.ones(k))
        weights = np.clip(weights, np.finfo(float).tiny, None)
        return weights / weights.sum()
    raise WeightError(f"unknown weight scheme {scheme}")


class EnsembleConfig(BaseModel):
    k: int = Field(default=2, ge=1)
    method: Literal["kmeans", "gmm"] = "kmeans"
    weight_scheme: Literal["constant", "abundance", "random"] = "constant"
    weights: Optional[list[float]] = None
    epochs_per_subnet: int = Field(default=200, ge=1)
    num_trials: int = Field(default=5, ge=1)
    min_cluster_size: int = Field(default=50, ge=1)
    learning_rate: float = Field(default=1e-4, gt=0.0)
    batch_size: Optional[int] = Field(default=None, ge=2)
    n_init: int = Field(default=10, ge=1)
    reg_covar: float = Field(default=1e-6, ge=0.0)
    parallel_subnets: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _explicit_weights(self):
        if self.weights is not None:
            if len(self.weights) != self.k:
                raise ValueError(f"explicit weights have {len(self.weights)} entries for k={self.k}")
            if min(self.weights) <= 0 or abs(sum(self.weights) - 1.0) > 1e-9:
                raise ValueError("explicit weights must be positive and sum to 1")
        return self


@dataclass
class EnsembleModel:
    cluster_model: ClusterModel
    subnets: list
    config: EnsembleConfig
    weights: np.ndarray
    train_cluster_sizes: np.ndarray
    num_classes: int
    timings: dict = field(default_factory=dict)
    subnet_times: list = field(default_factory=list)


def _subnet_spec(train, num_classes: int) -> UNetSpec:
    n = getattr(train, "patch_size", 1)
    return UNetSpec(input_spatial=(n, n), input_features=train.num_features, num_classes=num_classes)


def train_ensemble(train, cfg: EnsembleConfig, seed: int = 0, num_classes: Optional[int] = None) -> EnsembleModel:
    num_classes = int(num_classes or train.labels.max())
    settings = get_settings()

    started = time.perf_counter()
    cluster_model = fit_cluster(
        train.spectra, cfg.method, cfg.k, seed=seed, min_cluster_size=cfg.min_cluster_size,
        n_init=cfg.n_init, reg_covar=cfg.reg_covar,
    )
    ids = assign(cluster_model, train.spectra)
    clustering_time = time.perf_counter() - started

    sizes = np.bincount(ids, minlength=cfg.k)
    weights = np.asarray(cfg.weights) if cfg.weights is not None else make_weights(cfg.weight_scheme, sizes, seed)
    spec = _subnet_spec(train, num_classes)

    jobs = []
    for j in range(cfg.k):
        subset = train.subset(np.flatnonzero(ids == j))
        net = build_unet(spec, seed=seed + j)
        train_cfg = TrainConfig(
            epochs=cfg.epochs_per_subnet,
            learning_rate=cfg.learning_rate,
            loss_weight=float(weights[j]),
            batch_size=cfg.batch_size,
            seed=seed + j,
        )
        jobs.append((j, net, subset, train_cfg))

    def run_job(job) -> tuple:
        j, net, subset, train_cfg = job
        logger.info(TEXT_TRAINING_SUBNET.format(index=j + 1, total=cfg.k, count=len(subset), weight=weights[j]))
        job_started = time.perf_counter()
        try:
            trained = train_unet(net, subset, train_cfg)
        except DivergenceError as e:
            raise DivergenceError(f"sub-network of cluster {j} diverged: {e}") from e
        return trained, time.perf_counter() - job_started

    started = time.perf_counter()
    if cfg.parallel_subnets > 1:
        logger.warning(TEXT_PARALLEL_SUBNETS)
        with ThreadPoolExecutor(max_workers=cfg.parallel_subnets) as pool:
            results = list(pool.map(run_job, jobs))
    else:
        results = [run_job(job) for job in tqdm(jobs, desc="sub-networks", disable=not settings.progress_enabled,
                                                leave=False)]
    training_time = time.perf_counter() - started

    subnets = [trained for trained, _ in results]
    epoch_times = [t for net in subnets for t in net.epoch_times[1:]]
    return EnsembleModel(
        cluster_model=cluster_model,
        subnets=subnets,
        config=cfg,
        weights=weights,
        train_cluster_sizes=sizes,
        num_classes=num_classes,
        timings={
            "clustering": clustering_time,
            "training": training_time,
            "seconds_per_epoch": float(np.mean(epoch_times)) if epoch_times else 0.0,
        },
        subnet_times=[seconds for _, seconds in results],
    )


def predict_ensemble(model: EnsembleModel, test, trial: int = 0) -> tuple:
    """Route every test sample to one sub-network and reassemble predictions in input order"""
    if len(test) == 0:
        raise MetricError("cannot evaluate an ensemble on an empty test set")
    ids = assign(model.cluster_model, test.spectra)
    labels = np.zeros(len(test), dtype=np.int64)
    total = len(test)
    rows = []
    for j, subnet in enumerate(model.subnets):
        started = time.perf_counter()
        members = np.flatnonzero(ids == j)
        correct = 0
        if members.size:
            routed = test.subset(members)
            labels[members], _ = predict(subnet, routed)
            correct = int(np.count_nonzero(labels[members] == routed.labels))
        elapsed = time.perf_counter() - started
        train_seconds = model.subnet_times[j] if j < len(model.subnet_times) else 0.0
        rows.append(make_row(trial, j, model.train_cluster_sizes[j], members.size, correct, total,
                             train_seconds + elapsed))
    return labels, rows


def run_trial(train_set, test_set, cfg: EnsembleConfig, seed: int, trial_index: int,
              num_classes: Optional[int] = None) -> tuple:
    model = train_ensemble(train_set, cfg, seed=seed, num_classes=num_classes)
    labels, rows = predict_ensemble(model, test_set, trial=trial_index)
    return model, labels, rows


def run_trials(ds, cfg: EnsembleConfig, split: SplitSpec, num_classes: Optional[int] = None,
               seed: Optional[int] = None, ledger: Optional[TrialLedger] = None) -> TrialLedger:
    """Trial loop: split, cluster, train k sub-networks, evaluate, average over T trials"""
    ledger = ledger if ledger is not None else TrialLedger()
    base_seed = split.seed if seed is None else seed
    num_classes = int(num_classes or ds.labels.max())
    for t in range(split.num_trials):
        try:
            train_set, test_set = random_split(ds, split, t)
            _, _, rows = run_trial(train_set, test_set, cfg, base_seed + t, t, num_classes)
        except Exception as e:
            raise TrialError(t, e) from e
        ledger.add_rows(rows)
        logger.info(TEXT_TRIAL_DONE.format(trial=t, accuracy=ledger.trial_accuracy(t)))
    return ledger
