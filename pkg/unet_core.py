import copy
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field
from sklearn.metrics import accuracy_score, cohen_kappa_score, confusion_matrix
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from utils.errors import DimensionError, DivergenceError, LabelError, LoadError, MetricError, SpecError
from utils.settings import get_settings

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PIXEL_BATCH_SIZE = 256
PATCH_BATCH_SIZE = 32


class UNetSpec(BaseModel):
    input_spatial: tuple[int, int] = (1, 1)
    input_features: int = Field(default=30, ge=1)
    num_classes: int = 9
    dropout_rate: float = Field(default=0.2, ge=0.0, lt=1.0)
    channel_widths: tuple[int, int, int] = (64, 128, 256)
    leaky_slope: float = 0.01


class TrainConfig(BaseModel):
    epochs: int = Field(default=150, ge=1)
    learning_rate: float = Field(default=1e-4, gt=0.0)
    loss_weight: float = Field(default=1.0, gt=0.0)
    batch_size: Optional[int] = Field(default=None, ge=2)
    seed: int = Field(default=0, ge=0)


def _block(conv: nn.Module, channels: int, spec: UNetSpec) -> nn.Sequential:
    return nn.Sequential(
        conv,
        nn.BatchNorm2d(channels),
        nn.LeakyReLU(spec.leaky_slope),
        nn.Dropout(spec.dropout_rate),
    )


class SpectralUNet(nn.Module):
    """Three conv blocks, two skip-concatenated transposed-conv blocks, transposed-conv head.

    Every layer keeps the n x n grid; the center cell's logits classify the sample.
    """

    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        c1, c2, c3 = spec.channel_widths
        d, m = spec.input_features, spec.num_classes

        self.conv1 = _block(nn.Conv2d(d, c1, 3, padding=1, bias=False), c1, spec)
        self.conv2 = _block(nn.Conv2d(c1, c2, 3, padding=1, bias=False), c2, spec)
        self.conv3 = _block(nn.Conv2d(c2, c3, 3, padding=1, bias=False), c3, spec)
        self.deconv3 = _block(nn.ConvTranspose2d(c3, c3, 3, padding=1, bias=False), c3, spec)
        self.deconv2 = _block(nn.ConvTranspose2d(c3 + c2, c2, 3, padding=1, bias=False), c2, spec)
        self.deconv1 = nn.ConvTranspose2d(c2 + c1, m, 3, padding=1, bias=True)

    def logit_map(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self.conv1(x)
        e2 = self.conv2(e1)
        e3 = self.conv3(e2)
        d3 = torch.cat([self.deconv3(e3), e2], dim=1)
        d2 = torch.cat([self.deconv2(d3), e1], dim=1)
        return self.deconv1(d2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        logits = self.logit_map(x)
        n_rows, n_cols = logits.shape[2:]
        return logits[:, :, n_rows // 2, n_cols // 2]


@dataclass
class TrainedUNet:
    spec: UNetSpec
    network: SpectralUNet
    loss_history: list = field(default_factory=list)
    epoch_times: list = field(default_factory=list)
    seed: int = 0

    @property
    def epochs_trained(self) -> int:
        return len(self.loss_history)


def count_trainable_parameters(net) -> int:
    module = net.network if isinstance(net, TrainedUNet) else net
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def build_unet(spec: UNetSpec, seed: int = 0) -> TrainedUNet:
    if spec.num_classes < 2:
        raise SpecError(f"a U-Net needs at least 2 classes, got {spec.num_classes}")
    if min(spec.input_spatial) < 1:
        raise SpecError(f"input spatial size must be positive, got {spec.input_spatial}")
    torch.manual_seed(seed)
    network = SpectralUNet(spec).to(get_settings().device)
    return TrainedUNet(spec=spec, network=network, seed=seed)


def _to_tensor(net: TrainedUNet, data) -> torch.Tensor:
    """(N, d) pixels or (N, n, n, d) patches -> (N, d, n, n)"""
    x = np.asarray(getattr(data, "samples", data), dtype=np.float32)
    spec = net.spec
    if x.ndim == 2:
        x = x[:, None, None, :]
    if x.ndim != 4:
        raise DimensionError(f"expected N x d pixels or N x n x n x d patches, got shape {x.shape}")
    if x.shape[3] != spec.input_features:
        raise DimensionError(f"U-Net expects {spec.input_features} features, got {x.shape[3]}")
    if tuple(x.shape[1:3]) != tuple(spec.input_spatial):
        raise DimensionError(f"U-Net expects {spec.input_spatial} inputs, got {x.shape[1:3]}")
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def _targets(net: TrainedUNet, labels) -> torch.Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() > net.spec.num_classes):
        raise LabelError(f"labels must lie in 1..{net.spec.num_classes}, got range {labels.min()}..{labels.max()}")
    return torch.from_numpy(labels - 1)


def weighted_loss(logits: torch.Tensor, targets: torch.Tensor, loss_weight: float) -> torch.Tensor:
    return loss_weight * F.cross_entropy(logits, targets)


def train(net: TrainedUNet, data, cfg: TrainConfig) -> TrainedUNet:
    """Minimise loss_weight * cross-entropy with Adam over shuffled mini-batches.

    Trains a copy of the network; the TrainedUNet passed in is left untouched.
    """
    x =_to_tensor(net, data)
    y = _targets(net, data.labels)
    if len(y) != len(x):
        raise DimensionError(f"{len(x)} samples but {len(y)} labels")
    if len(x) < 2:
        raise DimensionError(f"batch normalisation needs at least 2 training samples, got {len(x)}")

    settings = get_settings()
    batch_size = cfg.batch_size or (PIXEL_BATCH_SIZE if net.spec.input_spatial == (1, 1) else PATCH_BATCH_SIZE)
    loader = DataLoader(
        TensorDataset(x, y),
        batch_size=batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(cfg.seed),
        # a trailing batch of one sample breaks batch normalisation
        drop_last=len(x) % batch_size == 1,
    )
    torch.manual_seed(cfg.seed)
    network = copy.deepcopy(net.network)
    optimizer = torch.optim.Adam(network.parameters(), lr=cfg.learning_rate)

    history, epoch_times = [], []
    network.train()
    for epoch in tqdm(range(cfg.epochs), desc="U-Net epochs", disable=not settings.progress_enabled, leave=False):
        started = time.perf_counter()
        total, count = 0.0, 0
        for batch_x, batch_y in loader:
            batch_x, batch_y = batch_x.to(settings.device), batch_y.to(settings.device)
            optimizer.zero_grad()
            loss = weighted_loss(network(batch_x), batch_y, cfg.loss_weight)
            if not torch.isfinite(loss):
                raise DivergenceError(f"loss became {loss.item()} in epoch {epoch}")
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch_y)
            count += len(batch_y)
        history.append(total / count)
        epoch_times.append(time.perf_counter() - started)
        logger.debug("epoch %d: loss %.6f (%.3fs)", epoch, history[-1], epoch_times[-1])

    network.eval()
    return replace(net, network=network, loss_history=history, epoch_times=epoch_times, seed=cfg.seed)


def compute_gradients(net: TrainedUNet, data, loss_weight: float = 1.0) -> dict:
    """Gradients of the weighted loss at the current parameters, dropout and batch statistics frozen"""
    network = net.network
    network.eval()
    network.zero_grad()
    device = next(network.parameters()).device
    x = _to_tensor(net, data).to(device=device, dtype=next(network.parameters()).dtype)
    y = _targets(net, data.labels).to(device)
    weighted_loss(network(x), y, loss_weight).backward()
    grads = {name: p.grad.detach().clone() for name, p in network.named_parameters() if p.grad is not None}
    network.zero_grad()
    return grads


def labels_from_probabilities(probabilities) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the smallest class id on ties
    return np.argmax(np.asarray(probabilities), axis=1).astype(np.int64) + 1


@torch.no_grad()
def predict(net: TrainedUNet, data, batch_size: int = 4096) -> tuple:
    x = _to_tensor(net, data)
    network = net.network
    network.eval()
    device = next(network.parameters()).device
    dtype = next(network.parameters()).dtype
    chunks = [
        torch.softmax(network(x[start : start + batch_size].to(device=device, dtype=dtype)), dim=1).cpu().numpy()
        for start in range(0, len(x), batch_size)
    ]
    probabilities = np.concatenate(chunks) if chunks else np.zeros((0, net.spec.num_classes))
    return labels_from_probabilities(probabilities), probabilities


def overall_accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.size == 0 or truth.size == 0:
        raise MetricError("overall accuracy of an empty prediction is undefined")
    if pred.shape != truth.shape:
        raise MetricError(f"prediction length {pred.shape} differs from truth {truth.shape}")
    return float(accuracy_score(truth, pred))


def classification_summary(pred, truth, num_classes: int) -> dict:
    """Overall accuracy, mean per-class accuracy and Cohen's kappa"""
    oa = overall_accuracy(pred, truth)
    classes = np.arange(1, num_classes + 1)
    matrix = confusion_matrix(truth, pred, labels=classes)
    support = matrix.sum(axis=1)
    present = support > 0
    per_class = np.diag(matrix)[present] / support[present]
    kappa = cohen_kappa_score(truth, pred, labels=classes) if len(np.unique(np.concatenate([truth, pred]))) > 1 else 1.0
    return {"overall_accuracy": oa, "average_accuracy": float(per_class.mean()), "kappa": float(kappa)}


def save_checkpoint(path, net: TrainedUNet) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "spec": net.spec.model_dump(),
        "seed": net.seed,
        "epochs": net.epochs_trained,
        "loss_history": net.loss_history,
    }
    torch.save({"format_version": CHECKPOINT_VERSION, "header": header, "state_dict": net.network.state_dict()}, path)
    return path


def load_checkpoint(path) -> TrainedUNet:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"missing checkpoint {path}")
    checkpoint = torch.load(path, map_location=get_settings().device)
    if checkpoint.get("format_version") != CHECKPOINT_VERSION:
        raise LoadError(f"{path} has format version {checkpoint.get('format_version')}, expected {CHECKPOINT_VERSION}")
    header = checkpoint["header"]
    net = build_unet(UNetSpec(**header["spec"]), seed=header["seed"])
    net.network.load_state_dict(checkpoint["state_dict"])
    net.network.eval()
    return replace(net, loss_history=list(header["loss_history"]))
