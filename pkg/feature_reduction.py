import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from utils.errors import DimensionError, DivergenceError, LoadError, SpecError
from utils.messages import TEXT_REDUCING
from utils.settings import get_settings

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

CAE_DEFAULT_LATENT = {"cae2d": 32, "cae3d": 30}
CAE_DEFAULT_EPOCHS = {"cae2d": 100, "cae3d": 150}
CAE_HIDDEN_CHANNELS = (16, 32)


def _as_samples(data) -> np.ndarray:
    return np.asarray(getattr(data, "samples", data))


# PCA


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]

    @property
    def output_dim(self) -> int:
        return self.components.shape[0]


def pca_fit(train, d: int) -> PcaModel:
    """Top-d principal directions of the centered training spectra"""
    x = _as_samples(train).astype(np.float64)
    if x.ndim != 2:
        raise DimensionError(f"PCA expects an N x B matrix, got shape {x.shape}")
    n, bands = x.shape
    if n < 2:
        raise DimensionError(f"PCA needs at least 2 samples, got {n}")
    if not 1 <= d <= bands:
        raise DimensionError(f"cannot keep {d} components of {bands} bands")

    mean = x.mean(axis=0)
    centered = x - mean
    covariance = centered.T @ centered / (n - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(eigenvalues)[::-1][:d]
    components = eigenvectors[:, order].T
    # Largest-magnitude entry of every component is positive
    pivots = components[np.arange(d), np.argmax(np.abs(components), axis=1)]
    components = components * np.where(pivots < 0, -1.0, 1.0)[:, None]
    explained = np.clip(eigenvalues[order], 0.0, None)
    return PcaModel(mean=mean, components=components, explained_variance=explained)


def pca_transform(model: PcaModel, pixels) -> np.ndarray:
    x = _as_samples(pixels)
    if x.shape[-1] != model.input_dim:
        raise DimensionError(f"PCA fitted on {model.input_dim} bands, got {x.shape[-1]}")
    return (x.astype(np.float64) - model.mean) @ model.components.T


def pca_inverse_transform(model: PcaModel, reduced) -> np.ndarray:
    reduced = np.asarray(reduced, dtype=np.float64)
    if reduced.shape[-1] != model.output_dim:
        raise DimensionError(f"PCA keeps {model.output_dim} components, got {reduced.shape[-1]}")
    return reduced @ model.components + model.mean


def pca_reconstruction_error(model: PcaModel, pixels) -> float:
    x = _as_samples(pixels).astype(np.float64)
    return float(np.mean((pca_inverse_transform(model, pca_transform(model, x)) - x) ** 2))


# Convolutional autoencoders


class SpectralAutoencoder(nn.Module):
    """Three conv blocks down to latent_dim channels, mirrored transposed-conv decoder.

    The spectral axis is treated as the first spatial axis; 2D and 3D variants
    differ only in the layer family.
    """

    def __init__(self, variant: str, bands: int, latent_dim: int, hidden=CAE_HIDDEN_CHANNELS):
        super().__init__()
        self.variant = variant
        self.bands = bands
        self.latent_dim = latent_dim
        if variant == "cae2d":
            conv, deconv, pool, adaptive = nn.Conv2d, nn.ConvTranspose2d, nn.MaxPool2d, nn.AdaptiveAvgPool2d
            pool_shape, stride, out_pad, ones = (2, 1), (2, 1), (1, 0), (1, 1)
        elif variant == "cae3d":
            conv, deconv, pool, adaptive = nn.Conv3d, nn.ConvTranspose3d, nn.MaxPool3d, nn.AdaptiveAvgPool3d
            pool_shape, stride, out_pad, ones = (2, 1, 1), (2, 1, 1), (1, 0, 0), (1, 1, 1)
        else:
            raise SpecError(f"unknown autoencoder variant {variant}")

        widths = [1, hidden[0], hidden[1], latent_dim]
        encoder = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            encoder += [conv(cin, cout, kernel_size=3, stride=1, padding=1), nn.ReLU(), pool(pool_shape, ceil_mode=True)]
        self.encoder = nn.Sequential(*encoder)
        self.bottleneck = adaptive(ones)

        self.reduced_length = bands
        for _ in range(3):
            self.reduced_length = -(-self.reduced_length // 2)

        decoder = []
        reversed_widths = widths[::-1]
        for cin, cout in zip(reversed_widths[:-2], reversed_widths[1:-1]):
            decoder += [deconv(cin, cout, kernel_size=3, stride=stride, padding=1, output_padding=out_pad), nn.ReLU()]
        decoder += [deconv(widths[1], 1, kernel_size=3, stride=stride, padding=1, output_padding=out_pad), nn.Sigmoid()]
        self.decoder = nn.Sequential(*decoder)

    def _to_volume(self, x: torch.Tensor) -> torch.Tensor:
        # (N, B) or (N, n, n, B) -> (N, 1, B, n, n) / (N, 1, B, n*n)
        if x.dim() == 2:
            x = x[:, :, None, None]
        else:
            x = x.permute(0, 3, 1, 2)
        x = x.unsqueeze(1)
        if self.variant == "cae2d":
            x = x.flatten(3)
        return x

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.bottleneck(self.encoder(self._to_volume(x))).flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        volume = self._to_volume(x)
        latent = self.bottleneck(self.encoder(volume))
        spatial = volume.shape[3:]
        expanded = latent.expand(-1, -1, self.reduced_length, *spatial)
        decoded = self.decoder(expanded)
        return decoded[:, :, : self.bands]

    def reconstruction_target(self, x: torch.Tensor) -> torch.Tensor:
        return self._to_volume(x)


@dataclass
class CaeModel:
    network: SpectralAutoencoder
    variant: str
    latent_dim: int
    input_shape: tuple
    loss_history: list = field(default_factory=list)
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return self.input_shape[-1]

    @property
    def output_dim(self) -> int:
        return self.latent_dim


def cae_fit(
    train,
    variant: Literal["cae2d", "cae3d"],
    epochs: Optional[int] = None,
    lr: float = 1e-4,
    latent_dim: Optional[int] = None,
    batch_size: int = 256,
    seed: int = 0,
) -> CaeModel:
    if variant not in CAE_DEFAULT_LATENT:
        raise SpecError(f"unknown autoencoder variant {variant}")
    epochs = CAE_DEFAULT_EPOCHS[variant] if epochs is None else epochs
    latent_dim = CAE_DEFAULT_LATENT[variant] if latent_dim is None else latent_dim
    if epochs < 1:
        raise SpecError(f"epochs must be at least 1, got {epochs}")
    x = _as_samples(train).astype(np.float32)
    if x.ndim not in (2, 4):
        raise DimensionError(f"autoencoder expects N x B pixels or N x n x n x B patches, got {x.shape}")

    settings = get_settings()
    torch.manual_seed(seed)
    network = SpectralAutoencoder(variant, x.shape[-1], latent_dim).to(settings.device)
    optimizer = torch.optim.Adam(network.parameters(), lr=lr)
    loss_fn = nn.MSELoss()
    loader = DataLoader(
        TensorDataset(torch.from_numpy(x)),
        batch_size=batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(seed),
    )

    history = []
    network.train()
    for epoch in tqdm(range(epochs), desc=f"{variant} epochs", disable=not settings.progress_enabled, leave=False):
        total, count = 0.0, 0
        for (batch,) in loader:
            batch = batch.to(settings.device)
            optimizer.zero_grad()
            loss = loss_fn(network(batch), network.reconstruction_target(batch))
            if not torch.isfinite(loss):
                raise DivergenceError(f"{variant} reconstruction loss became {loss.item()} in epoch {epoch}")
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
            count += len(batch)
        history.append(total / count)
        logger.debug("%s epoch %d: mse %.6f", variant, epoch, history[-1])

    network.eval()
    return CaeModel(network, variant, latent_dim, tuple(x.shape[1:]), history, seed)


@torch.no_grad()
def cae_encode(model: CaeModel, samples, batch_size: int = 4096) -> np.ndarray:
    x = _as_samples(samples).astype(np.float32)
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise DimensionError(f"autoencoder fitted on samples of shape {model.input_shape}, got {x.shape[1:]}")
    device = next(model.network.parameters()).device
    model.network.eval()
    chunks = [
        model.network.encode(torch.from_numpy(x[start : start + batch_size]).to(device)).cpu().numpy()
        for start in range(0, len(x), batch_size)
    ]
    if not chunks:
        return np.zeros((0, model.latent_dim), dtype=np.float32)
    return np.concatenate(chunks, axis=0)


# Method-agnostic wrapper used by the harness


@dataclass
class FeatureReducer:
    method: str
    model: object

    @property
    def output_dim(self) -> int:
        return self.model.output_dim

    def transform(self, samples) -> np.ndarray:
        if self.method == "pca":
            return pca_transform(self.model, samples).astype(np.float32)
        return cae_encode(self.model, samples)

    def transform_cube(self, data: np.ndarray) -> np.ndarray:
        height, width, bands = data.shape
        return self.transform(data.reshape(-1, bands)).reshape(height, width, self.output_dim)


def fit_reducer(method: str, train, dim: Optional[int] = None, epochs: Optional[int] = None,
                lr: float = 1e-4, seed: int = 0) -> FeatureReducer:
    logger.info(TEXT_REDUCING.format(method=method, dim=dim or CAE_DEFAULT_LATENT.get(method, 30)))
    if method == "pca":
        return FeatureReducer("pca", pca_fit(train, 30 if dim is None else dim))
    return FeatureReducer(method, cae_fit(train, method, epochs=epochs, lr=lr, latent_dim=dim, seed=seed))


def save_reducer(path, reducer: FeatureReducer) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": FORMAT_VERSION, "method": reducer.method, "output_dim": reducer.output_dim}
    if reducer.method == "pca":
        model = reducer.model
        with open(path, "wb") as f:
            np.savez(
                f,
                header=np.array(json.dumps(header)),
                mean=model.mean,
                components=model.components,
                explained_variance=model.explained_variance,
            )
    else:
        model = reducer.model
        header.update({"input_shape": list(model.input_shape), "seed": model.seed, "loss_history": model.loss_history})
        torch.save({"header": header, "state_dict": model.network.state_dict()}, path)
    return path


def load_reducer(path) -> FeatureReducer:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"missing reducer file {path}")
    with open(path, "rb") as f:
        payload = f.read()
    # torch checkpoints are zip archives too; only the PCA archive carries a top-level header array
    archive = np.load(io.BytesIO(payload)) if payload[:2] == b"PK" else None
    if archive is not None and "header" in archive.files:
        header = json.loads(str(archive["header"]))
        _check_version(header, path)
        model = PcaModel(archive["mean"], archive["components"], archive["explained_variance"])
        return FeatureReducer("pca", model)
    checkpoint = torch.load(io.BytesIO(payload), map_location="cpu")
    header = checkpoint["header"]
    _check_version(header, path)
    input_shape = tuple(header["input_shape"])
    network = SpectralAutoencoder(header["method"], input_shape[-1], header["output_dim"])
    network.load_state_dict(checkpoint["state_dict"])
    network.eval()
    model = CaeModel(network, header["method"], header["output_dim"], input_shape, header["loss_history"], header["seed"])
    return FeatureReducer(header["method"], model)


def _check_version(header: dict, path: Path):
    if header.get("format_version") != FORMAT_VERSION:
        raise LoadError(f"{path} has format version {header.get('format_version')}, expected {FORMAT_VERSION}")
