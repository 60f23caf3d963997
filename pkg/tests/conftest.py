import numpy as np
import pytest

from hsi_data import GroundTruth, HsiCube, clear_dataset_cache, write_dataset
from utils.settings import get_settings


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    monkeypatch.setenv("CEUNET_OUT_DIR", str(tmp_path / "results"))
    monkeypatch.setenv("CEUNET_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.setenv("CEUNET_LOG_LEVEL", "WARNING")
    monkeypatch.setenv("CEUNET_DEVICE", "cpu")
    monkeypatch.setenv("CEUNET_NUM_THREADS", "1")
    monkeypatch.setenv("CEUNET_USE_CACHE", "false")
    get_settings.cache_clear()
    clear_dataset_cache()
    yield
    get_settings.cache_clear()
    clear_dataset_cache()


def make_blobs(n_per_class: int, num_classes: int, dim: int, spread: float = 0.05, seed: int = 0):
    """Well separated Gaussian blobs, one per class, labels 1..num_classes"""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(num_classes, dim))
    centers[:, 0] = np.linspace(0.0, 1.0, num_classes)
    samples = np.concatenate([c + spread * rng.standard_normal((n_per_class, dim)) for c in centers])
    labels = np.repeat(np.arange(1, num_classes + 1), n_per_class)
    return samples.astype(np.float32), labels.astype(np.int64)


def make_scene(height: int = 16, width: int = 16, bands: int = 12, num_classes: int = 3, seed: int = 0,
               name: str = "synthetic"):
    """Vertical class stripes with class-specific spectra and a background border"""
    rng = np.random.default_rng(seed)
    signatures = rng.uniform(0.0, 100.0, size=(num_classes, bands))
    labels = np.zeros((height, width), dtype=np.int64)
    stripe = max(1, (width - 2) // num_classes)
    for c in range(num_classes):
        labels[1 : height - 1, 1 + c * stripe : 1 + (c + 1) * stripe] = c + 1
    data = rng.normal(50.0, 5.0, size=(height, width, bands))
    for c in range(num_classes):
        mask = labels == c + 1
        data[mask] = signatures[c] + rng.normal(0.0, 1.0, size=(int(mask.sum()), bands))
    return HsiCube(data=data.astype(np.float32), name=name), GroundTruth(labels=labels, num_classes=num_classes)


@pytest.fixture
def scene():
    return make_scene()


@pytest.fixture
def scene_dir(tmp_path, scene):
    cube, gt = scene
    return write_dataset(tmp_path / "synthetic", cube, gt)
