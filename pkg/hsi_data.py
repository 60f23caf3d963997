import json
import logging
from dataclasses import dataclass
from pathlib import Path

import cachetools
import numpy as np
from pydantic import BaseModel, Field

from utils.errors import DataError, EmptyDatasetError, IntegrityError, LoadError, SplitError
from utils.messages import TEXT_LOADING

logger = logging.getLogger(__name__)

HEADER_FILE = "header"
CUBE_FILE = "cube.bin"
LABELS_FILE = "labels.bin"

CUBE_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u2")

# Reference rows of the five benchmark scenes
KNOWN_DATASETS = {
    "indian_pines": {"sensor": "AVIRIS", "bands": 200, "classes": 16, "pixels": 21025, "labeled": 10249},
    "salinas": {"sensor": "AVIRIS", "bands": 204, "classes": 16, "pixels": 111104, "labeled": 54129},
    "pavia_university": {"sensor": "ROSIS", "bands": 103, "classes": 9, "pixels": 207400, "labeled": 42776},
    "ksc": {"sensor": "AVIRIS", "bands": 176, "classes": 13, "pixels": 314368, "labeled": 5211},
    "botswana": {"sensor": "NASA EO-1", "bands": 145, "classes": 14, "pixels": 377856, "labeled": 3248},
}

_dataset_cache = cachetools.LRUCache(maxsize=4)


@dataclass(frozen=True)
class HsiCube:
    data: np.ndarray
    name: str = "unnamed"

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class GroundTruth:
    labels: np.ndarray
    num_classes: int

    @property
    def shape(self) -> tuple:
        return self.labels.shape


@dataclass(frozen=True)
class LabeledPixelSet:
    samples: np.ndarray
    labels: np.ndarray
    coords: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_features(self) -> int:
        return self.samples.shape[1]

    @property
    def spectra(self) -> np.ndarray:
        return self.samples

    def subset(self, indices) -> "LabeledPixelSet":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledPixelSet(self.samples[indices], self.labels[indices], self.coords[indices])

    def with_samples(self, samples: np.ndarray) -> "LabeledPixelSet":
        return LabeledPixelSet(samples, self.labels, self.coords)


class SplitSpec(BaseModel):
    test_fraction: float = Field(default=0.25, gt=0.0, lt=1.0)
    num_trials: int = Field(default=5, ge=1)
    seed: int = Field(default=0, ge=0)


def _read_header(path: Path) -> dict:
    header_path = path / HEADER_FILE
    if not header_path.exists():
        raise LoadError(f"missing header file {header_path}")
    try:
        with open(header_path, "r", encoding="utf-8") as f:
            header = json.load(f)
    except json.JSONDecodeError as e:
        raise LoadError(f"header {header_path} is not valid JSON: {e}") from e
    missing = [key for key in ("name", "H", "W", "B", "m") if key not in header]
    if missing:
        raise LoadError(f"header {header_path} lacks fields {missing}")
    if header.get("endianness", "little") != "little":
        raise LoadError(f"only little-endian data is supported, header says {header['endianness']}")
    return header


def _read_array(path: Path, dtype: np.dtype, shape: tuple) -> np.ndarray:
    if not path.exists():
        raise LoadError(f"missing data file {path}")
    raw = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if raw.size != expected:
        raise IntegrityError(f"{path.name} holds {raw.size} values, header implies {shape} = {expected}")
    return raw.reshape(shape)


def normalize_bands(data: np.ndarray) -> np.ndarray:
    """Per-band min-max scaling to [0, 1]; constant bands map to 0"""
    data = data.astype(np.float32, copy=True)
    low = data.min(axis=(0, 1), keepdims=True)
    span = data.max(axis=(0, 1), keepdims=True) - low
    span[span == 0] = 1.0
    return (data - low) / span


def dataset_fingerprint(path) -> dict:
    """Header text plus size and mtime of the data files; changes whenever the dataset is rewritten"""
    path = Path(path)
    fingerprint = {"path": str(path.resolve())}
    for name in (HEADER_FILE, CUBE_FILE, LABELS_FILE):
        file = path / name
        if file.exists():
            stat = file.stat()
            fingerprint[name] = [stat.st_size, stat.st_mtime_ns]
        else:
            fingerprint[name] = None
    header = path / HEADER_FILE
    fingerprint["header_text"] = header.read_text(encoding="utf-8") if header.exists() else None
    return fingerprint


def load_dataset(path, normalize: bool = True) -> tuple:
    path = Path(path)
    cache_key = (json.dumps(dataset_fingerprint(path), sort_keys=True), normalize)
    if cache_key in _dataset_cache:
        return _dataset_cache[cache_key]

    logger.info(TEXT_LOADING.format(path=path))
    header = _read_header(path)
    height, width, bands = int(header["H"]), int(header["W"]), int(header["B"])
    if min(height, width, bands) < 1:
        raise IntegrityError(f"header dimensions must be positive, got H={height} W={width} B={bands}")

    data = _read_array(path / CUBE_FILE, CUBE_DTYPE, (height, width, bands))
    labels = _read_array(path / LABELS_FILE, LABEL_DTYPE, (height, width))

    if not np.all(np.isfinite(data)):
        raise DataError(f"cube {path} contains NaN or Inf values")

    num_classes = int(header["m"])
    if labels.max() > num_classes:
        raise IntegrityError(f"labels reach {labels.max()} but header declares m={num_classes}")

    # Reduced or patched outputs are written already scaled
    if normalize and not header.get("normalized", False):
        data = normalize_bands(data)

    result = (
        HsiCube(data=np.ascontiguousarray(data, dtype=np.float32), name=str(header["name"])),
        GroundTruth(labels=labels.astype(np.int64), num_classes=num_classes),
    )
    _dataset_cache[cache_key] = result
    return result


def write_dataset(path, cube: HsiCube, gt: GroundTruth, extra_header: dict = None) -> Path:
    if cube.data.shape[:2] != gt.labels.shape:
        raise IntegrityError(f"cube grid {cube.data.shape[:2]} does not match labels {gt.labels.shape}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "name": cube.name,
        "H": cube.height,
        "W": cube.width,
        "B": cube.bands,
        "m": gt.num_classes,
        "dtype": "float32",
        "label_dtype": "uint16",
        "endianness": "little",
        "interleave": "bip",
    }
    header.update(extra_header or {})
    with open(path / HEADER_FILE, "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2)
    cube.data.astype(CUBE_DTYPE).tofile(path / CUBE_FILE)
    gt.labels.astype(LABEL_DTYPE).tofile(path / LABELS_FILE)
    return path


def clear_dataset_cache():
    _dataset_cache.clear()


def dataset_summary(cube: HsiCube, gt: GroundTruth) -> dict:
    pixels = int(gt.labels.size)
    labeled = int(np.count_nonzero(gt.labels))
    counts = np.bincount(gt.labels.ravel(), minlength=gt.num_classes + 1)
    return {
        "name": cube.name,
        "bands": cube.bands,
        "classes": gt.num_classes,
        "pixels": pixels,
        "labeled": labeled,
        "labeled_fraction": labeled / pixels,
        "class_counts": {int(c): int(counts[c]) for c in range(1, gt.num_classes + 1)},
        "reference": KNOWN_DATASETS.get(cube.name.lower().replace(" ", "_")),
    }


def remove_background(cube: HsiCube, gt: GroundTruth) -> LabeledPixelSet:
    if cube.data.shape[:2] != gt.labels.shape:
        raise IntegrityError(f"cube grid {cube.data.shape[:2]} does not match labels {gt.labels.shape}")
    rows, cols = np.nonzero(gt.labels)
    if rows.size == 0:
        raise EmptyDatasetError(f"{cube.name} has no labeled pixels")
    coords = np.stack([rows, cols], axis=1)
    return LabeledPixelSet(
        samples=cube.data[rows, cols],
        labels=gt.labels[rows, cols].astype(np.int64),
        coords=coords,
    )


def holdout_size(n: int, fraction: float) -> int:
    # Round half up: round(0.25 * 10249) = 2562
    return int(np.floor(fraction * n + 0.5))


def split_indices(n: int, spec: SplitSpec, trial_index: int) -> tuple:
    if n < 2:
        raise SplitError(f"cannot split {n} samples into train and test")
    if not 0 <= trial_index < spec.num_trials:
        raise SplitError(f"trial index {trial_index} outside 0..{spec.num_trials - 1}")
    n_test = min(max(holdout_size(n, spec.test_fraction), 1), n - 1)
    rng = np.random.default_rng([spec.seed, trial_index])
    order = rng.permutation(n)
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def random_split(ds, spec: SplitSpec, trial_index: int) -> tuple:
    train_idx, test_idx = split_indices(len(ds), spec, trial_index)
    return ds.subset(train_idx), ds.subset(test_idx)
