import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, Field

from hsi_data import CUBE_DTYPE, HEADER_FILE, LABEL_DTYPE, LABELS_FILE, GroundTruth, HsiCube
from utils.errors import BoundaryError, EmptyDatasetError, IntegrityError, LoadError, SpecError
from utils.messages import TEXT_PATCHING

logger = logging.getLogger(__name__)

PATCHES_FILE = "patches.bin"
COORDS_FILE = "coords.bin"
COORD_DTYPE = np.dtype("<i4")


class PatchConfig(BaseModel):
    n: int = Field(default=10, ge=1)
    mode: Literal["exclusive", "majority", "cpc"] = "cpc"
    pad_policy: Literal["zero", "none"] = "zero"


@dataclass(frozen=True)
class PatchDataset:
    patches: np.ndarray
    labels: np.ndarray
    coords: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]

    @property
    def num_features(self) -> int:
        return self.patches.shape[3]

    @property
    def samples(self) -> np.ndarray:
        return self.patches

    @property
    def center_spectra(self) -> np.ndarray:
        c = self.patch_size // 2
        return self.patches[:, c, c, :]

    @property
    def spectra(self) -> np.ndarray:
        return self.center_spectra

    def subset(self, indices) -> "PatchDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return PatchDataset(self.patches[indices], self.labels[indices], self.coords[indices])

    def with_samples(self, patches: np.ndarray) -> "PatchDataset":
        return PatchDataset(patches, self.labels, self.coords)


def _cube_array(cube) -> np.ndarray:
    return cube.data if isinstance(cube, HsiCube) else np.asarray(cube)


def _check_mode(cfg: PatchConfig, expected: str):
    if cfg.mode != expected:
        raise SpecError(f"patch config mode is {cfg.mode}, operation needs {expected}")


def _check_grid(data: np.ndarray, gt: GroundTruth):
    if data.ndim != 3 or data.shape[:2] != gt.labels.shape:
        raise IntegrityError(f"cube shape {data.shape} does not match labels {gt.labels.shape}")


def extract_cpc(cube, gt: GroundTruth, cfg: PatchConfig) -> PatchDataset:
    """One n x n patch per labeled pixel, centered at offset (n//2, n//2)"""
    _check_mode(cfg, "cpc")
    data = _cube_array(cube)
    _check_grid(data, gt)
    n = cfg.n
    before = n // 2
    after = n - 1 - before

    rows, cols = np.nonzero(gt.labels)
    if rows.size == 0:
        raise EmptyDatasetError("ground truth has no labeled pixels")

    height, width = gt.labels.shape
    if cfg.pad_policy == "none":
        near_border = (rows < before) | (cols < before) | (rows > height - 1 - before) | (cols > width - 1 - before)
        if np.any(near_border):
            r, c = rows[near_border][0], cols[near_border][0]
            raise BoundaryError(
                f"{int(near_border.sum())} labeled pixels lie closer than {before} to the border, first at ({r}, {c})"
            )

    padded = np.pad(data, ((before, after), (before, after), (0, 0)), mode="constant")
    # (H, W, d, n, n) view; window (r, c) starts at padded (r, c) = original (r - before, c - before)
    windows = sliding_window_view(padded, (n, n), axis=(0, 1))
    patches = np.ascontiguousarray(windows[rows, cols].transpose(0, 2, 3, 1))
    logger.debug("Extracted %d patches of %dx%dx%d", len(rows), n, n, data.shape[2])
    return PatchDataset(
        patches=patches,
        labels=gt.labels[rows, cols].astype(np.int64),
        coords=np.stack([rows, cols], axis=1),
    )


def _tile(data: np.ndarray, labels: np.ndarray, n: int) -> tuple:
    height, width, bands = data.shape
    bh, bw = height // n, width // n
    if bh == 0 or bw == 0:
        raise EmptyDatasetError(f"grid {height}x{width} holds no complete {n}x{n} block")
    block_data = data[: bh * n, : bw * n].reshape(bh, n, bw, n, bands)
    block_labels = labels[: bh * n, : bw * n].reshape(bh, n, bw, n).transpose(0, 2, 1, 3).reshape(bh, bw, n * n)
    means = block_data.mean(axis=(1, 3), dtype=np.float64).astype(data.dtype)
    return means, block_labels


def _downsampled(means: np.ndarray, block_label: np.ndarray, cube, gt: GroundTruth, mode: str) -> tuple:
    if not np.any(block_label):
        raise EmptyDatasetError(f"no block survives {mode} downsampling")
    name = cube.name if isinstance(cube, HsiCube) else "unnamed"
    return (
        HsiCube(data=means, name=f"{name}_{mode}"),
        GroundTruth(labels=block_label.astype(np.int64), num_classes=gt.num_classes),
    )


def downsample_exclusive(cube, gt: GroundTruth, cfg: PatchConfig) -> tuple:
    """Keep blocks whose n*n labels are one shared nonzero class"""
    _check_mode(cfg, "exclusive")
    data = _cube_array(cube)
    _check_grid(data, gt)
    means, block_labels = _tile(data, gt.labels, cfg.n)
    first = block_labels[..., 0]
    unanimous = np.all(block_labels == first[..., None], axis=-1) & (first > 0)
    return _downsampled(means, np.where(unanimous, first, 0), cube, gt, "exclusive")


def downsample_majority(cube, gt: GroundTruth, cfg: PatchConfig) -> tuple:
    """Label each block with its most frequent nonzero class, smallest id on ties"""
    _check_mode(cfg, "majority")
    data = _cube_array(cube)
    _check_grid(data, gt)
    means, block_labels = _tile(data, gt.labels, cfg.n)
    classes = np.arange(1, max(gt.num_classes, int(gt.labels.max())) + 1)
    counts = (block_labels[..., None] == classes).sum(axis=2)
    winner = classes[np.argmax(counts, axis=-1)]
    return _downsampled(means, np.where(counts.max(axis=-1) > 0, winner, 0), cube, gt, "majority")


def apply_patching(cube, gt: GroundTruth, cfg: PatchConfig):
    logger.info(TEXT_PATCHING.format(mode=cfg.mode, n=cfg.n))
    if cfg.mode == "cpc":
        return extract_cpc(cube, gt, cfg)
    if cfg.mode == "exclusive":
        return downsample_exclusive(cube, gt, cfg)
    return downsample_majority(cube, gt, cfg)


def save_patch_dataset(path, ds: PatchDataset, num_classes: int, name: str = "patches") -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "name": name,
        "N": len(ds),
        "n": ds.patch_size,
        "d": ds.num_features,
        "m": num_classes,
        "dtype": "float32",
        "label_dtype": "uint16",
        "coord_dtype": "int32",
        "endianness": "little",
    }
    with open(path / HEADER_FILE, "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2)
    ds.patches.astype(CUBE_DTYPE).tofile(path / PATCHES_FILE)
    ds.labels.astype(LABEL_DTYPE).tofile(path / LABELS_FILE)
    ds.coords.astype(COORD_DTYPE).tofile(path / COORDS_FILE)
    return path


def load_patch_dataset(path) -> tuple:
    path = Path(path)
    try:
        with open(path / HEADER_FILE, "r", encoding="utf-8") as f:
            header = json.load(f)
        count, n, d = int(header["N"]), int(header["n"]), int(header["d"])
        patches = np.fromfile(path / PATCHES_FILE, dtype=CUBE_DTYPE)
        labels = np.fromfile(path / LABELS_FILE, dtype=LABEL_DTYPE)
        coords = np.fromfile(path / COORDS_FILE, dtype=COORD_DTYPE)
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise LoadError(f"cannot read patch dataset {path}: {e}") from e
    if patches.size != count * n * n * d or labels.size != count or coords.size != 2 * count:
        raise IntegrityError(f"patch dataset {path} sizes disagree with its header")
    ds = PatchDataset(
        patches=patches.reshape(count, n, n, d),
        labels=labels.astype(np.int64),
        coords=coords.reshape(count, 2).astype(np.int64),
    )
    return ds, int(header["m"])
