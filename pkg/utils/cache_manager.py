import hashlib
import json
from pathlib import Path

import numpy as np

from utils.settings import get_settings


def make_cache_key(**parts) -> str:
    return json.dumps(parts, sort_keys=True, default=str)


def get_cache_path(key, cache_dir=None) -> Path:
    h = hashlib.sha256(key.encode()).hexdigest()
    return Path(cache_dir or get_settings().cache_dir) / f"{h}.npz"


def cache_exists(key, cache_dir=None) -> bool:
    return get_cache_path(key, cache_dir).exists()


def save_to_cache(key, arrays: dict, cache_dir=None) -> Path:
    path = get_cache_path(key, cache_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump({"key": key, "arrays": sorted(arrays)}, f)
    return path


def load_from_cache(key, cache_dir=None):
    path = get_cache_path(key, cache_dir)
    if not path.exists():
        return None
    with np.load(path) as archive:
        return {name: archive[name] for name in archive.files}
