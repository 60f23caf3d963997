import os
from functools import lru_cache
from pathlib import Path

import torch
from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator

load_dotenv()

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Settings(BaseModel):
    out_dir: Path = Path("results")
    cache_dir: Path = Path("cache")
    log_level: str = "INFO"
    device: str = "cpu"
    num_threads: int = Field(default=1, ge=1)
    use_cache: bool = True

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, value: str) -> str:
        value = value.upper()
        if value not in LOG_LEVELS:
            raise ValueError(f"❗ CEUNET_LOG_LEVEL must be one of {LOG_LEVELS}, got {value}")
        return value

    @field_validator("device")
    @classmethod
    def _available_device(cls, value: str) -> str:
        if value not in ("cpu", "cuda"):
            raise ValueError(f"❗ CEUNET_DEVICE must be cpu or cuda, got {value}")
        if value == "cuda" and not torch.cuda.is_available():
            raise ValueError("❗ CEUNET_DEVICE=cuda, but CUDA is not available on this machine")
        return value

    @property
    def progress_enabled(self) -> bool:
        return self.log_level in ("DEBUG", "INFO")


def settings_from_env() -> Settings:
    values = {
        "out_dir": os.getenv("CEUNET_OUT_DIR"),
        "cache_dir": os.getenv("CEUNET_CACHE_DIR"),
        "log_level": os.getenv("CEUNET_LOG_LEVEL"),
        "device": os.getenv("CEUNET_DEVICE"),
        "num_threads": os.getenv("CEUNET_NUM_THREADS"),
        "use_cache": os.getenv("CEUNET_USE_CACHE"),
    }
    return Settings(**{key: value for key, value in values.items() if value is not None})


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    settings = settings_from_env()
    torch.set_num_threads(settings.num_threads)
    return settings
