import os
from functools import lru_cache
from pathlib import Path
from typing import Optional

from pydantic import BaseSettings


class Settings(BaseSettings):
    debug: bool = False
    app_name: str = "seqgsn"
    log_level: str = "INFO"

    data_dir: Path = Path("data")
    mnist_dir: Optional[Path] = None
    mocap_csv: Optional[Path] = None

    checkpoint_every: int = 10
    videos_per_epoch: int = 100
    test_videos: int = 10

    class Config:
        env_prefix = "seqgsn_"
        env_file = os.environ.get("SEQGSN_ENV_FILE", ".env")


@lru_cache()
def get_settings() -> Settings:
    return Settings()
