from __future__ import annotations

import json
import os
from functools import lru_cache
from pathlib import Path

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from app.errors import ConfigError
from app.models import TrainConfig


ROOT_DIR = Path(__file__).resolve().parent.parent
DATA_DIR = ROOT_DIR / "data"
CONFIG_DIR = DATA_DIR / "configs"
load_dotenv(ROOT_DIR / ".env")


class Settings(BaseModel):
    app_env: str = os.getenv("APP_ENV", "dev")

    runs_dir: str = os.getenv("CCL_RUNS_DIR", str(ROOT_DIR / "runs"))
    log_level: str = os.getenv("CCL_LOG_LEVEL", "INFO").upper()
    sweep_workers: int = int(os.getenv("CCL_SWEEP_WORKERS", "1"))
    mnist_dir: str = os.getenv("CCL_MNIST_DIR", str(DATA_DIR / "mnist"))

    @property
    def runs_path(self) -> Path:
        return Path(self.runs_dir)

    @property
    def mnist_images_path(self) -> Path:
        return self._first_existing(Path(self.mnist_dir), ["train-images-idx3-ubyte", "train-images-idx3-ubyte.gz"])

    @property
    def mnist_labels_path(self) -> Path:
        return self._first_existing(Path(self.mnist_dir), ["train-labels-idx1-ubyte", "train-labels-idx1-ubyte.gz"])

    @staticmethod
    def _first_existing(directory: Path, names: list[str]) -> Path:
        for name in names:
            candidate = directory / name
            if candidate.exists():
                return candidate
        return directory / names[0]


def load_train_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    config_path = Path(path)
    try:
        payload = json.loads(config_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"Config file not found: {config_path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file is not valid JSON: {config_path}", [f"line {exc.lineno}: {exc.msg}"]) from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"Config root must be a JSON object: {config_path}")
    return parse_train_config(payload, overrides)


def parse_train_config(payload: dict, overrides: dict | None = None) -> TrainConfig:
    merged = dict(payload)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    try:
        return TrainConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError("Invalid training config", field_errors(exc)) from exc


def field_errors(exc: ValidationError) -> list[str]:
    lines: list[str] = []
    for error in exc.errors():
        location = ".".join(str(part) for part in error.get("loc", ())) or "<root>"
        lines.append(f"{location}: {error.get('msg', 'invalid value')}")
    return lines


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()
