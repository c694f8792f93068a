"""Run configuration persisted as JSON."""

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "BDRRN_LOG_LEVEL"


@dataclass
class RunConfig:
    """Model and training settings for one training invocation."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    qp: int | None = None

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "qp": self.qp,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        """Create RunConfig from dictionary."""
        if not isinstance(data, dict):
            raise ConfigError(f"run config must be a JSON object, got {type(data).__name__}")
        qp = data.get("qp")
        return cls(
            model=ModelConfig.from_dict(data.get("model", {})),
            train=TrainConfig.from_dict(data.get("train", {})),
            qp=int(qp) if qp is not None else None,
        )


def load_run_config(path: str | Path) -> RunConfig:
    """Load a run configuration.

    Returns:
        The parsed configuration; defaults when the file does not exist.

    Raises:
        ConfigError: The file exists but is not valid JSON or has bad values.
    """
    path = Path(path)
    if not path.exists():
        logger.warning("config %s not found, using defaults", path)
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return RunConfig.from_dict(data)


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    """Save a run configuration atomically.

    Uses write-to-temp-then-rename for atomic writes.
    """
    path = Path(path)
    fd, temp_path = tempfile.mkstemp(dir=path.parent, prefix="run_", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(cfg.to_dict(), f, indent=2)
        os.replace(temp_path, path)
    except OSError:
        logger.error("failed to save run config", exc_info=True)
        try:
            os.unlink(temp_path)
        except OSError:
            pass
        raise
