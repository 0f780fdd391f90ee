"""Run configuration: defaults, JSON config files, and flag overrides.

Config files are JSON with ${VAR} environment interpolation so secrets
stay out of the file; command-line flags override file values, which
override the built-in defaults.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from sgscore.judge import JudgeBackendConfig

DEFAULT_ALPHA = 0.5
DEFAULT_GAMMA = 0.0
DEFAULT_LAMBDA0 = 0.5
DEFAULT_LAMBDA1 = 0.5
DEFAULT_MAX_ITERATIONS = 1
DEFAULT_SEED = 0
DEFAULT_CONCURRENCY = 1


class ConfigError(ValueError):
    """Raised for malformed config files or out-of-domain values."""


_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _interpolate(value: Any) -> Any:
    if isinstance(value, str):
        def repl(match: re.Match) -> str:
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"config references unset environment variable {name}")
            return os.environ[name]

        return _ENV_RE.sub(repl, value)
    if isinstance(value, list):
        return [_interpolate(item) for item in value]
    if isinstance(value, dict):
        return {key: _interpolate(item) for key, item in value.items()}
    return value


def load_config_file(path: Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return _interpolate(doc)


@dataclass(frozen=True)
class GenerationConfig:
    """Connection settings for the image generation endpoint."""

    base_url: str
    timeout: float = 300.0
    max_retries: int = 3

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ConfigError(f"generation timeout must be > 0, got {self.timeout}")
        if self.max_retries < 0:
            raise ConfigError(
                f"generation max_retries must be >= 0, got {self.max_retries}"
            )


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs: weights, seeds, backends, and paths."""

    alpha: float = DEFAULT_ALPHA
    gamma: float = DEFAULT_GAMMA
    lambda0: float = DEFAULT_LAMBDA0
    lambda1: float = DEFAULT_LAMBDA1
    seed: int = DEFAULT_SEED
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    concurrency: int = DEFAULT_CONCURRENCY
    judge: Optional[JudgeBackendConfig] = None
    generation: Optional[GenerationConfig] = None
    composer: Optional[JudgeBackendConfig] = None
    dataset: Optional[str] = None
    images_dir: Optional[str] = None
    output_dir: str = "runs/default"
    vocab: tuple[str, ...] = ()
    cache_path: Optional[str] = None
    image_size: tuple[int, int] = (512, 512)

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        for name, value in (("lambda0", self.lambda0), ("lambda1", self.lambda1)):
            if value < 0:
                raise ConfigError(f"{name} must be >= 0, got {value}")
        if self.max_iterations < 0:
            raise ConfigError(
                f"max_iterations must be >= 0, got {self.max_iterations}"
            )
        if self.concurrency < 1:
            raise ConfigError(f"concurrency must be >= 1, got {self.concurrency}")


_SCALAR_KEYS = (
    "alpha",
    "gamma",
    "lambda0",
    "lambda1",
    "seed",
    "max_iterations",
    "concurrency",
    "dataset",
    "images_dir",
    "output_dir",
    "cache_path",
)


def _backend_config(doc: Mapping, which: str) -> JudgeBackendConfig:
    try:
        return JudgeBackendConfig(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {which} backend config: {exc}") from exc


def build_run_config(
    file_values: Optional[Mapping] = None,
    overrides: Optional[Mapping] = None,
) -> RunConfig:
    """Merge defaults, config-file values, and flag overrides in order."""
    merged: dict[str, Any] = {}
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    known = {f.name for f in fields(RunConfig)}
    for key in file_values:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")

    for key in _SCALAR_KEYS:
        if key in overrides:
            merged[key] = overrides[key]
        elif key in file_values:
            merged[key] = file_values[key]

    if "vocab" in overrides:
        merged["vocab"] = tuple(overrides["vocab"])
    elif "vocab" in file_values:
        merged["vocab"] = tuple(file_values["vocab"])

    if "image_size" in file_values:
        size = file_values["image_size"]
        if not (isinstance(size, (list, tuple)) and len(size) == 2):
            raise ConfigError(f"image_size must be [width, height], got {size!r}")
        merged["image_size"] = (int(size[0]), int(size[1]))

    for which in ("judge", "composer"):
        if which in file_values and file_values[which] is not None:
            doc = file_values[which]
            if not isinstance(doc, Mapping):
                raise ConfigError(f"{which} config must be an object")
            merged[which] = _backend_config(doc, which)
    if "generation" in file_values and file_values["generation"] is not None:
        doc = file_values["generation"]
        if not isinstance(doc, Mapping):
            raise ConfigError("generation config must be an object")
        try:
            merged["generation"] = GenerationConfig(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad generation config: {exc}") from exc

    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
