"""
Base settings for triflow plus the flat ``key=value`` run configuration files.
"""

from collections.abc import Iterable
from pathlib import Path
from typing import Any

from pydantic import BaseModel, DirectoryPath, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from rich import print as rprint

from .errors import ConfigError
from .models import TrainConfig


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="TRIFLOW_",
        env_file=(Path.home() / ".triflow" / ".env"),
        extra="ignore",
    )
    home: DirectoryPath = Path.home() / ".triflow"
    threads: int = Field(1, ge=1)

    @field_validator("home", mode="before")
    def home_must_exist(cls, path: Path | str) -> Path:
        path = Path(path).expanduser()
        path.mkdir(parents=True, exist_ok=True)
        return path

    @property
    def data_dir(self) -> Path:
        return self.home / "data"

    @property
    def runs_dir(self) -> Path:
        return self.home / "runs"


try:
    settings = Settings()
except ValidationError as e:
    rprint("validation error: ", e)
    # keep imports working with a broken environment
    settings = Settings(threads=1)


def parse_assignment(line: str) -> tuple[str, str]:
    key, sep, value = line.partition("=")
    key, value = key.strip(), value.strip()
    if not sep or not key:
        raise ConfigError(f"expected key=value, got {line.strip()!r}")
    return key, value


def _nest(pairs: Iterable[tuple[str, str]]) -> dict[str, Any]:
    tree: dict[str, Any] = {}
    for key, value in pairs:
        *sections, leaf = key.split(".")
        node = tree
        for section in sections:
            child = node.setdefault(section, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{key!r} conflicts with scalar key {section!r}")
            node = child
        if isinstance(node.get(leaf), dict):
            raise ConfigError(f"{key!r} names a section, not a value")
        node[leaf] = value
    return tree


def read_config_file(path: Path) -> list[tuple[str, str]]:
    pairs = []
    for number, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            pairs.append(parse_assignment(line))
        except ConfigError as e:
            raise ConfigError(f"{path}:{number}: {e}") from None
    return pairs


def load_config(
    path: Path | None = None, overrides: Iterable[str] = (), seed: int | None = None
) -> TrainConfig:
    """Build a TrainConfig from an optional file, then ``--set`` overrides, then ``--seed``."""
    pairs = read_config_file(path) if path is not None else []
    pairs += [parse_assignment(item) for item in overrides]
    if seed is not None:
        pairs.append(("seed", str(seed)))
    try:
        return TrainConfig.model_validate(_nest(pairs))
    except ValidationError as e:
        error = e.errors()[0]
        location = ".".join(str(part) for part in error["loc"])
        raise ConfigError(f"{location}: {error['msg']}") from None


def _flatten(model: BaseModel, prefix: str = "") -> list[tuple[str, str]]:
    items = []
    for name in type(model).model_fields:
        value = getattr(model, name)
        if isinstance(value, BaseModel):
            items += _flatten(value, f"{prefix}{name}.")
        elif isinstance(value, bool):
            items.append((f"{prefix}{name}", "true" if value else "false"))
        else:
            items.append((f"{prefix}{name}", repr(value) if isinstance(value, float) else str(value)))
    return items


def dump_config(config: TrainConfig) -> str:
    return "".join(f"{key}={value}\n" for key, value in sorted(_flatten(config)))


def parse_config_text(text: str) -> TrainConfig:
    pairs = [parse_assignment(line) for line in text.splitlines() if line.strip()]
    return TrainConfig.model_validate(_nest(pairs))
