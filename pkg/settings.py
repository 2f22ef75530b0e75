"""
Flat key=value config files for the command-line toolkit.

One `key = value` per line, `#` comments and blank lines ignored. Keys are
TrainingConfig field names; `--set key=value` overrides win over the file.
"""
import logging
import os
import threading
from dataclasses import fields
from typing import Any, Dict, Iterable, Optional

from dotenv import load_dotenv

from config import config
from training import TrainingConfig

_TRUE = ('1', 'true', 'yes', 'on')
_FALSE = ('0', 'false', 'no', 'off')


def load_environment(env_file: Optional[str] = None) -> None:
    """Load an optional .env file (STAGEHIDE_DEVICE, STAGEHIDE_LOG_LEVEL)."""
    path = env_file or config.ENV_FILE
    if os.path.exists(path):
        load_dotenv(path)
        logging.debug(f"Loaded environment from {path}")


def parse_assignment(line: str) -> Optional[tuple]:
    """Split one `key = value` line; returns None for blanks and comments.

    Raises:
        ValueError: If a non-comment line has no '='.
    """
    text = line.split('#', 1)[0].strip()
    if not text:
        return None
    if '=' not in text:
        raise ValueError(f"Expected key=value, got {line.strip()!r}")
    key, value = text.split('=', 1)
    key = key.strip()
    if not key:
        raise ValueError(f"Missing key in {line.strip()!r}")
    return key, value.strip()


class SettingsManager:
    """Reads, merges and writes training configs."""

    def __init__(self):
        self._lock = threading.Lock()
        self._types = {f.name: f.type for f in fields(TrainingConfig)}

    def load_file(self, path: str) -> Dict[str, str]:
        """Read raw key/value strings from a config file.

        Raises:
            FileNotFoundError: If the file is missing.
            ValueError: On a malformed line.
        """
        if not os.path.exists(path):
            raise FileNotFoundError(f"Config file not found: {path}")
        values = {}
        with open(path, 'r', encoding='utf-8') as f:
            for number, line in enumerate(f, start=1):
                try:
                    pair = parse_assignment(line)
                except ValueError as e:
                    raise ValueError(f"{path}:{number}: {e}") from None
                if pair:
                    values[pair[0]] = pair[1]
        logging.info(f"Loaded {len(values)} settings from {path}")
        return values

    def parse_overrides(self, overrides: Iterable[str]) -> Dict[str, str]:
        """Parse repeated `key=value` override strings; later ones win."""
        values = {}
        for item in overrides or ():
            pair = parse_assignment(item)
            if pair is None:
                raise ValueError(f"Empty override {item!r}")
            values[pair[0]] = pair[1]
        return values

    def coerce(self, key: str, raw: str) -> Any:
        """Convert a raw string to the TrainingConfig field type.

        Raises:
            ValueError: For unknown keys or unparsable values.
        """
        if key not in self._types:
            raise ValueError(f"Unknown config key {key!r}. Valid keys: {sorted(self._types)}")
        kind = self._types[key]
        try:
            if kind is bool:
                lowered = raw.lower()
                if lowered in _TRUE:
                    return True
                if lowered in _FALSE:
                    return False
                raise ValueError(f"not a boolean: {raw!r}")
            if kind is int:
                return int(raw)
            if kind is float:
                return float(raw)
            if kind is str:
                return raw
            # Tuple[float, ...]
            return tuple(float(part) for part in raw.split(',') if part.strip())
        except ValueError as e:
            raise ValueError(f"Bad value for {key}: {e}") from None

    def resolve(self, path: Optional[str] = None, overrides: Iterable[str] = ()) -> TrainingConfig:
        """Environment, then file values, then overrides, coerced into a validated TrainingConfig."""
        raw = {}
        if os.getenv('STAGEHIDE_DEVICE'):
            raw['device'] = os.environ['STAGEHIDE_DEVICE']
        if path:
            raw.update(self.load_file(path))
        raw.update(self.parse_overrides(overrides))
        values = {key: self.coerce(key, value) for key, value in raw.items()}
        cfg = TrainingConfig(**values)
        cfg.validate()
        return cfg

    def to_text(self, cfg: TrainingConfig) -> str:
        lines = []
        for name, value in cfg.to_dict().items():
            if isinstance(value, (tuple, list)):
                value = ",".join(repr(float(v)) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{name} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, cfg: TrainingConfig, path: str) -> None:
        """Write a config file that `resolve` reads back to an equal config."""
        with self._lock:
            try:
                with open(path, 'w', encoding='utf-8') as f:
                    f.write(self.to_text(cfg))
                logging.info(f"Config saved to {path}")
            except Exception as e:
                logging.error(f"Failed to save config {path}: {e}")
                raise


# Global settings manager instance
settings_manager = SettingsManager()
