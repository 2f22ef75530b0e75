"""
Append-only store of experiment records, keyed by a hash of the run config.
"""
import hashlib
import json
import logging
import os
import threading
from dataclasses import asdict, dataclass
from datetime import datetime
from typing import Any, Dict, List, Optional

from config import config


def config_hash(values: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a config dict."""
    canonical = json.dumps(values, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


@dataclass
class StoredResult:
    """One experiment record as persisted."""
    key: str
    experiment: str
    label: str
    timestamp: str
    record: Dict[str, Any]

    @classmethod
    def create(cls, experiment: str, label: str, run_config: Dict[str, Any],
               record: Dict[str, Any]) -> 'StoredResult':
        return cls(key=config_hash(run_config), experiment=experiment, label=label,
                   timestamp=datetime.now().isoformat(), record=record)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'StoredResult':
        return cls(**data)


class ResultsStore:
    """JSON file of StoredResult entries; writes only ever append."""

    def __init__(self, results_file: Optional[str] = None):
        """Initialize the store.

        Args:
            results_file: Path to the JSON file. Uses config default if None.
        """
        self.results_file = results_file or config.RESULTS_FILE
        self._lock = threading.Lock()
        self._entries: List[StoredResult] = []
        self._load()

    def _load(self) -> None:
        with self._lock:
            try:
                if os.path.exists(self.results_file):
                    with open(self.results_file, 'r', encoding='utf-8') as f:
                        data = json.load(f)
                    self._entries = [StoredResult.from_dict(e) for e in data.get('entries', [])]
                    logging.info(f"Loaded {len(self._entries)} stored results")
            except Exception as e:
                logging.error(f"Failed to load results from {self.results_file}: {e}")
                raise

    def _save(self) -> None:
        directory = os.path.dirname(self.results_file)
        if directory:
            os.makedirs(directory, exist_ok=True)
        try:
            with open(self.results_file, 'w', encoding='utf-8') as f:
                json.dump({'entries': [e.to_dict() for e in self._entries]}, f, indent=2)
        except Exception as e:
            logging.error(f"Failed to save results: {e}")
            raise

    def append(self, entry: StoredResult) -> StoredResult:
        with self._lock:
            self._entries.append(entry)
            self._save()
        logging.info(f"Stored {entry.experiment} result {entry.label!r} ({entry.key[:8]}...)")
        return entry

    def entries(self, experiment: Optional[str] = None) -> List[StoredResult]:
        with self._lock:
            if experiment is None:
                return list(self._entries)
            return [e for e in self._entries if e.experiment == experiment]

    def latest(self, key: str) -> Optional[StoredResult]:
        """Newest entry for a config hash, or None."""
        with self._lock:
            for entry in reversed(self._entries):
                if entry.key == key:
                    return entry
        return None
