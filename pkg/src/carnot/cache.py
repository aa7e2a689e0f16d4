"""A small JSON file cache with locked read-modify-write."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

from filelock import FileLock

ENV_VAR = "CARNOT_CACHE_DIR"


def default_cache_dir() -> Path:
    return Path(os.environ.get(ENV_VAR) or Path.home() / ".cache" / "carnot")


class JsonStore:
    """Values stored one file per key under ``root``.

    Writes go through a temporary file and ``os.replace`` while holding a
    per-key lock, so concurrent writers never leave a torn record.
    """

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else default_cache_dir()
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.root / (hashlib.sha256(key.encode()).hexdigest()[:24] + ".json")

    def get(self, key: str):
        path = self._path(key)
        if not path.exists():
            return None
        with FileLock(str(path) + ".lock"):
            try:
                rec = json.loads(path.read_text())
            except (OSError, ValueError):
                return None
        return rec["value"] if rec.get("key") == key else None

    def put(self, key: str, value) -> None:
        path = self._path(key)
        with FileLock(str(path) + ".lock"):
            fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
            with os.fdopen(fd, "w") as fh:
                json.dump({"key": key, "value": value}, fh, sort_keys=True)
            os.replace(tmp, path)
