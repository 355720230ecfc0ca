"""Atomic file output shared by checkpoints, datasets and reports."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path


def atomic_write(path, payload: bytes | str) -> None:
    """Write to a temporary sibling, fsync, then rename over ``path``."""
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
