"""
Resumable bank-training checkpoints and atomic artifact writes.

A bank is p = m' x q networks, and threshold tuning trains several more, so
every finished ED is checkpointed and an interrupted `train` continues with
the pairs still missing.

Usage:
    from checkpoint import CheckpointManager, BankCheckpoint

    manager = CheckpointManager("runs/default/checkpoints")
    checkpoint = manager.load("nh90_lo50", BankCheckpoint) or BankCheckpoint(fingerprint=digest)

    # ... train pairs, storing each finished model in checkpoint.completed ...

    manager.save("nh90_lo50", checkpoint)
"""

import os
import pickle
import tempfile
from pathlib import Path
from datetime import datetime
from dataclasses import dataclass, field
from typing import TypeVar, Type

T = TypeVar('T')


# ============ Atomic Writes ============

def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write to a temp file next to `path`, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode('utf-8'))


# ============ Checkpoint Definitions ============

@dataclass
class BaseCheckpoint:
    """Wall-clock bookkeeping shared by training checkpoints."""
    started_at: datetime | None = None
    last_saved_at: datetime | None = None

    def mark_started(self) -> None:
        # kept across resumes, so the runtime covers every session
        if self.started_at is None:
            self.started_at = datetime.now()


@dataclass
class BankCheckpoint(BaseCheckpoint):
    """EDs of one bank finished so far, keyed by (channel, scale) pair."""
    fingerprint: str = ""
    completed: dict[tuple[int, int], object] = field(default_factory=dict)  # pair -> EDModel

    def matches(self, fingerprint: str) -> bool:
        return self.fingerprint == fingerprint

    def get_pending(self, pairs: list[tuple[int, int]]) -> list[tuple[int, int]]:
        return [pair for pair in pairs if pair not in self.completed]

    def summary(self) -> str:
        return f"Trained: {len(self.completed)} networks"


# ============ Checkpoint Manager ============

class CheckpointManager:
    """
    Pickled checkpoints under one directory, one `<name>.pkl` per bank.

    Saves stamp `last_saved_at` when the object has one and go through
    atomic_write_bytes, so a kill mid-save keeps the previous checkpoint.
    """

    def __init__(self, directory: str | Path = "checkpoints"):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, name: str) -> Path:
        return self.directory / f"{name}.pkl"

    def save(self, name: str, data) -> None:
        if hasattr(data, 'last_saved_at'):
            data.last_saved_at = datetime.now()
        atomic_write_bytes(self._path(name), pickle.dumps(data, protocol=pickle.HIGHEST_PROTOCOL))

    def load(self, name: str, expected_type: Type[T] | None = None) -> T | None:
        """
        Returns:
            The stored object, or None when there is no checkpoint called `name`

        Raises:
            TypeError: the stored object is not an `expected_type`
        """
        path = self._path(name)
        if not path.exists():
            return None
        data = pickle.loads(path.read_bytes())
        if expected_type is not None and not isinstance(data, expected_type):
            raise TypeError(
                f"Checkpoint '{name}' holds a {type(data).__name__}, expected {expected_type.__name__}"
            )
        return data

    def delete(self, name: str) -> bool:
        """Remove a checkpoint; False when there was none."""
        path = self._path(name)
        if not path.exists():
            return False
        path.unlink()
        return True
