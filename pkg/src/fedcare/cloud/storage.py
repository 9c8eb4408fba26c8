"""Append-only on-disk event log plus snapshot for coordinator durability."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Callable, Iterator


class DurableLog:
    """JSONL event log with an optional snapshot file.

    Writers append events; on boot the snapshot (if any) is loaded first and
    the log tail replayed on top. ``compact`` persists a snapshot and truncates
    the log.
    """

    def __init__(self, data_dir: str | os.PathLike | None):
        self.dir = Path(data_dir) if data_dir is not None else None
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)

    @property
    def log_path(self) -> Path:
        return self.dir / "events.jsonl"

    @property
    def snapshot_path(self) -> Path:
        return self.dir / "snapshot.json"

    def append(self, event: dict) -> None:
        if self.dir is None:
            return
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def replay(self) -> Iterator[dict]:
        if self.dir is None or not self.log_path.exists():
            return
        with open(self.log_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield json.loads(line)

    def load_snapshot(self) -> dict | None:
        if self.dir is None or not self.snapshot_path.exists():
            return None
        return json.loads(self.snapshot_path.read_text(encoding="utf-8"))

    def compact(self, snapshot: dict) -> None:
        if self.dir is None:
            return
        tmp = self.snapshot_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(snapshot, sort_keys=True), encoding="utf-8")
        tmp.replace(self.snapshot_path)
        if self.log_path.exists():
            self.log_path.unlink()
