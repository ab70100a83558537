"""Pluggable ticket-state persistence.

The scheduler is defined purely over its state transitions; a journal is an
append-only sequence of transition records (one JSON object each) that can
be replayed to reconstruct scheduler state after a restart. The default is
in-memory (no persistence); ``FileJournal`` appends one JSON line per record
to a file.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Iterable

Record = dict[str, Any]


class MemoryJournal:
    """Keeps records in a list. Useful for tests and as a null-cost default."""

    def __init__(self) -> None:
        self.records: list[Record] = []

    def append(self, record: Record) -> None:
        self.records.append(record)

    def flush(self) -> None:
        pass

    def close(self) -> None:
        pass


class FileJournal:
    """Append-only JSONL journal, flushed per record."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, record: Record) -> None:
        self._fh.write(json.dumps(record, separators=(",", ":")) + "\n")
        self._fh.flush()

    def flush(self) -> None:
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        if not self._fh.closed:
            self.flush()
            self._fh.close()

    @staticmethod
    def read(path: str | Path) -> list[Record]:
        records: list[Record] = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
        return records


def open_journal(path: str | Path | None):
    """File journal when a path is given, else in-memory."""
    return FileJournal(path) if path is not None else MemoryJournal()


def load_records(path: str | Path) -> Iterable[Record]:
    return FileJournal.read(path) if Path(path).exists() else []
