"""Byte-bounded LRU cache for task resources (datasets, snapshots)."""

from __future__ import annotations

from collections import OrderedDict


class LruCache:
    """Maps resource name -> (bytes, content_hash), evicting least recently
    used entries so total stored bytes never exceed ``capacity_bytes``.

    An entry larger than the whole capacity is never stored (callers get a
    fetch-through; the bound is inviolable).
    """

    def __init__(self, capacity_bytes: int):
        if capacity_bytes < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity_bytes = capacity_bytes
        self._entries: "OrderedDict[str, tuple[bytes, str]]" = OrderedDict()
        self._total = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    @property
    def total_bytes(self) -> int:
        return self._total

    def get(self, name: str) -> tuple[bytes, str] | None:
        entry = self._entries.get(name)
        if entry is None:
            return None
        self._entries.move_to_end(name)  # freshen
        return entry

    def put(self, name: str, data: bytes, content_hash: str) -> bool:
        """Insert, evicting LRU entries until the bound holds. Returns False
        when the item alone exceeds capacity and was not stored."""
        old = self._entries.pop(name, None)
        if old is not None:
            self._total -= len(old[0])
        if len(data) > self.capacity_bytes:
            return False
        while self._entries and self._total + len(data) > self.capacity_bytes:
            _, (evicted, _) = self._entries.popitem(last=False)
            self._total -= len(evicted)
        self._entries[name] = (data, content_hash)
        self._total += len(data)
        return True

    def clear(self) -> None:
        self._entries.clear()
        self._total = 0

    def names_lru_order(self) -> list[str]:
        return list(self._entries)
