# app/services/utils/bundle_cache.py
from __future__ import annotations

import logging
import time
from typing import Callable, Dict, Generic, Optional, Tuple, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")


class BundleCache(Generic[T]):
    """Loads a trained bundle on first use and reloads it once ``ttl_seconds`` have passed."""

    def __init__(self, loader: Callable[[str], T], ttl_seconds: int = 600):
        self._loader = loader
        self._ttl = ttl_seconds
        self._entries: Dict[str, Tuple[T, float]] = {}

    def get(self, path: str) -> T:
        now = time.time()
        hit = self._entries.get(path)
        if hit is None or (now - hit[1]) > self._ttl:
            logger.info("loading bundle %s", path)
            self._entries[path] = (self._loader(path), now)
        return self._entries[path][0]

    def put(self, path: str, value: T) -> None:
        self._entries[path] = (value, time.time())

    def clear(self, path: Optional[str] = None) -> None:
        if path is None:
            self._entries.clear()
        else:
            self._entries.pop(path, None)
