"""Domain-specific FIFO memory banks of (unit-norm key, label) pairs."""
import logging
from dataclasses import dataclass
from typing import Iterator, Sequence, Tuple

import numpy as np

from .errors import MemoryBankError

logger = logging.getLogger(__name__)

KEY_NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class MemoryEntry:
    key: np.ndarray
    label: int
    step: int


class MemoryBank:
    """
    Fixed-capacity ring buffer. Every enqueued row gets the next value of a
    monotone step counter; at capacity the smallest steps are evicted first.
    """

    def __init__(self, domain_id: int, capacity: int, dim: int, num_classes: int, name: str = ""):
        if capacity < 1:
            raise MemoryBankError(f"capacity must be positive, got {capacity}")
        self.domain_id = domain_id
        self.name = name or f"domain-{domain_id}"
        self.capacity = capacity
        self.dim = dim
        self.num_classes = num_classes
        self._keys = np.zeros((capacity, dim), dtype=np.float64)
        self._labels = np.zeros(capacity, dtype=np.int64)
        self._steps = np.zeros(capacity, dtype=np.int64)
        self._head = 0  # next write position
        self._size = 0
        self.next_step = 0

    def __len__(self):
        return self._size

    @property
    def is_full(self) -> bool:
        return self._size == self.capacity

    def _order(self) -> np.ndarray:
        """Ring positions in ascending step order."""
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._head) % self.capacity

    def enqueue(self, keys: np.ndarray, labels: Sequence[int]) -> None:
        keys = np.asarray(keys, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise MemoryBankError(f"{self.name}: keys must have shape (b, {self.dim}), got {keys.shape}")
        b = keys.shape[0]
        if labels.shape != (b,):
            raise MemoryBankError(f"{self.name}: {labels.shape[0]} labels for {b} keys")
        if b > self.capacity:
            raise MemoryBankError(f"{self.name}: batch of {b} exceeds capacity {self.capacity}")
        norms = np.linalg.norm(keys, axis=1)
        if b and np.max(np.abs(norms - 1.0)) > KEY_NORM_TOLERANCE:
            raise MemoryBankError(f"{self.name}: keys must be unit-norm (max deviation {np.max(np.abs(norms - 1.0)):.2e})")
        if b and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise MemoryBankError(f"{self.name}: labels must lie in [0, {self.num_classes})")

        positions = (self._head + np.arange(b)) % self.capacity
        self._keys[positions] = keys
        self._labels[positions] = labels
        self._steps[positions] = self.next_step + np.arange(b)
        self.next_step += b
        self._head = (self._head + b) % self.capacity
        self._size = min(self.capacity, self._size + b)

    def snapshot(self) -> Tuple[np.ndarray, np.ndarray]:
        """Copies of (keys, labels) in step order."""
        order = self._order()
        return self._keys[order].copy(), self._labels[order].copy()

    def steps(self) -> np.ndarray:
        return self._steps[self._order()].copy()

    def select_by_label(self, c: int, positive: bool = True) -> Tuple[np.ndarray, int]:
        keys, labels = self.snapshot()
        mask = labels == c if positive else labels != c
        selected = keys[mask]
        return selected, int(selected.shape[0])

    def entries(self) -> Iterator[MemoryEntry]:
        for pos in self._order():
            yield MemoryEntry(key=self._keys[pos].copy(), label=int(self._labels[pos]), step=int(self._steps[pos]))

