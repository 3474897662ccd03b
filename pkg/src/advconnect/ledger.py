"""Exact accounting of model forward/backward evaluations."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field


@dataclass
class QueryLedger:
    """Counts single-point forward and backward evaluations.

    A batched call over ``n`` inputs is charged ``n``. Counters only grow.
    Per-worker ledgers are combined with :meth:`merge`.
    """

    forwards: int = 0
    backwards: int = 0
    generations_completed: int = 0
    wall_time: float = 0.0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def charge(self, forwards: int = 0, backwards: int = 0) -> None:
        if forwards < 0 or backwards < 0:
            raise ValueError("ledger counters never decrease")
        with self._lock:
            self.forwards += int(forwards)
            self.backwards += int(backwards)

    def merge(self, other: "QueryLedger") -> "QueryLedger":
        with self._lock:
            self.forwards += other.forwards
            self.backwards += other.backwards
            self.generations_completed += other.generations_completed
            self.wall_time += other.wall_time
        return self

    def snapshot(self) -> tuple[int, int]:
        return self.forwards, self.backwards
