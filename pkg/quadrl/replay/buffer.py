from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from quadrl.domain.errors import NotReady
from quadrl.domain.models import IMAGE_SIZE, REWARD_ALIVE, REWARD_COLLISION, Experience, StackedState

TASK_REWARDS = (REWARD_COLLISION, REWARD_ALIVE)


@dataclass(frozen=True)
class ReplayStats:
    len: int
    capacity: int
    a_t: int
    insert_count: int

    @property
    def ready(self) -> bool:
        return self.len >= self.capacity


def _check(e: object, allowed_rewards: Optional[Sequence[float]]) -> Optional[str]:
    if not isinstance(e, Experience):
        return f"not an Experience: {type(e).__name__}"
    if e.a not in (0, 1):
        return f"action {e.a!r} not in {{0, 1}}"
    if not isinstance(e.s, StackedState) or not isinstance(e.s_next, StackedState):
        return "states must be StackedState"
    if e.s.image_now.shape != (IMAGE_SIZE, IMAGE_SIZE) or e.s_next.image_now.shape != (IMAGE_SIZE, IMAGE_SIZE):
        return "images must be 32x32"
    if not np.isfinite(e.r):
        return "non-finite reward"
    if allowed_rewards is not None and float(e.r) not in allowed_rewards:
        return f"reward {e.r} not in {tuple(allowed_rewards)}"
    return None


class ReplayBuffer:
    """
    Bounded FIFO ring with uniform sampling (with replacement).

    push/sample/stats each hold one lock, so a push batch is atomic and a sample
    sees a consistent snapshot. a_T counts every accepted item ever pushed.
    """

    def __init__(self, capacity: int = 15000, allowed_rewards: Optional[Sequence[float]] = TASK_REWARDS):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.allowed_rewards = None if allowed_rewards is None else tuple(float(r) for r in allowed_rewards)
        self._items: List[Optional[Experience]] = [None] * self.capacity
        self._head = 0  # next write slot
        self._len = 0
        self._insert_count = 0
        self._a_t = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return self._len

    def push(self, items: Iterable[Experience]) -> Tuple[int, List[Tuple[int, str]]]:
        """Append in order, evicting oldest. Returns (accepted, [(index, reason), ...])."""
        items = list(items)
        rejected = []
        good = []
        for i, e in enumerate(items):
            err = _check(e, self.allowed_rewards)
            if err:
                rejected.append((i, err))
            else:
                good.append(e)
        with self._lock:
            for e in good:
                self._items[self._head] = e
                self._head = (self._head + 1) % self.capacity
                self._len = min(self._len + 1, self.capacity)
            self._insert_count += len(good)
            self._a_t += len(good)
        return len(good), rejected

    def sample(self, n: int, rng: np.random.Generator) -> List[Experience]:
        with self._lock:
            if self._len < n:
                raise NotReady(f"buffer holds {self._len} < {n} items")
            start = (self._head - self._len) % self.capacity
            idx = rng.integers(0, self._len, size=n)
            return [self._items[(start + int(k)) % self.capacity] for k in idx]

    def snapshot(self) -> List[Experience]:
        """Retained items, oldest first."""
        with self._lock:
            start = (self._head - self._len) % self.capacity
            return [self._items[(start + k) % self.capacity] for k in range(self._len)]

    def stats(self) -> ReplayStats:
        with self._lock:
            return ReplayStats(len=self._len, capacity=self.capacity, a_t=self._a_t, insert_count=self._insert_count)
