"""Fixed-capacity experience memories with uniform sampling.

Transitions keep the featurized state sequence that led up to them (from the
page start for the presenter, from the session start for the selector) rather
than a recurrent state: updates unroll that sequence from a zero state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NotReady(LookupError):
    """Raised when a memory holds fewer transitions than requested."""


@dataclass(slots=True)
class HighTransition:
    seq: np.ndarray  # (L+1, dim): history ending in s, then s'
    option: int
    reward: float
    duration: int
    terminal: bool
    mask_next: np.ndarray

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError("option duration must be >= 1")
        if not np.isfinite(self.reward):
            raise ValueError("extrinsic reward must be finite")

    @property
    def taken(self) -> int:
        return self.option

    @property
    def s(self) -> np.ndarray:
        return self.seq[-2]

    @property
    def s_next(self) -> np.ndarray:
        return self.seq[-1]


@dataclass(slots=True)
class LowTransition:
    seq: np.ndarray
    option: int
    action: int
    reward: float
    terminal: bool
    mask_next: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError("intrinsic reward must be finite")

    @property
    def taken(self) -> int:
        return self.action

    @property
    def s(self) -> np.ndarray:
        return self.seq[-2]

    @property
    def s_next(self) -> np.ndarray:
        return self.seq[-1]


class ReplayBuffer:
    """Ring buffer: once full, each push evicts the oldest transition."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._data: list = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._data)

    def push(self, transition) -> None:
        if len(self._data) < self.capacity:
            self._data.append(transition)
        else:
            self._data[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def ready(self, k: int) -> bool:
        return len(self._data) >= k

    def sample(self, k: int, rng: np.random.Generator) -> list:
        """``k`` uniform draws with replacement."""
        if not self.ready(k):
            raise NotReady(f"buffer holds {len(self._data)} transitions, {k} requested")
        idx = rng.integers(0, len(self._data), size=k)
        return [self._data[i] for i in idx]

    def oldest(self):
        if not self._data:
            raise NotReady("buffer is empty")
        return self._data[self._next % len(self._data)] if len(self._data) == self.capacity else self._data[0]


def stack_sequences(seqs: list[np.ndarray], max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-align variable-length ``(L, dim)`` sequences into ``(T, B, dim)`` plus a mask.

    Sequences longer than ``max_len`` keep their most recent steps.
    """
    if max_len is not None:
        seqs = [s[-max_len:] for s in seqs]
    T = max(s.shape[0] for s in seqs)
    B = len(seqs)
    dim = seqs[0].shape[1]
    X = np.zeros((T, B, dim))
    M = np.zeros((T, B))
    for b, s in enumerate(seqs):
        L = s.shape[0]
        X[T - L:, b] = s
        M[T - L:, b] = 1.0
    return X, M
