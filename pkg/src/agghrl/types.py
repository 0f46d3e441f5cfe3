"""Domain types shared across the package."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class SourceKind(str, Enum):
    CORE = "core"
    VERTICAL = "vertical"


@dataclass(frozen=True)
class SourceType:
    id: int
    kind: SourceKind
    name: str


def make_sources(vertical_names: tuple[str, ...] | list[str], core_name: str = "product") -> tuple[SourceType, ...]:
    """Core search gets id 0; verticals follow densely as 1..N."""
    if not vertical_names:
        raise ValueError("at least one vertical is required")
    out = [SourceType(0, SourceKind.CORE, core_name)]
    out += [SourceType(i + 1, SourceKind.VERTICAL, name) for i, name in enumerate(vertical_names)]
    return tuple(out)


@dataclass(frozen=True, eq=False)
class Item:
    item_id: int
    source: int
    embedding: np.ndarray
    price: float
    within_source_rank: int = 0

    def __repr__(self) -> str:
        return f"Item({self.item_id}, src={self.source}, rank={self.within_source_rank})"


@dataclass(frozen=True, eq=False)
class SearchRequest:
    request_id: str
    user_id: int
    query_embedding: np.ndarray
    user_features: np.ndarray  # demographics followed by the recent-click mean embedding
    page_number: int = 1


@dataclass(frozen=True, eq=False)
class SourceResults:
    """Ranked item stacks indexed by source id (0 = core)."""

    stacks: tuple[tuple[Item, ...], ...]

    def __post_init__(self):
        for j, stack in enumerate(self.stacks):
            ranks = [it.within_source_rank for it in stack]
            if ranks != sorted(ranks) or len(set(ranks)) != len(ranks):
                raise ValueError(f"source {j} stack is not in strict rank order")

    @property
    def n_sources(self) -> int:
        return len(self.stacks)

    def n(self, j: int) -> int:
        return len(self.stacks[j])

    def counts(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.stacks)


@dataclass(frozen=True)
class SourceSet:
    """Selected verticals as a bitmask (bit j-1 <-> vertical j). Core is always in."""

    mask: int
    n_verticals: int

    def __post_init__(self):
        if not 0 <= self.mask < (1 << self.n_verticals):
            raise ValueError(f"option mask {self.mask} out of range for {self.n_verticals} verticals")

    @classmethod
    def from_sources(cls, sources, n_verticals: int) -> SourceSet:
        mask = 0
        for j in sources:
            if j == 0:
                continue
            if not 1 <= j <= n_verticals:
                raise ValueError(f"unknown vertical id {j}")
            mask |= 1 << (j - 1)
        return cls(mask, n_verticals)

    @classmethod
    def core_only(cls, n_verticals: int) -> SourceSet:
        return cls(0, n_verticals)

    def __contains__(self, j: int) -> bool:
        return j == 0 or (1 <= j <= self.n_verticals and bool(self.mask >> (j - 1) & 1))

    def sources(self) -> tuple[int, ...]:
        return (0,) + tuple(j for j in range(1, self.n_verticals + 1) if j in self)

    def bits(self) -> np.ndarray:
        return np.array([(self.mask >> i) & 1 for i in range(self.n_verticals)], dtype=np.float64)

    def issubset(self, other: SourceSet) -> bool:
        return self.mask & ~other.mask == 0

    @property
    def index(self) -> int:
        return self.mask


@dataclass(frozen=True, eq=False)
class HighState:
    request: SearchRequest
    results: SourceResults
    latest_option: SourceSet | None = None


@dataclass(frozen=True, eq=False)
class LowState:
    """Presenter state: ``popped[j]`` items of stack j are already on the page."""

    request: SearchRequest
    results: SourceResults
    option: SourceSet
    popped: tuple[int, ...]
    last_action: int | None = None
    slot: int = 0
    n_slots: int = 0

    def top(self, j: int) -> Item | None:
        stack = self.results.stacks[j]
        k = self.popped[j]
        return stack[k] if k < len(stack) else None

    def remaining(self, j: int) -> int:
        return self.results.n(j) - self.popped[j]


@dataclass(frozen=True)
class Page:
    """Filled slots in display order; positions are 1-indexed."""

    slots: tuple[tuple[int, Item], ...]

    @property
    def length(self) -> int:
        return len(self.slots)

    def items(self) -> list[Item]:
        return [it for _, it in self.slots]

    @classmethod
    def from_items(cls, items) -> Page:
        return cls(tuple((i + 1, it) for i, it in enumerate(items)))


@dataclass(frozen=True)
class SlotFeedback:
    click: int  # +1 click, -1 skip
    pay: float = 0.0
    dwell_ms: float = 0.0
    examined: bool = False

    def __post_init__(self):
        if self.click not in (1, -1):
            raise ValueError("click must be +1 or -1")
        if self.pay < 0:
            raise ValueError("pay must be nonnegative")
        if self.pay > 0 and self.click != 1:
            raise ValueError("pay > 0 requires a click")


@dataclass(frozen=True)
class UserFeedback:
    slots: tuple[SlotFeedback, ...]


@dataclass
class SlotRecord:
    item_id: int
    source: int
    click: int
    pay: float
    dwell_ms: float
    examined: bool = True


@dataclass
class PageLog:
    page_number: int
    user_features: list[float]
    candidates: list[list[int]]  # per-source item ids of the triggered results
    slots: list[SlotRecord]
    option: int | None = None
    actions: list[int] | None = None


@dataclass
class SessionLog:
    session_id: str
    user_id: int
    query: list[float]
    pages: list[PageLog] = field(default_factory=list)
    policy: str = ""

    def validate(self) -> None:
        if not self.pages:
            raise ValueError(f"session {self.session_id} has no pages")
        nums = [p.page_number for p in self.pages]
        if any(b <= a for a, b in zip(nums, nums[1:])):
            raise ValueError(f"session {self.session_id} page numbers are not increasing")
