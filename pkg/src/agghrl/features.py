"""Fixed-width state vectors for the selector and the presenter.

High-level layout::

    query (d) | user: demographics + recent-click mean (2 + d) | page (1)
    | per source: mean embedding (d) + its cosine to the recent-click mean (1)
    | latest option bits (N)

Low-level layout::

    query (d) | user (2 + d) | page (1)
    | per source: top item embedding (d) + its cosine to the recent-click mean (1)
      + items left (1)
    | last action one-hot (1 + N) | option bits (N) | slot position, slots left (2)

With d = 8 and N = 2 these come to 48 and 56.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import HighState, LowState, SearchRequest, SourceResults, SourceSet

N_DEMOGRAPHICS = 2
COUNT_SCALE = 10.0
SLOT_SCALE = 16.0


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def source_mean_embedding(results: SourceResults, j: int, dim: int | None = None) -> np.ndarray:
    stack = results.stacks[j]
    if not stack:
        if dim is None:
            dim = _infer_dim(results)
        return np.zeros(dim)
    embs = [it.embedding for it in stack]
    widths = {e.shape for e in embs}
    if len(widths) != 1:
        raise ValueError(f"source {j} items have mixed embedding shapes {sorted(widths)}")
    return np.mean(np.stack(embs), axis=0)


def _infer_dim(results: SourceResults) -> int:
    for stack in results.stacks:
        if stack:
            return stack[0].embedding.shape[0]
    raise ValueError("cannot infer embedding width from empty results; pass dim")


def slot_count(option: SourceSet, results: SourceResults) -> int:
    return sum(results.n(j) for j in option.sources())


@dataclass(frozen=True)
class Segment:
    name: str
    width: int


class FeatureLayout:
    """Segment widths derived from the item/source configuration."""

    def __init__(self, d_item: int, n_verticals: int, high_dim: int | None = None, low_dim: int | None = None):
        self.d = d_item
        self.n_verticals = n_verticals
        self.n_sources = n_verticals + 1
        request = [Segment("query", d_item), Segment("user", N_DEMOGRAPHICS + d_item), Segment("page", 1)]
        self.high = request + [Segment(f"source{j}", d_item + 1) for j in range(self.n_sources)]
        self.high.append(Segment("latest_option", n_verticals))
        self.low = request + [Segment(f"top{j}", d_item + 2) for j in range(self.n_sources)]
        self.low += [Segment("last_action", self.n_sources), Segment("option", n_verticals), Segment("slot", 2)]
        self.high_dim = sum(s.width for s in self.high)
        self.low_dim = sum(s.width for s in self.low)
        if high_dim is not None and high_dim != self.high_dim:
            raise ValueError(f"high-level segments {self._describe(self.high)} sum to {self.high_dim}, configured {high_dim}")
        if low_dim is not None and low_dim != self.low_dim:
            raise ValueError(f"low-level segments {self._describe(self.low)} sum to {self.low_dim}, configured {low_dim}")
        self._high_off = self._offsets(self.high)
        self._low_off = self._offsets(self.low)

    @staticmethod
    def _describe(segs) -> str:
        return ", ".join(f"{s.name}={s.width}" for s in segs)

    @staticmethod
    def _offsets(segs) -> dict[str, slice]:
        out, pos = {}, 0
        for s in segs:
            out[s.name] = slice(pos, pos + s.width)
            pos += s.width
        return out

    def high_slice(self, name: str) -> slice:
        return self._high_off[name]

    def low_slice(self, name: str) -> slice:
        return self._low_off[name]

    @classmethod
    def from_config(cls, cfg) -> FeatureLayout:
        return cls(cfg.env.d_item, cfg.env.n_verticals, cfg.nn.high_state_dim, cfg.nn.low_state_dim)

    # -- shared request part ------------------------------------------------

    def _put(self, vec: np.ndarray, offsets: dict[str, slice], name: str, value) -> None:
        sl = offsets[name]
        value = np.asarray(value, dtype=np.float64).reshape(-1)
        if value.shape[0] != sl.stop - sl.start:
            raise ValueError(f"segment '{name}' expects width {sl.stop - sl.start}, got {value.shape[0]}")
        vec[sl] = value

    def _request(self, vec: np.ndarray, offsets, req: SearchRequest) -> None:
        self._put(vec, offsets, "query", req.query_embedding)
        self._put(vec, offsets, "user", req.user_features)
        vec[offsets["page"]] = 1.0 - 1.0 / max(req.page_number, 1)

    @property
    def request_vector_width(self) -> int:
        return 2 * self.d + N_DEMOGRAPHICS + 1

    def request_vector(self, req: SearchRequest) -> np.ndarray:
        """The leading request segments, shared by both layouts."""
        vec = np.zeros(self.request_vector_width)
        self._request(vec, self._high_off, req)
        return vec

    # -- featurizers ----------------------------------------------------------

    def featurize_high(self, s: HighState) -> np.ndarray:
        vec = np.zeros(self.high_dim)
        self._request(vec, self._high_off, s.request)
        if s.results.n_sources != self.n_sources:
            raise ValueError(f"segment 'source*' expects {self.n_sources} sources, got {s.results.n_sources}")
        recent = s.request.user_features[N_DEMOGRAPHICS:]
        for j in range(self.n_sources):
            seg = self._high_off[f"source{j}"]
            mean = source_mean_embedding(s.results, j, self.d)
            if mean.shape[0] != self.d:
                raise ValueError(f"segment 'source{j}' expects embeddings of width {self.d}, got {mean.shape[0]}")
            vec[seg.start:seg.start + self.d] = mean
            vec[seg.stop - 1] = cosine(mean, recent)
        if s.latest_option is not None:
            self._put(vec, self._high_off, "latest_option", s.latest_option.bits())
        return vec

    def featurize_low(self, s: LowState, request_vec: np.ndarray | None = None) -> np.ndarray:
        vec = np.zeros(self.low_dim)
        if request_vec is not None:
            vec[: request_vec.shape[0]] = request_vec
        else:
            self._request(vec, self._low_off, s.request)
        if s.results.n_sources != self.n_sources:
            raise ValueError(f"segment 'top*' expects {self.n_sources} sources, got {s.results.n_sources}")
        recent = s.request.user_features[N_DEMOGRAPHICS:]
        for j in s.option.sources():
            seg = self._low_off[f"top{j}"]
            top = s.top(j)
            if top is not None:
                if top.embedding.shape[0] != self.d:
                    raise ValueError(f"segment 'top{j}' expects embeddings of width {self.d}, got {top.embedding.shape[0]}")
                vec[seg.start:seg.start + self.d] = top.embedding
                vec[seg.start + self.d] = cosine(top.embedding, recent)
            vec[seg.stop - 1] = s.remaining(j) / COUNT_SCALE
        if s.last_action is not None:
            vec[self._low_off["last_action"].start + s.last_action] = 1.0
        self._put(vec, self._low_off, "option", s.option.bits())
        slot = self._low_off["slot"]
        vec[slot.start] = s.slot / SLOT_SCALE
        vec[slot.start + 1] = (s.n_slots - s.slot) / SLOT_SCALE
        return vec


def featurize_high(s: HighState, layout: FeatureLayout) -> np.ndarray:
    return layout.featurize_high(s)


def featurize_low(s: LowState, layout: FeatureLayout) -> np.ndarray:
    return layout.featurize_low(s)
