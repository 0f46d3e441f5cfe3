from __future__ import annotations

import numpy as np
import pytest

from agghrl.config import Config
from agghrl.types import Item, SearchRequest, SourceResults


def make_item(item_id: int, source: int, emb, rank: int, price: float = 10.0) -> Item:
    return Item(item_id, source, np.asarray(emb, dtype=np.float64), price, rank)


def make_results(counts, d: int = 8, seed: int = 0) -> SourceResults:
    rng = np.random.default_rng(seed)
    stacks = []
    for j, n in enumerate(counts):
        stacks.append(tuple(make_item(j * 1000 + k, j, rng.normal(size=d), k, float(rng.uniform(1, 50)))
                            for k in range(n)))
    return SourceResults(tuple(stacks))


def make_request(d: int = 8, page: int = 1, seed: int = 0) -> SearchRequest:
    rng = np.random.default_rng(seed)
    return SearchRequest("r", 1, rng.normal(size=d), rng.normal(size=2 + d), page)


@pytest.fixture
def cfg() -> Config:
    return Config()


def const_q_net(state_dim: int, q) -> "QNetworkParams":
    """Linear memoryless net whose output is ``q`` for every input."""
    from agghrl.nn import DenseParams
    from agghrl.qnet import QNetworkParams

    q = np.asarray(q, dtype=np.float64)
    value = DenseParams(np.zeros((1, state_dim)), np.array([q.mean()]))
    adv = DenseParams(np.zeros((q.size, state_dim)), q.copy())
    return QNetworkParams(None, None, value, adv)
