"""Synthetic marketplace: a catalog with one core and several vertical sources,
query-driven retrieval, and a probabilistic user.

The user model is a position-biased examination model. An examined slot is
clicked with probability ``sigmoid((affinity - center) / temperature + bias)``
where affinity is the cosine between the item and the user's latent intent.
Verticals get extra click odds when they resemble what the user clicked on
earlier pages, so a policy that tracks click history can place them better
than a fixed layout can.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import EnvConfig, UserModelParams
from .types import Item, Page, SearchRequest, SlotFeedback, SourceResults, UserFeedback, make_sources

ID_STRIDE = 1_000_000


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def item_source(item_id: int) -> int:
    return item_id // ID_STRIDE


class Catalog:
    """Items per source, clustered around shared topic centers; plus a user pool."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.sources = make_sources(cfg.vertical_names)
        rng = np.random.default_rng(cfg.catalog_seed)
        d = cfg.d_item
        self.centers = _unit(rng.normal(size=(cfg.n_clusters, d)))
        self.emb: list[np.ndarray] = []
        self.price: list[np.ndarray] = []
        self.cluster: list[np.ndarray] = []
        for n in cfg.items_per_source:
            c = rng.integers(0, cfg.n_clusters, size=n)
            e = _unit(self.centers[c] + cfg.item_noise * rng.normal(size=(n, d)))
            p = np.exp(cfg.price_log_mean + cfg.price_log_sigma * rng.normal(size=n))
            self.emb.append(e)
            self.price.append(p)
            self.cluster.append(c)
        self.user_gender = rng.integers(0, 2, size=cfg.n_users).astype(np.float64)
        self.user_age = rng.random(cfg.n_users)

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    def item(self, item_id: int, rank: int = 0) -> Item:
        j, k = divmod(item_id, ID_STRIDE)
        return Item(item_id, j, self.emb[j][k], float(self.price[j][k]), rank)

    def embedding(self, item_id: int) -> np.ndarray:
        j, k = divmod(item_id, ID_STRIDE)
        return self.emb[j][k]

    def ranking(self, query: np.ndarray, j: int) -> np.ndarray:
        """Item indices of source j by descending cosine to ``query``; ties by item id."""
        scores = self.emb[j] @ _unit(np.asarray(query, dtype=np.float64))
        return np.lexsort((np.arange(scores.shape[0]), -scores))

    def page_results(self, orders: list[np.ndarray], page_number: int, empty: list[bool]) -> SourceResults:
        stacks = []
        for j, order in enumerate(orders):
            n = self.cfg.per_page[j]
            if j > 0 and empty[j - 1]:
                stacks.append(())
                continue
            lo = (page_number - 1) * n
            idx = order[lo:lo + n]
            stacks.append(tuple(self.item(j * ID_STRIDE + int(k), lo + r) for r, k in enumerate(idx)))
        return SourceResults(tuple(stacks))

    def retrieve(self, request: SearchRequest, rng: np.random.Generator) -> SourceResults:
        """Top results of every source for ``request``'s page; verticals may come back empty."""
        empty = [bool(rng.random() < p) for p in self.cfg.vertical_empty_prob]
        orders = [self.ranking(request.query_embedding, j) for j in range(self.n_sources)]
        return self.page_results(orders, request.page_number, empty)


@dataclass
class UserState:
    user_id: int
    gender: float
    age: float
    intent: np.ndarray
    recent: np.ndarray
    clicked_last_page: bool = False
    pages_seen: int = 0
    recent_norm: float = 0.0

    def features(self) -> np.ndarray:
        return np.concatenate(([self.gender, self.age], self.recent))


def examination_prob(rank: int, params: UserModelParams) -> float:
    """Probability that the slot at 0-based ``rank`` is looked at."""
    if params.position_bias == "none":
        return params.examination_scale
    if params.position_bias == "zero":
        return 0.0
    return params.examination_scale / math.log2(rank + 2)


def click_prob(item: Item, user: UserState, params: UserModelParams) -> float:
    if params.fixed_click_prob is not None:
        return params.fixed_click_prob
    j = item.source
    aff = float(item.embedding @ user.intent)
    logit = (aff - params.click_center) / params.click_temperature + params.source_bias[j]
    if j == 1:
        logit += params.topic_gender_gain * (user.gender - 0.5)
    elif j == 2:
        logit += params.blog_age_gain * (0.5 - user.age)
    if j > 0 and params.behavior_gain != 0.0:
        norm = user.recent_norm
        if norm > 0:
            logit += params.behavior_gain * max(0.0, float(item.embedding @ user.recent) / norm)
    return 1.0 / (1.0 + math.exp(-logit))


def purchase_prob(item: Item, user: UserState, params: UserModelParams, price_log_mean: float) -> float:
    j = item.source
    aff = float(item.embedding @ user.intent)
    logit = (
        params.purchase_base[j]
        + params.purchase_affinity * aff
        - params.price_sensitivity * (math.log(item.price) - price_log_mean)
    )
    return 1.0 / (1.0 + math.exp(-logit))


def slot_response(
    item: Item, position: int, user: UserState, params: UserModelParams, rng: np.random.Generator,
    price_log_mean: float = 2.4,
) -> SlotFeedback:
    """Feedback for one slot (1-indexed ``position``). Always consumes the same draws."""
    u = rng.random(3)
    return response_from_draws(item, position, user, params, u, rng.standard_normal(), price_log_mean)


def response_from_draws(
    item: Item, position: int, user: UserState, params: UserModelParams, u, z: float, price_log_mean: float = 2.4,
) -> SlotFeedback:
    """Slot feedback from three uniforms (examine, click, buy) and one normal (dwell)."""
    if u[0] >= examination_prob(position - 1, params):
        return SlotFeedback(-1, 0.0, 0.0, False)
    if u[1] >= click_prob(item, user, params):
        return SlotFeedback(-1, 0.0, 0.0, True)
    pay = item.price if u[2] < purchase_prob(item, user, params, price_log_mean) else 0.0
    sigma = params.dwell_sigma
    mean_s = params.dwell_mean_s[item.source]
    dwell_ms = 1000.0 * math.exp(math.log(mean_s) - 0.5 * sigma * sigma + sigma * z)
    return SlotFeedback(1, float(pay), dwell_ms, True)


def user_respond(
    page: Page, user: UserState, params: UserModelParams, rng: np.random.Generator, price_log_mean: float = 2.4
) -> UserFeedback:
    return UserFeedback(tuple(slot_response(it, pos, user, params, rng, price_log_mean) for pos, it in page.slots))


def continuation_prob(user: UserState, page_no: int, params: UserModelParams) -> float:
    p = params.continue_prob - params.continue_decay * (page_no - 1)
    if user.clicked_last_page:
        p += params.continue_click_gain
    return min(max(p, 0.0), 0.999)


def session_continue(user: UserState, page_no: int, params: UserModelParams, rng: np.random.Generator) -> bool:
    return bool(rng.random() < continuation_prob(user, page_no, params))


def update_user(user: UserState, page: Page, feedback: UserFeedback, params: UserModelParams) -> None:
    clicked = [it.embedding for (_, it), fb in zip(page.slots, feedback.slots) if fb.click == 1]
    user.clicked_last_page = bool(clicked)
    user.pages_seen += 1
    if clicked:
        m = np.mean(clicked, axis=0)
        if np.any(user.recent):
            user.recent = (1.0 - params.recent_weight) * user.recent + params.recent_weight * m
        else:
            user.recent = m
        user.recent_norm = float(np.linalg.norm(user.recent))


@dataclass
class Traffic:
    """One synthetic search session's exogenous draws."""

    user_index: int
    cluster: int
    intent: np.ndarray
    query: np.ndarray
    rng: np.random.Generator = field(repr=False)


class Session:
    """A live search session; the policy fills pages, the user responds slot by slot."""

    def __init__(self, sim: SearchSimulator, session_id: str, traffic: Traffic, response_rng: np.random.Generator,
                 user_id: int | None = None, response_key: tuple[int, ...] = (0,)):
        self.sim = sim
        self.session_id = session_id
        self.traffic = traffic
        self.rng = response_rng
        self._key = response_key
        cat = sim.catalog
        d = sim.cfg.d_item
        uid = traffic.user_index if user_id is None else user_id
        self.user = UserState(
            uid, float(cat.user_gender[traffic.user_index]), float(cat.user_age[traffic.user_index]),
            traffic.intent, np.zeros(d),
        )
        self.query = traffic.query
        self._orders = [cat.ranking(self.query, j) for j in range(cat.n_sources)]
        self.page_number = 0
        self._max_slots = sum(sim.cfg.per_page)
        self.done = False
        self.request: SearchRequest | None = None
        self.results: SourceResults | None = None
        self._advance()

    def _advance(self) -> None:
        self.page_number += 1
        # examination draws belong to slot positions, click/buy/dwell draws to items
        self._u_exam = self.rng.random(self._max_slots)
        self._cont = self.rng.random()
        self._item_draws: dict[int, tuple[np.ndarray, float]] = {}
        empty = [bool(self.traffic.rng.random() < p) for p in self.sim.cfg.vertical_empty_prob]
        self.request = SearchRequest(
            f"{self.session_id}/{self.page_number}", self.user.user_id, self.query,
            self.user.features(), self.page_number,
        )
        self.results = self.sim.catalog.page_results(self._orders, self.page_number, empty)

    def respond(self, item: Item, position: int) -> SlotFeedback:
        if not 1 <= position <= self._max_slots:
            raise ValueError(f"slot position {position} outside 1..{self._max_slots}")
        draws = self._item_draws.get(item.item_id)
        if draws is None:
            rng = np.random.default_rng([*self._key, self.page_number, item.item_id])
            draws = (rng.random(2), float(rng.standard_normal()))
            self._item_draws[item.item_id] = draws
        u = (self._u_exam[position - 1], draws[0][0], draws[0][1])
        return response_from_draws(item, position, self.user, self.sim.params, u, draws[1],
                                   self.sim.cfg.price_log_mean)

    def finish_page(self, page: Page, feedback: UserFeedback) -> bool:
        """Record the page's feedback; returns True when the user goes on to another page."""
        if self.done:
            raise RuntimeError("session already ended")
        update_user(self.user, page, feedback, self.sim.params)
        go_on = bool(self._cont < continuation_prob(self.user, self.page_number, self.sim.params))
        if not go_on or self.page_number >= self.sim.cfg.max_pages:
            self.done = True
            return False
        self._advance()
        return True

    def skip_page(self) -> bool:
        """Advance without showing anything (no selected source had results)."""
        return self.finish_page(Page(()), UserFeedback(()))


class SearchSimulator:
    """Session factory. Traffic and user responses come from separate seeded streams."""

    def __init__(self, cfg: EnvConfig, seed: int = 0, catalog: Catalog | None = None):
        self.cfg = cfg
        self.params = cfg.user
        self.seed = seed
        self.catalog = catalog if catalog is not None else Catalog(cfg)

    def traffic(self, index: int, traffic_seed: int | None = None) -> Traffic:
        ss = np.random.SeedSequence([self.seed if traffic_seed is None else traffic_seed, index, 1])
        rng = np.random.default_rng(ss)
        cfg = self.cfg
        d = cfg.d_item
        user_index = int(rng.integers(0, cfg.n_users))
        k = int(rng.integers(0, cfg.n_clusters))
        center = self.catalog.centers[k]
        intent = _unit(center + cfg.intent_noise * rng.normal(size=d))
        query = _unit(center + cfg.query_noise * rng.normal(size=d))
        return Traffic(user_index, k, intent, query, rng)

    def new_session(self, index: int, *, traffic_seed: int | None = None, response_seed: int | None = None,
                    user_id: int | None = None) -> Session:
        traffic = self.traffic(index, traffic_seed)
        key = (self.seed if response_seed is None else response_seed, index)
        rs = np.random.SeedSequence([*key, 2])
        return Session(self, f"s{index}", traffic, np.random.default_rng(rs), user_id, (*key, 3))
