"""Comparison methods: fixed rule, template-choosing flat DQN, and the
supervised pieces (per-vertical classifiers, pointwise item regressor)
that can be wired with the learned selector/presenter."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .agent import HRLAgent, PolicyBundle, TrainingCurves, _Rows, dqn_update, epsilon_at, epsilon_greedy, sync_targets
from .bc import results_from_ids
from .config import Config
from .features import FeatureLayout
from .nn import MLP, RMSPropState, rmsprop_update, sigmoid
from .policy import PagePolicy, fill_by_actions, page_log
from .replay import HighTransition, ReplayBuffer
from .rewards import extrinsic_reward, intrinsic_reward, page_intrinsics
from .sim import Catalog, Session
from .types import HighState, Item, Page, SearchRequest, SessionLog, SlotFeedback, SourceResults, SourceSet, UserFeedback

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Templates and the rule


@dataclass(frozen=True)
class Template:
    """Vertical placements as ``(source id, 1-indexed position)``; core fills the rest."""

    id: int
    placements: tuple[tuple[int, int], ...]

    def describe(self) -> str:
        if not self.placements:
            return "core-only"
        return "+".join(f"{j}@{p}" for j, p in self.placements)


def templates_from_config(cfg: Config) -> list[Template]:
    return [Template(i, tuple(tuple(pl) for pl in t)) for i, t in enumerate(cfg.baselines.templates)]


def template_page(results: SourceResults, template: Template) -> tuple[Page, int, list[int]]:
    """Place each vertical at its position when it has results, else leave the slot to core.

    Returns ``(page, option mask of verticals shown, per-slot sources)``.
    """
    n_v = results.n_sources - 1
    popped = [0] * results.n_sources
    pending = []
    for j, pos in sorted(template.placements, key=lambda jp: jp[1]):
        if 1 <= j <= n_v and popped[j] + sum(1 for pj, _ in pending if pj == j) < results.n(j):
            pending.append((j, pos))
    core = results.stacks[0]
    actions: list[int] = []
    items: list[Item] = []
    while pending or popped[0] < len(core):
        pos = len(items) + 1
        if pending and (pending[0][1] <= pos or popped[0] >= len(core)):
            j = pending.pop(0)[0]
        else:
            j = 0
        items.append(results.stacks[j][popped[j]])
        popped[j] += 1
        actions.append(j)
    shown = SourceSet.from_sources(set(actions) - {0}, n_v)
    return Page.from_items(items), shown.mask, actions


RULE_TEMPLATE = Template(-1, ((1, 4), (2, 9)))


def rule_policy(x: SearchRequest, results: SourceResults) -> Page:
    """Core only on page 1; afterwards topic at slot 4 and blog at slot 9 when available."""
    return rule_compose(x, results)[0]


def rule_compose(x: SearchRequest, results: SourceResults) -> tuple[Page, int, list[int]]:
    if x.page_number <= 1:
        return template_page(results, Template(-1, ()))
    n_v = results.n_sources - 1
    return template_page(results, Template(-1, tuple(pl for pl in RULE_TEMPLATE.placements if pl[0] <= n_v)))


class RulePolicy(PagePolicy):
    name = "rule"

    def compose(self, request, results):
        return rule_compose(request, results)


class TemplatePolicy(PagePolicy):
    """Always the same template (useful as a fixed comparator)."""

    def __init__(self, template: Template):
        self.template = template
        self.name = f"template:{template.describe()}"

    def compose(self, request, results):
        return template_page(results, self.template)


# --------------------------------------------------------------------------
# Flat DQN over templates


class FlatRLAgent(PagePolicy):
    """One recurrent DQN picking a template per page from the selector's state,
    rewarded with the page-level (extrinsic) reward."""

    name = "flat"

    def __init__(self, cfg: Config, seed: int = 0, templates: list[Template] | None = None):
        self.cfg = cfg
        self.layout = FeatureLayout.from_config(cfg)
        self.templates = templates if templates is not None else templates_from_config(cfg)
        if not self.templates:
            raise ValueError("flat agent needs at least one template")
        nn = cfg.nn
        rng = np.random.default_rng([seed, nn.init_seed_offset, 201])
        self.bundle = PolicyBundle.create(rng, self.layout.high_dim, len(self.templates), nn.selector_hidden,
                                          nn.selector_rnn, nn.selector_lr, nn, nn.max_unroll_high)
        self.memory = ReplayBuffer(cfg.agent.memory_high)
        self.rng = np.random.default_rng([seed, 202])
        self.curves = TrainingCurves()
        self.sessions_seen = 0
        self.n_verticals = cfg.env.n_verticals
        self._hist: _Rows | None = None
        self._latest: SourceSet | None = None

    def flat_rl_policy(self, window: np.ndarray, results: SourceResults, eps: float) -> tuple[Page, int, list[int], int]:
        q = self.bundle.q_window(window)
        t = epsilon_greedy(q, np.ones(len(self.templates), dtype=bool), eps, self.rng)
        page, shown, actions = template_page(results, self.templates[t])
        return page, shown, actions, t

    def _state(self, request, results) -> np.ndarray:
        return self.layout.featurize_high(HighState(request, results, self._latest))

    def reset(self) -> None:
        self._hist = _Rows(self.layout.high_dim)
        self._latest = None

    def compose(self, request, results):
        self._hist.append(self._state(request, results))
        page, shown, actions, _ = self.flat_rl_policy(self._hist.tail(self.bundle.max_unroll), results, 0.0)
        self._latest = SourceSet(shown, self.n_verticals)
        return page, shown, actions

    def run_session(self, session: Session, eps: float, learn: bool = True) -> SessionLog:
        ag = self.cfg.agent
        U = self.bundle.max_unroll
        self.reset()
        self._hist.append(self._state(session.request, session.results))
        slog = SessionLog(session.session_id, session.user.user_id, [float(v) for v in session.query], [], self.name)
        ret = 0.0
        while True:
            request, results = session.request, session.results
            page, shown, actions, t = self.flat_rl_policy(self._hist.tail(U), results, eps)
            fb = UserFeedback(tuple(session.respond(it, pos) for pos, it in page.slots))
            rs = page_intrinsics(fb.slots, ag.reward_lambda, ag.reward_delta, ag.no_click_penalty)
            r_e = extrinsic_reward(rs, ag.gamma)
            ret += r_e
            slog.pages.append(page_log(request, results, page, fb, shown, actions))
            go_on = session.finish_page(page, fb)
            self._latest = SourceSet(shown, self.n_verticals)
            if go_on:
                self._hist.append(self._state(session.request, session.results))
                seq = self._hist.tail(U + 1)
            else:
                seq = np.vstack([self._hist.tail(U), np.zeros((1, self.layout.high_dim))])
            if learn:
                self.memory.push(HighTransition(seq, t, r_e, page.length, not go_on,
                                                np.ones(len(self.templates), dtype=bool)))
                if self.memory.ready(ag.batch_size):
                    batch = self.memory.sample(ag.batch_size, self.rng)
                    disc = ag.gamma ** np.array([b.duration for b in batch], dtype=np.float64)
                    loss = dqn_update(self.bundle, batch, disc)
                    self.bundle.updates += 1
                    sync_targets(self.bundle, self.bundle.updates, ag.target_period_high)
                    self.curves.high.append((self.bundle.updates, loss))
            if not go_on:
                break
        if learn:
            self.curves.episodes.append((self.sessions_seen, ret))
            self.sessions_seen += 1
        return slog


def train_flat(sim, cfg: Config, budget: int, seed: int = 0, agent: FlatRLAgent | None = None,
               session_offset: int = 0) -> FlatRLAgent:
    ag = cfg.agent
    agent = agent if agent is not None else FlatRLAgent(cfg, seed)
    for i in range(budget):
        eps = epsilon_at(i / max(budget, 1), ag.eps_start, ag.eps_end, ag.eps_decay_frac)
        agent.run_session(sim.new_session(session_offset + i), eps, learn=True)
    return agent


# --------------------------------------------------------------------------
# Supervised pieces


def _bce_grad(logit: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    p = sigmoid(logit)
    eps = 1e-12
    loss = -np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
    return float(loss), (p - y) / y.shape[0]


def _fit_mlp(mlp: MLP, X: np.ndarray, y: np.ndarray, loss_grad, epochs: int, batch: int, lr: float,
             rng: np.random.Generator) -> list[float]:
    opt = RMSPropState()
    losses = []
    params = mlp.tensors()
    for _ in range(epochs):
        order = rng.permutation(X.shape[0])
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            out, cache = mlp.forward(X[idx])
            loss, g = loss_grad(out[:, 0], y[idx])
            grads = mlp.backward(cache, g[:, None])
            rmsprop_update(params, grads, opt, lr)
            losses.append(loss)
    return losses


class VerticalClassifiers:
    """One binary classifier per vertical: will the vertical be clicked if shown?"""

    def __init__(self, cfg: Config, seed: int = 0):
        self.cfg = cfg
        self.layout = FeatureLayout.from_config(cfg)
        rng = np.random.default_rng([seed, 301])
        sizes = [self.layout.high_dim, *cfg.baselines.classifier_hidden, 1]
        self.models = [MLP(rng, sizes, cfg.nn.leaky_slope) for _ in range(cfg.env.n_verticals)]
        self.trained = False
        self.rng = np.random.default_rng([seed, 302])

    def fit_arrays(self, X: np.ndarray, labels: list[tuple[np.ndarray, np.ndarray]]) -> None:
        """``labels[j-1] = (row indices where vertical j was shown, 0/1 clicked)``."""
        b = self.cfg.baselines
        for model, (rows, y) in zip(self.models, labels):
            if rows.size:
                _fit_mlp(model, X[rows], y.astype(np.float64), _bce_grad, b.supervised_epochs, b.supervised_batch,
                         b.supervised_lr, self.rng)
        self.trained = True

    def fit_logs(self, logs: list[SessionLog], catalog: Catalog) -> None:
        rows_x, labels = [], [([], []) for _ in self.models]
        for slog in logs:
            latest = None
            for p in slog.pages:
                req, res = _request_of(slog, p), results_from_ids(p.candidates, catalog)
                i = len(rows_x)
                rows_x.append(self.layout.featurize_high(HighState(req, res, latest)))
                for j in range(1, len(self.models) + 1):
                    shown = [s for s in p.slots if s.source == j]
                    if shown:
                        labels[j - 1][0].append(i)
                        labels[j - 1][1].append(float(any(s.click == 1 for s in shown)))
                if p.option is not None:
                    latest = SourceSet(p.option, len(self.models))
        X = np.array(rows_x) if rows_x else np.zeros((0, self.layout.high_dim))
        self.fit_arrays(X, [(np.array(r, dtype=np.int64), np.array(y)) for r, y in labels])

    def predict(self, x: np.ndarray) -> np.ndarray:
        if not self.trained:
            raise RuntimeError("vertical classifiers are not trained")
        return np.array([float(sigmoid(m.forward(x[None, :])[0][0, 0])) for m in self.models])


def bc_vertical_select(probs: np.ndarray, results: SourceResults) -> SourceSet:
    """Verticals whose click probability is at least 0.5 and that have results."""
    n_v = results.n_sources - 1
    return SourceSet.from_sources([j for j in range(1, n_v + 1) if probs[j - 1] >= 0.5 and results.n(j) > 0], n_v)


def _request_of(slog: SessionLog, p) -> SearchRequest:
    return SearchRequest(f"{slog.session_id}/{p.page_number}", slog.user_id, np.asarray(slog.query, dtype=np.float64),
                         np.asarray(p.user_features, dtype=np.float64), p.page_number)


class ItemRegressor:
    """Pointwise item scorer regressing the per-slot intrinsic reward."""

    def __init__(self, cfg: Config, seed: int = 0):
        self.cfg = cfg
        self.layout = FeatureLayout.from_config(cfg)
        self.n_sources = cfg.env.n_sources
        self.in_dim = self.layout.request_vector_width + cfg.env.d_item + self.n_sources + 1
        rng = np.random.default_rng([seed, 401])
        self.model = MLP(rng, [self.in_dim, *cfg.baselines.regressor_hidden, 1], cfg.nn.leaky_slope)
        self.trained = False
        self.rng = np.random.default_rng([seed, 402])

    def features(self, req_vec: np.ndarray, items: list[Item]) -> np.ndarray:
        X = np.zeros((len(items), self.in_dim))
        w = req_vec.shape[0]
        d = self.cfg.env.d_item
        for i, it in enumerate(items):
            X[i, :w] = req_vec
            X[i, w:w + d] = it.embedding
            X[i, w + d + it.source] = 1.0
            X[i, -1] = math.log1p(it.price) / 5.0
        return X

    def fit_logs(self, logs: list[SessionLog], catalog: Catalog) -> None:
        ag = self.cfg.agent
        X, y = [], []
        for slog in logs:
            for p in slog.pages:
                req_vec = self.layout.request_vector(_request_of(slog, p))
                items = [catalog.item(s.item_id) for s in p.slots]
                X.append(self.features(req_vec, items))
                y.extend(intrinsic_reward(SlotFeedback(s.click, s.pay), ag.reward_lambda, ag.reward_delta)
                         for s in p.slots)
        if X:
            b = self.cfg.baselines
            _fit_mlp(self.model, np.vstack(X), np.array(y), _mse_grad, b.supervised_epochs, b.supervised_batch,
                     b.supervised_lr, self.rng)
        self.trained = True

    def score(self, req_vec: np.ndarray, items: list[Item]) -> np.ndarray:
        if not self.trained:
            raise RuntimeError("item regressor is not trained")
        return self.model.forward(self.features(req_vec, items))[0][:, 0]


def _mse_grad(pred: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    r = pred - y
    return float(np.mean(r * r) / 2), r / y.shape[0]


def rm_present(o: SourceSet, results: SourceResults, scores_fn) -> tuple[Page, list[int]]:
    """Sort every selected item by its score (ties: source id, then rank).

    A single contributing source is shown in its own order. Otherwise the
    merge compares scores across sources and may break within-source order.
    """
    items = [it for j in o.sources() for it in results.stacks[j]]
    if len({it.source for it in items}) <= 1:
        ranked = items
    else:
        scores = np.asarray(scores_fn(items), dtype=np.float64)
        order = sorted(range(len(items)), key=lambda i: (-scores[i], items[i].source, items[i].within_source_rank))
        ranked = [items[i] for i in order]
    return Page.from_items(ranked), [it.source for it in ranked]


class CompositePolicy(PagePolicy):
    """Selector and presenter drawn from different methods."""

    def __init__(self, method: str, *, classifiers: VerticalClassifiers | None = None,
                 regressor: ItemRegressor | None = None, agent: HRLAgent | None = None):
        need = {"BC+RM": ("classifiers", "regressor"), "BC+RL": ("classifiers", "agent"),
                "RL+RM": ("agent", "regressor")}
        if method not in need:
            raise ValueError(f"unknown composite method {method!r}")
        have = {"classifiers": classifiers, "regressor": regressor, "agent": agent}
        missing = [k for k in need[method] if have[k] is None]
        if missing:
            raise ValueError(f"{method} needs {', '.join(missing)}")
        self.method = method
        self.name = method
        self.classifiers, self.regressor, self.agent = classifiers, regressor, agent
        self.layout = (agent.layout if agent is not None else FeatureLayout.from_config(
            (classifiers or regressor).cfg))
        self._latest: SourceSet | None = None

    def reset(self) -> None:
        self._latest = None
        if self.agent is not None:
            self.agent.reset()

    def compose(self, request, results):
        if self.method.startswith("BC"):
            x = self.layout.featurize_high(HighState(request, results, self._latest))
            option = bc_vertical_select(self.classifiers.predict(x), results)
        else:
            option = self.agent.choose_option(request, results)
        self._latest = option
        if self.method.endswith("RL"):
            actions = self.agent.present_actions(request, results, option, 0.0)
            return fill_by_actions(results, actions), option.mask, actions
        req_vec = self.layout.request_vector(request)
        page, actions = rm_present(option, results, lambda items: self.regressor.score(req_vec, items))
        return page, option.mask, actions


def compose(method: str, **parts) -> CompositePolicy:
    return CompositePolicy(method, **parts)
