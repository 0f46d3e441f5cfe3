"""Two-level aggregation agent.

The selector picks a set of sources for each page (an option); the presenter
fills the page slot by slot, popping the top item of one selected source per
slot. Both levels are recurrent dueling double-DQNs trained from replay.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config, NNConfig
from .features import FeatureLayout, slot_count
from .nn import RMSPropState, huber, rmsprop_update_flat
from .policy import PagePolicy, fill_by_actions, option_legal_mask, page_log
from .qnet import MASKED, QNetworkParams, q_backward_seq, q_forward, q_forward_seq
from .replay import HighTransition, LowTransition, ReplayBuffer, stack_sequences
from .rewards import extrinsic_reward, intrinsic_reward
from .sim import Session
from .types import HighState, LowState, Page, SearchRequest, SessionLog, SourceResults, SourceSet, UserFeedback

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Policy containers


@dataclass
class PolicyBundle:
    """Online and target weights, optimizer state and the rollout hidden state."""

    online: QNetworkParams
    target: QNetworkParams
    opt: RMSPropState
    lr: float
    decay: float = 0.95
    rms_eps: float = 1e-6
    huber_threshold: float = 1.0
    max_unroll: int = 16
    h: np.ndarray = field(default=None, repr=False)
    updates: int = 0

    def __post_init__(self):
        if self.h is None:
            self.h = self.online.zero_hidden()
        self.flat = self.online.flatten()
        a, b = self.online.tensors(), self.target.tensors()
        if a.keys() != b.keys() or any(a[k].shape != b[k].shape for k in a):
            raise ValueError("online and target networks differ in shape")

    @classmethod
    def create(
        cls, rng: np.random.Generator, state_dim: int, n_actions: int, hidden: int | None, rnn: int | None,
        lr: float, nn: NNConfig, max_unroll: int,
    ) -> PolicyBundle:
        online = QNetworkParams.init(rng, state_dim, n_actions, hidden, rnn, nn.leaky_slope)
        return cls(online, online.copy(), RMSPropState(), lr, nn.rmsprop_decay, nn.rmsprop_eps,
                   nn.huber_threshold, max_unroll)

    def reset_hidden(self) -> None:
        self.h = self.online.zero_hidden()

    def step(self, x: np.ndarray) -> np.ndarray:
        """Q-values for ``x`` given the carried hidden state, which then advances."""
        q, self.h = q_forward(x, self.h, self.online)
        return q

    def q_window(self, window: np.ndarray) -> np.ndarray:
        """Q-values at the last row of ``window``, unrolled from a zero state."""
        q, _, _ = q_forward_seq(window[:, None, :], self.online, last=1)
        return q[-1, 0]


def sync_targets(bundle: PolicyBundle, step: int, period: int) -> bool:
    if period < 1:
        raise ValueError("target sync period must be >= 1")
    if step % period == 0:
        bundle.target.assign_from(bundle.online)
        return True
    return False


# --------------------------------------------------------------------------
# Action selection


def epsilon_greedy(q: np.ndarray, mask: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    """Uniform over legal entries with probability ``eps``, else masked argmax."""
    mask = np.asarray(mask, dtype=bool)
    legal = np.flatnonzero(mask)
    if legal.size == 0:
        raise ValueError("no legal choice")
    if eps > 0.0 and rng.random() < eps:
        return int(legal[rng.integers(legal.size)])
    return int(np.argmax(np.where(mask, q, MASKED)))


def action_mask(s: LowState) -> np.ndarray:
    """Sources in the option whose stacks still hold items."""
    n = s.results.n_sources
    return np.array([j in s.option and s.remaining(j) > 0 for j in range(n)], dtype=bool)


def epsilon_at(progress: float, start: float, end: float, frac: float) -> float:
    """Linear decay from ``start`` to ``end`` over the first ``frac`` of training."""
    if frac <= 0 or progress >= frac:
        return end
    return start + (end - start) * (progress / frac)


# --------------------------------------------------------------------------
# Double-DQN targets and updates


def td_targets(
    q_next_online: np.ndarray, q_next_target: np.ndarray, rewards: np.ndarray, discounts: np.ndarray,
    terminal: np.ndarray, masks: np.ndarray,
) -> np.ndarray:
    """y = r + discount * Q_target(s', argmax_a Q_online(s', a)); y = r at terminals.

    The legality mask of s' restricts the argmax, and the evaluated entry is
    therefore always a legal one.
    """
    masks = np.asarray(masks, dtype=bool)
    safe = masks.copy()
    safe[~safe.any(axis=-1)] = True
    a = np.argmax(np.where(safe, q_next_online, MASKED), axis=-1)
    boot = q_next_target[np.arange(a.shape[0]), a]
    return np.where(terminal, rewards, rewards + discounts * np.where(terminal, 0.0, boot))


def _batch_arrays(batch):
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    terminal = np.array([t.terminal for t in batch], dtype=bool)
    masks = np.stack([t.mask_next for t in batch])
    acts = np.array([t.taken for t in batch], dtype=np.int64)
    return rewards, terminal, masks, acts


def _next_q(batch, online: QNetworkParams, target: QNetworkParams, max_unroll: int | None):
    X, M = stack_sequences([t.seq for t in batch], None if max_unroll is None else max_unroll + 1)
    q_on, _, _ = q_forward_seq(X, online, M, last=1)
    q_tg, _, _ = q_forward_seq(X, target, M, last=1)
    return q_on[-1], q_tg[-1]


def high_td_target(batch: list[HighTransition], online: QNetworkParams, target: QNetworkParams, gamma: float,
                   max_unroll: int | None = None, per_duration: bool = True) -> np.ndarray:
    """Selector targets; the discount is gamma**l for an option that lasted l slots."""
    rewards, terminal, masks, _ = _batch_arrays(batch)
    qn, qt = _next_q(batch, online, target, max_unroll)
    dur = np.array([t.duration for t in batch], dtype=np.float64)
    disc = gamma ** dur if per_duration else np.full_like(dur, gamma)
    return td_targets(qn, qt, rewards, disc, terminal, masks)


def low_td_target(batch: list[LowTransition], online: QNetworkParams, target: QNetworkParams, gamma: float,
                  max_unroll: int | None = None) -> np.ndarray:
    rewards, terminal, masks, _ = _batch_arrays(batch)
    qn, qt = _next_q(batch, online, target, max_unroll)
    return td_targets(qn, qt, rewards, np.full(len(batch), gamma), terminal, masks)


def _apply(bundle: PolicyBundle, dq: np.ndarray, cache, loss: float) -> float:
    if not math.isfinite(loss):
        log.warning("non-finite loss %r; update skipped", loss)
        return loss
    grads = q_backward_seq(dq, cache, bundle.online)
    g = np.concatenate([grads[k].ravel() for k in bundle.online.tensors()])
    rmsprop_update_flat(bundle.flat, g, bundle.opt, bundle.lr, bundle.decay, bundle.rms_eps)
    return loss


def _td_loss(bundle: PolicyBundle, batch: list, targets: np.ndarray):
    if not batch:
        raise ValueError("empty batch")
    X, M = stack_sequences([t.seq[:-1] for t in batch], bundle.max_unroll)
    q, _, cache = q_forward_seq(X, bundle.online, M, last=1)
    acts = np.array([t.taken for t in batch], dtype=np.int64)
    B = len(batch)
    idx = np.arange(B)
    loss, g = huber(q[-1, idx, acts] - np.asarray(targets), bundle.huber_threshold)
    dq = np.zeros_like(q)
    dq[-1, idx, acts] = g / B
    return float(np.mean(loss)), dq, cache


def td_loss_grad(bundle: PolicyBundle, batch: list, targets: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean Huber loss of Q(s, taken) against ``targets`` and its parameter gradient."""
    loss, dq, cache = _td_loss(bundle, batch, targets)
    return loss, q_backward_seq(dq, cache, bundle.online)


def train_step(bundle: PolicyBundle, batch: list, targets: np.ndarray) -> float:
    """One RMSProp step on the mean Huber loss of Q(s, taken) against ``targets``.

    Sequences are unrolled from a zero recurrent state.
    """
    loss, dq, cache = _td_loss(bundle, batch, targets)
    return _apply(bundle, dq, cache, loss)


def dqn_update(bundle: PolicyBundle, batch: list, discounts: np.ndarray) -> float:
    """Fused double-DQN step: targets and the loss share one online forward pass."""
    rewards, terminal, masks, acts = _batch_arrays(batch)
    X, M = stack_sequences([t.seq for t in batch], bundle.max_unroll + 1)
    q_on, _, cache = q_forward_seq(X, bundle.online, M, last=2)
    q_tg, _, _ = q_forward_seq(X, bundle.target, M, last=1)
    y = td_targets(q_on[-1], q_tg[-1], rewards, discounts, terminal, masks)
    B = len(batch)
    idx = np.arange(B)
    loss, g = huber(q_on[-2, idx, acts] - y, bundle.huber_threshold)
    dq = np.zeros_like(q_on)
    dq[-2, idx, acts] = g / B
    return _apply(bundle, dq, cache, float(np.mean(loss)))


# --------------------------------------------------------------------------
# Training curves


@dataclass
class TrainingCurves:
    high: list[tuple[int, float]] = field(default_factory=list)
    low: list[tuple[int, float]] = field(default_factory=list)
    episodes: list[tuple[int, float]] = field(default_factory=list)

    def records(self):
        for step, loss in self.high:
            yield {"step": step, "level": "high", "loss": loss}
        for step, loss in self.low:
            yield {"step": step, "level": "low", "loss": loss}
        for step, ret in self.episodes:
            yield {"step": step, "level": "episode", "return": ret}

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for rec in self.records():
                f.write(json.dumps(rec) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> TrainingCurves:
        out = cls()
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec["level"] == "episode":
                    out.episodes.append((rec["step"], rec["return"]))
                else:
                    getattr(out, rec["level"]).append((rec["step"], rec["loss"]))
        return out


class _Rows:
    """Append-only row store. Views handed out stay valid after growth."""

    def __init__(self, width: int, capacity: int = 16):
        self.buf = np.zeros((capacity, width))
        self.n = 0

    def append(self, row: np.ndarray) -> None:
        if self.n == self.buf.shape[0]:
            grown = np.zeros((2 * self.buf.shape[0], self.buf.shape[1]))
            grown[: self.n] = self.buf[: self.n]
            self.buf = grown
        self.buf[self.n] = row
        self.n += 1

    def tail(self, k: int) -> np.ndarray:
        return self.buf[max(0, self.n - k): self.n]


# --------------------------------------------------------------------------
# The agent


class HRLAgent(PagePolicy):
    name = "hrl"

    def __init__(self, cfg: Config, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.layout = FeatureLayout.from_config(cfg)
        nn, ag = cfg.nn, cfg.agent
        self.n_verticals = cfg.env.n_verticals
        init_rng = np.random.default_rng([seed, nn.init_seed_offset, 101])
        self.high = PolicyBundle.create(init_rng, self.layout.high_dim, 1 << self.n_verticals, nn.selector_hidden,
                                        nn.selector_rnn, nn.selector_lr, nn, nn.max_unroll_high)
        self.low = PolicyBundle.create(init_rng, self.layout.low_dim, 1 + self.n_verticals, nn.presenter_hidden,
                                       nn.presenter_rnn, nn.presenter_lr, nn, nn.max_unroll_low)
        self.mem_high = ReplayBuffer(ag.memory_high)
        self.mem_low = ReplayBuffer(ag.memory_low)
        self.rng = np.random.default_rng([seed, 102])
        self.curves = TrainingCurves()
        self.low_steps = 0
        self.sessions_seen = 0
        names = cfg.env.vertical_names
        self.blocked_first_page = (names.index("blog") + 1,) if ag.block_blog_first_page and "blog" in names else ()
        self._hist: _Rows | None = None
        self._latest: SourceSet | None = None
        self._sink: list | None = None
        self.last_return = 0.0

    # -- masks ------------------------------------------------------------------

    def option_mask(self, request: SearchRequest, results: SourceResults) -> np.ndarray:
        mask = option_legal_mask(results, request.page_number, self.blocked_first_page)
        if not mask.any():
            mask[0] = True  # core-only fallback
        return mask

    # -- decisions --------------------------------------------------------------

    def select_option(self, window: np.ndarray, eps: float, mask: np.ndarray) -> SourceSet:
        q = self.high.q_window(window)
        return SourceSet(epsilon_greedy(q, mask, eps, self.rng), self.n_verticals)

    def select_action(self, x: np.ndarray, eps: float, mask: np.ndarray) -> int:
        return epsilon_greedy(self.low.step(x), mask, eps, self.rng)

    def _high_state(self, request, results) -> np.ndarray:
        return self.layout.featurize_high(HighState(request, results, self._latest))

    # -- evaluation path (no learning) -------------------------------------------

    def reset(self) -> None:
        self._hist = _Rows(self.layout.high_dim)
        self._latest = None

    def choose_option(self, request: SearchRequest, results: SourceResults) -> SourceSet:
        """Greedy option for the next page of the session begun by :meth:`reset`."""
        self._hist.append(self._high_state(request, results))
        mask = self.option_mask(request, results)
        option = self.select_option(self._hist.tail(self.high.max_unroll), 0.0, mask)
        self._latest = option
        return option

    def compose(self, request: SearchRequest, results: SourceResults):
        option = self.choose_option(request, results)
        actions = self.present_actions(request, results, option, 0.0)
        return fill_by_actions(results, actions), option.mask, actions

    def present_actions(self, request, results, option: SourceSet, eps: float) -> list[int]:
        l = slot_count(option, results)
        req_vec = self.layout.request_vector(request)
        self.low.reset_hidden()
        popped = [0] * results.n_sources
        last = None
        actions = []
        for t in range(l):
            s = LowState(request, results, option, tuple(popped), last, t, l)
            a = self.select_action(self.layout.featurize_low(s, req_vec), eps, action_mask(s))
            popped[a] += 1
            last = a
            actions.append(a)
        return actions

    # -- learning path ------------------------------------------------------------

    def _learn(self, level: str) -> None:
        ag = self.cfg.agent
        if level == "high":
            bundle, mem, period, curve = self.high, self.mem_high, ag.target_period_high, self.curves.high
        else:
            bundle, mem, period, curve = self.low, self.mem_low, ag.target_period_low, self.curves.low
        if not mem.ready(ag.batch_size):
            return
        batch = mem.sample(ag.batch_size, self.rng)
        if level == "high" and ag.strategy == "i":
            disc = ag.gamma ** np.array([t.duration for t in batch], dtype=np.float64)
        else:
            disc = np.full(len(batch), ag.gamma)
        loss = dqn_update(bundle, batch, disc)
        bundle.updates += 1
        sync_targets(bundle, bundle.updates, period)
        curve.append((bundle.updates, loss))

    def _store(self, tr: HighTransition | LowTransition) -> None:
        """Push one transition and run the gradient steps it triggers (or hand
        it to the rollout sink when this agent is an inference-only copy)."""
        if self._sink is not None:
            self._sink.append(tr)
            return
        ag = self.cfg.agent
        if isinstance(tr, HighTransition):
            self.mem_high.push(tr)
            if ag.train_high:
                self._learn("high")
        else:
            self.mem_low.push(tr)
            self.low_steps += 1
            if ag.train_low and self.low_steps % ag.low_update_every == 0:
                self._learn("low")

    def absorb(self, transitions: list, episode_return: float) -> None:
        """Replay transitions collected by a rollout copy, in order, on the trainer."""
        for tr in transitions:
            self._store(tr)
        self.curves.episodes.append((self.sessions_seen, episode_return))
        self.sessions_seen += 1

    def execute_option(self, session: Session, option: SourceSet, eps: float, learn: bool):
        """Fill one page slot by slot. Returns ``(page, feedback, actions, intrinsic rewards)``."""
        ag = self.cfg.agent
        request, results = session.request, session.results
        l = slot_count(option, results)
        if l == 0:
            return Page(()), UserFeedback(()), [], []
        req_vec = self.layout.request_vector(request)
        rows = np.zeros((l + 1, self.layout.low_dim))
        self.low.reset_hidden()
        popped = [0] * results.n_sources
        last = None
        actions, slots, fbs, rs = [], [], [], []
        engaged = False
        pending = None
        for t in range(l + 1):
            if t < l:
                s = LowState(request, results, option, tuple(popped), last, t, l)
                rows[t] = self.layout.featurize_low(s, req_vec)
                amask = action_mask(s)
            if pending is not None and learn:
                a_prev, r_prev = pending
                terminal = t == l
                self._store(LowTransition(
                    rows[: t + 1], option.mask, a_prev, r_prev, terminal,
                    np.ones(results.n_sources, dtype=bool) if terminal else amask,
                ))
            if t == l:
                break
            a = self.select_action(rows[t], eps, amask)
            item = results.stacks[a][popped[a]]
            popped[a] += 1
            last = a
            fb = session.respond(item, t + 1)
            engaged = engaged or fb.click == 1 or fb.pay > 0
            r = intrinsic_reward(fb, ag.reward_lambda, ag.reward_delta)
            if t == l - 1 and not engaged:
                r += ag.no_click_penalty
            actions.append(a)
            slots.append((t + 1, item))
            fbs.append(fb)
            rs.append(r)
            pending = (a, r)
        return Page(tuple(slots)), UserFeedback(tuple(fbs)), actions, rs

    def run_session(self, session: Session, eps_high: float, eps_low: float, learn: bool = True) -> SessionLog:
        ag = self.cfg.agent
        U = self.high.max_unroll
        self._latest = None
        hist = _Rows(self.layout.high_dim)
        hist.append(self._high_state(session.request, session.results))
        slog = SessionLog(session.session_id, session.user.user_id, [float(v) for v in session.query], [], self.name)
        ret = 0.0
        while True:
            request, results = session.request, session.results
            mask = self.option_mask(request, results)
            option = self.select_option(hist.tail(U), eps_high, mask)
            page, feedback, actions, rs = self.execute_option(session, option, eps_low, learn)
            if page.length == 0:
                go_on = session.skip_page()
                if go_on:
                    hist.append(self._high_state(session.request, session.results))
                    continue
                break
            slog.pages.append(page_log(request, results, page, feedback, option.mask, actions))
            r_e = extrinsic_reward(rs, ag.gamma if ag.strategy == "i" else 1.0)
            ret += r_e
            go_on = session.finish_page(page, feedback)
            self._latest = option
            if go_on:
                hist.append(self._high_state(session.request, session.results))
                seq = hist.tail(U + 1)
                mask_next = self.option_mask(session.request, session.results)
            else:
                seq = np.vstack([hist.tail(U), np.zeros((1, self.layout.high_dim))])
                mask_next = np.ones(1 << self.n_verticals, dtype=bool)
            if learn:
                self._store(HighTransition(seq, option.mask, r_e, page.length, not go_on, mask_next))
            if not go_on:
                break
        self.last_return = ret
        if learn and self._sink is None:
            self.curves.episodes.append((self.sessions_seen, ret))
            self.sessions_seen += 1
        return slog


def run_training(sim, cfg: Config, budget: int, seed: int = 0, agent: HRLAgent | None = None,
                 eps_start: float | None = None, session_offset: int = 0, collect_logs: bool = False,
                 workers: int = 1):
    """Train for ``budget`` sessions. Returns ``(agent, curves, logs)``.

    With ``workers > 1`` sessions are rolled out in rounds by inference-only
    copies in worker processes; every gradient step still runs here, in the
    order the transitions arrive. That mode is not bit-reproducible.
    """
    ag = cfg.agent
    if agent is None:
        agent = HRLAgent(cfg, seed)
    start = ag.eps_start if eps_start is None else eps_start
    logs = []
    if workers > 1:
        return _run_parallel(sim, cfg, budget, seed, agent, start, session_offset, collect_logs, workers)
    for i in range(budget):
        eps = epsilon_at(i / max(budget, 1), start, ag.eps_end, ag.eps_decay_frac)
        session = sim.new_session(session_offset + i)
        slog = agent.run_session(session, eps, eps, learn=True)
        if collect_logs:
            logs.append(slog)
        if (i + 1) % 500 == 0:
            log.info("session %d/%d eps=%.3f high_updates=%d low_updates=%d", i + 1, budget, eps,
                     agent.high.updates, agent.low.updates)
    return agent, agent.curves, logs


_WORKER: tuple | None = None


def _init_worker(cfg: Config, sim_seed: int, seed: int) -> None:
    from .sim import SearchSimulator

    global _WORKER
    _WORKER = (HRLAgent(cfg, seed), SearchSimulator(cfg.env, sim_seed))


def _rollout(weights: dict, eps: float, index: int, seed: int):
    agent, sim = _WORKER
    agent.high.online.assign_from(weights["high"])
    agent.low.online.assign_from(weights["low"])
    agent.rng = np.random.default_rng([seed, 104, index])
    agent._sink = []
    slog = agent.run_session(sim.new_session(index), eps, eps, learn=True)
    return agent._sink, agent.last_return, slog


def _run_parallel(sim, cfg, budget, seed, agent, start, session_offset, collect_logs, workers):
    from concurrent.futures import ProcessPoolExecutor

    ag = cfg.agent
    logs = []
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(cfg, sim.seed, seed)) as pool:
        for r0 in range(0, budget, workers):
            weights = {"high": agent.high.online.copy(), "low": agent.low.online.copy()}
            idx = range(r0, min(r0 + workers, budget))
            futs = [pool.submit(_rollout, weights, epsilon_at(i / budget, start, ag.eps_end, ag.eps_decay_frac),
                                session_offset + i, seed) for i in idx]
            for f in futs:
                transitions, ret, slog = f.result()
                agent.absorb(transitions, ret)
                if collect_logs:
                    logs.append(slog)
    return agent, agent.curves, logs
