"""Behavioral-cloning warm start for both Q networks from logged sessions.

Each logged decision contributes a Huber regression of Q(s, a_logged) onto
the logged Monte-Carlo return plus a large-margin hinge that pushes every
other legal action at least ``margin`` below the logged one. The hinge is
what makes the greedy policy reproduce the log; the regression keeps the
Q scale meaningful for the online phase that follows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .agent import HRLAgent, PolicyBundle, action_mask
from .nn import huber, rmsprop_update_flat
from .qnet import MASKED, q_backward_seq, q_forward_seq
from .replay import stack_sequences
from .rewards import extrinsic_reward, page_intrinsics
from .sim import Catalog
from .types import HighState, LowState, SearchRequest, SessionLog, SlotFeedback, SourceResults, SourceSet

log = logging.getLogger(__name__)


@dataclass
class Episode:
    """One decision sequence: states, taken actions, returns, legality masks."""

    x: np.ndarray  # (T, dim)
    acts: np.ndarray  # (T,)
    returns: np.ndarray  # (T,)
    masks: np.ndarray  # (T, n)


def results_from_ids(candidates: list[list[int]], catalog: Catalog) -> SourceResults:
    return SourceResults(tuple(tuple(catalog.item(i, r) for r, i in enumerate(ids)) for ids in candidates))


def _check_logged(slog: SessionLog) -> None:
    for p in slog.pages:
        if p.option is None or p.actions is None:
            raise ValueError(f"session {slog.session_id} page {p.page_number} lacks logged option/actions")
        if len(p.actions) != len(p.slots):
            raise ValueError(f"session {slog.session_id} page {p.page_number}: {len(p.actions)} actions "
                             f"for {len(p.slots)} slots")


def session_episodes(agent: HRLAgent, slog: SessionLog, catalog: Catalog) -> tuple[Episode, list[Episode]]:
    """Rebuild featurized states of one logged session for both levels."""
    _check_logged(slog)
    ag = agent.cfg.agent
    layout = agent.layout
    n_v = agent.n_verticals
    gamma_e = ag.gamma if ag.strategy == "i" else 1.0
    hx, hacts, hmasks, r_e, durs = [], [], [], [], []
    lows: list[Episode] = []
    latest = None
    query = np.asarray(slog.query, dtype=np.float64)
    for p in slog.pages:
        req = SearchRequest(f"{slog.session_id}/{p.page_number}", slog.user_id, query,
                            np.asarray(p.user_features, dtype=np.float64), p.page_number)
        res = results_from_ids(p.candidates, catalog)
        hx.append(layout.featurize_high(HighState(req, res, latest)))
        hmasks.append(agent.option_mask(req, res))
        hacts.append(p.option)
        option = SourceSet(p.option, n_v)
        latest = option
        fbs = [SlotFeedback(s.click, s.pay, s.dwell_ms, s.examined) for s in p.slots]
        rs = page_intrinsics(fbs, ag.reward_lambda, ag.reward_delta, ag.no_click_penalty)
        r_e.append(extrinsic_reward(rs, gamma_e))
        durs.append(len(rs))
        l = len(p.actions)
        req_vec = layout.request_vector(req)
        lx = np.zeros((l, layout.low_dim))
        lm = np.zeros((l, n_v + 1), dtype=bool)
        popped = [0] * res.n_sources
        last = None
        for t, a in enumerate(p.actions):
            s = LowState(req, res, option, tuple(popped), last, t, l)
            lx[t] = layout.featurize_low(s, req_vec)
            lm[t] = action_mask(s)
            if not lm[t, a]:
                raise ValueError(f"session {slog.session_id} page {p.page_number}: logged action {a} is illegal")
            popped[a] += 1
            last = a
        g = np.zeros(l)
        acc = 0.0
        for t in range(l - 1, -1, -1):
            acc = rs[t] + ag.gamma * acc
            g[t] = acc
        lows.append(Episode(lx, np.asarray(p.actions, dtype=np.int64), g, lm))
    G = np.zeros(len(r_e))
    acc = 0.0
    for t in range(len(r_e) - 1, -1, -1):
        disc = ag.gamma ** durs[t] if ag.strategy == "i" else ag.gamma
        acc = r_e[t] + disc * acc
        G[t] = acc
    high = Episode(np.array(hx), np.asarray(hacts, dtype=np.int64), G, np.array(hmasks))
    return high, lows


def _chunks(ep: Episode, size: int) -> list[Episode]:
    T = ep.x.shape[0]
    return [Episode(ep.x[i:i + size], ep.acts[i:i + size], ep.returns[i:i + size], ep.masks[i:i + size])
            for i in range(0, T, size)]


def _right_align(rows: list[np.ndarray], T: int, fill=0):
    out = np.full((T, len(rows)) + rows[0].shape[1:], fill, dtype=rows[0].dtype)
    for b, r in enumerate(rows):
        out[T - r.shape[0]:, b] = r
    return out


def bc_loss_grad(bundle: PolicyBundle, eps: list[Episode], margin: float, weight: float):
    """Mean per-decision loss over a batch of episodes and dL/dQ."""
    X, M = stack_sequences([e.x for e in eps])
    T, B = M.shape
    acts = _right_align([e.acts for e in eps], T)
    G = _right_align([e.returns for e in eps], T)
    masks = _right_align([e.masks for e in eps], T, fill=True)
    q, _, cache = q_forward_seq(X, bundle.online, M)
    valid = M > 0
    n = max(int(valid.sum()), 1)
    tt, bb = np.nonzero(valid)
    aa = acts[tt, bb]
    q_sa = q[tt, bb, aa]
    reg, g_reg = huber(q_sa - G[tt, bb], bundle.huber_threshold)
    others = masks[tt, bb].copy()
    others[np.arange(aa.size), aa] = False
    has_other = others.any(axis=1)
    q_other = np.where(others, q[tt, bb], MASKED)
    best = np.argmax(q_other, axis=1)
    gap = np.where(has_other, q_other[np.arange(aa.size), best] + margin - q_sa, 0.0)
    active = gap > 0
    loss = (reg.sum() + weight * gap[active].sum()) / n
    dq = np.zeros_like(q)
    np.add.at(dq, (tt, bb, aa), g_reg / n)
    act_idx = np.flatnonzero(active)
    np.add.at(dq, (tt[act_idx], bb[act_idx], best[act_idx]), weight / n)
    np.add.at(dq, (tt[act_idx], bb[act_idx], aa[act_idx]), -weight / n)
    return float(loss), dq, cache


def bc_fit(bundle: PolicyBundle, episodes: list[Episode], epochs: int, batch: int, lr: float,
           rng: np.random.Generator, margin: float, weight: float) -> list[float]:
    losses = []
    if not episodes:
        return losses
    for _ in range(epochs):
        order = rng.permutation(len(episodes))
        for i in range(0, len(order), batch):
            chunk = [episodes[k] for k in order[i:i + batch]]
            loss, dq, cache = bc_loss_grad(bundle, chunk, margin, weight)
            grads = q_backward_seq(dq, cache, bundle.online)
            g = np.concatenate([grads[k].ravel() for k in bundle.online.tensors()])
            rmsprop_update_flat(bundle.flat, g, bundle.opt, lr, bundle.decay, bundle.rms_eps)
            losses.append(loss)
    bundle.target.assign_from(bundle.online)
    return losses


def build_episodes(agent: HRLAgent, logs: list[SessionLog], catalog: Catalog):
    highs, lows = [], []
    for slog in logs:
        h, ls = session_episodes(agent, slog, catalog)
        highs.extend(_chunks(h, agent.high.max_unroll))
        lows.extend(ls)
    return highs, lows


def bc_pretrain(agent: HRLAgent, logs: list[SessionLog], catalog: Catalog, epochs: int | None = None,
                seed: int = 0) -> dict[str, list[float]]:
    """Warm-start both networks from logged decisions. Empty logs change nothing."""
    ag = agent.cfg.agent
    epochs = ag.bc_epochs if epochs is None else epochs
    if not logs:
        return {"high": [], "low": []}
    highs, lows = build_episodes(agent, logs, catalog)
    rng = np.random.default_rng([seed, 103])
    scale = ag.bc_lr_scale
    out = {
        "high": bc_fit(agent.high, highs, epochs, ag.batch_size, agent.high.lr * scale, rng,
                       ag.bc_margin, ag.bc_margin_weight),
        "low": bc_fit(agent.low, lows, epochs, ag.batch_size, agent.low.lr * scale, rng,
                      ag.bc_margin, ag.bc_margin_weight),
    }
    log.info("behavioral cloning: %d selector windows, %d presenter pages, %d epochs", len(highs), len(lows), epochs)
    return out


def agreement(agent: HRLAgent, logs: list[SessionLog], catalog: Catalog) -> dict[str, float]:
    """Greedy top-1 agreement with logged choices, over decisions with at least two legal choices."""
    hit = {"high": 0, "low": 0}
    tot = {"high": 0, "low": 0}
    U = agent.high.max_unroll
    for slog in logs:
        h, ls = session_episodes(agent, slog, catalog)
        for t in range(h.x.shape[0]):
            if h.masks[t].sum() < 2:
                continue
            q = agent.high.q_window(h.x[max(0, t + 1 - U): t + 1])
            tot["high"] += 1
            hit["high"] += int(np.argmax(np.where(h.masks[t], q, MASKED)) == h.acts[t])
        for ep in ls:
            q, _, _ = q_forward_seq(ep.x[:, None, :], agent.low.online)
            q = q[:, 0]
            for t in range(ep.x.shape[0]):
                if ep.masks[t].sum() < 2:
                    continue
                tot["low"] += 1
                hit["low"] += int(np.argmax(np.where(ep.masks[t], q[t], MASKED)) == ep.acts[t])
    n = tot["high"] + tot["low"]
    return {
        "high": hit["high"] / tot["high"] if tot["high"] else float("nan"),
        "low": hit["low"] / tot["low"] if tot["low"] else float("nan"),
        "overall": (hit["high"] + hit["low"]) / n if n else float("nan"),
        "decisions": float(n),
    }
