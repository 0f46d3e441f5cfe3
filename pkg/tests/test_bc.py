from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from agghrl.agent import HRLAgent
from agghrl.baselines import RulePolicy
from agghrl.bc import agreement, bc_pretrain, session_episodes
from agghrl.config import Config
from agghrl.sim import SearchSimulator


def _rule_logs(n, seed=0, offset=0):
    cfg = Config()
    sim = SearchSimulator(cfg.env, seed)
    pol = RulePolicy()
    return cfg, sim, [pol.play(sim.new_session(offset + i)) for i in range(n)]


def test_empty_logs_leave_weights_unchanged():
    cfg, sim, _ = _rule_logs(0)
    agent = HRLAgent(cfg, 0)
    before = agent.high.flat.copy(), agent.low.flat.copy()
    assert bc_pretrain(agent, [], sim.catalog) == {"high": [], "low": []}
    assert np.array_equal(agent.high.flat, before[0]) and np.array_equal(agent.low.flat, before[1])


def test_missing_logged_actions_raise():
    cfg, sim, logs = _rule_logs(3)
    page = logs[0].pages[0]
    logs[0].pages[0] = dataclasses.replace(page, actions=None)
    with pytest.raises(ValueError, match="lacks logged"):
        bc_pretrain(HRLAgent(cfg, 0), logs, sim.catalog)


def test_wrong_action_count_raises():
    cfg, sim, logs = _rule_logs(2)
    page = logs[0].pages[0]
    logs[0].pages[0] = dataclasses.replace(page, actions=list(page.actions)[:-1])
    with pytest.raises(ValueError):
        session_episodes(HRLAgent(cfg, 0), logs[0], sim.catalog)


def test_episodes_match_log_shape():
    cfg, sim, logs = _rule_logs(4)
    agent = HRLAgent(cfg, 0)
    for slog in logs:
        high, lows = session_episodes(agent, slog, sim.catalog)
        assert high.x.shape[0] == len(slog.pages) == len(lows)
        for ep, page in zip(lows, slog.pages):
            assert list(ep.acts) == list(page.actions)
            assert all(ep.masks[t][a] for t, a in enumerate(ep.acts))


def test_pretraining_raises_agreement_with_logging_policy():
    cfg, sim, logs = _rule_logs(240, seed=1)
    train, held = logs[:200], logs[200:]
    agent = HRLAgent(cfg, 3)
    before = agreement(agent, held, sim.catalog)
    losses = bc_pretrain(agent, train, sim.catalog, epochs=2, seed=0)
    after = agreement(agent, held, sim.catalog)
    assert losses["high"] and losses["low"]
    assert after["decisions"] == before["decisions"] > 0
    assert after["overall"] > before["overall"]
    assert after["overall"] >= 0.8


def test_pretraining_is_deterministic():
    cfg, sim, logs = _rule_logs(30)
    a, b = HRLAgent(cfg, 0), HRLAgent(cfg, 0)
    bc_pretrain(a, logs, sim.catalog, epochs=1, seed=5)
    bc_pretrain(b, logs, sim.catalog, epochs=1, seed=5)
    assert a.high.flat.tobytes() == b.high.flat.tobytes()
    assert a.low.flat.tobytes() == b.low.flat.tobytes()
