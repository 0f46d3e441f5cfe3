"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""

from __future__ import annotations

import copy
import math
import time

import numpy as np
import pytest

from agghrl.agent import (
    HRLAgent,
    PolicyBundle,
    dqn_update,
    high_td_target,
    low_td_target,
    run_training,
    sync_targets,
)
from agghrl.baselines import RulePolicy, train_flat
from agghrl.bc import agreement, bc_pretrain
from agghrl.cli import main, smooth
from agghrl.config import Config
from agghrl.features import slot_count
from agghrl.metrics import ab_test
from agghrl.nn import finite_diff_check
from agghrl.qnet import QNetworkParams, dueling_combine, q_backward_seq, q_forward_seq
from agghrl.replay import HighTransition, LowTransition
from agghrl.rewards import extrinsic_reward, intrinsic_reward
from agghrl.sim import SearchSimulator
from agghrl.types import SlotFeedback

from conftest import const_q_net


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")

    return emit


# 1 ---------------------------------------------------------------------------


def test_formula_exactness(report):
    t0 = time.perf_counter()
    err = 0.0

    def close(got, want):
        nonlocal err
        err = max(err, float(np.max(np.abs(np.asarray(got, dtype=float) - np.asarray(want, dtype=float)))))

    close(extrinsic_reward([1, -1, 1], 0.95), 0.3175)
    close(extrinsic_reward([0.7], 0.95), 0.7)
    close(extrinsic_reward([0.0, 0.0, 0.0], 0.95), 0.0)
    close(intrinsic_reward(SlotFeedback(1)), 0.3)
    close(intrinsic_reward(SlotFeedback(1, pay=math.e - 1)), 1.0)
    close(intrinsic_reward(SlotFeedback(1, pay=1000.0)), 2.4)
    close(dueling_combine(0.0, np.zeros(3)), [0.0, 0.0, 0.0])
    close(dueling_combine(-0.5, np.array([1.0, 2.0, 3.0])), [-1.5, -0.5, 0.5])
    on, tg = const_q_net(3, [0.2, 0.5]), const_q_net(3, [0.3, 0.4])
    hi = [HighTransition(np.zeros((2, 3)), 0, 1.0, 2, False, np.ones(2, bool)),
          HighTransition(np.zeros((2, 3)), 0, 1.0, 2, True, np.ones(2, bool))]
    close(high_td_target(hi, on, tg, 0.95), [1.361, 1.0])
    close(high_td_target(hi[:1], on, tg, 0.0), [1.0])
    on, tg = const_q_net(3, [0.1, 0.9, 0.3]), const_q_net(3, [0.5, 0.2, 9.9])
    lo = [LowTransition(np.zeros((2, 3)), 3, 0, 0.0, False, np.array([True, True, False])),
          LowTransition(np.zeros((2, 3)), 3, 0, 0.3, True, np.ones(3, bool))]
    close(low_td_target(lo, on, tg, 0.95), [0.19, 0.3])
    close(low_td_target(lo[:1], on, tg, 0.0), [0.0])
    dt = time.perf_counter() - t0
    ok = err <= 1e-12 and dt < 1.0
    report(1, ok, f"max abs error {err:.2e}, {dt:.3f}s")
    assert ok


# 2 ---------------------------------------------------------------------------


def _q_grad_error(seed: int, state_dim: int, n: int, hidden: int, rnn: int) -> float:
    rng = np.random.default_rng(seed)
    net = QNetworkParams.init(rng, state_dim, n, hidden, rnn)
    x = rng.normal(size=(3, 2, state_dim))
    c = rng.normal(size=(3, 2, n))

    def f():
        return float(np.sum(c * q_forward_seq(x, net)[0]))

    _, _, cache = q_forward_seq(x, net)
    return finite_diff_check(f, net.tensors(), q_backward_seq(c, cache, net), sample=24, rng=rng)


def test_gradient_fidelity(report):
    nn = Config().nn
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        worst = max(worst, _q_grad_error(seed, 48, 4, nn.selector_hidden, nn.selector_rnn),
                    _q_grad_error(seed, 56, 3, nn.presenter_hidden, nn.presenter_rnn))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and dt < 60
    report(2, ok, f"max relative error {worst:.2e} over 100 seeds x 2 shapes (24 entries per tensor), {dt:.1f}s")
    assert ok


# 3 ---------------------------------------------------------------------------

NEXT = np.array([[1, 2], [2, 0], [0, 2]])
REWARD = np.array([[0.0, 1.0], [2.0, 0.0], [0.5, -1.0]])
GAMMA = 0.5


def _value_iteration(tol: float = 1e-14) -> np.ndarray:
    q = np.zeros((3, 2))
    while True:
        nxt = REWARD + GAMMA * q[NEXT].max(axis=-1)
        if np.max(np.abs(nxt - q)) < tol:
            return nxt
        q = nxt


def test_tabular_oracle_equivalence(report):
    t0 = time.perf_counter()
    oracle = _value_iteration()
    bundle = PolicyBundle.create(np.random.default_rng(0), 3, 2, None, None, 0.02, Config().nn, 1)
    bundle.huber_threshold = 100.0
    eye = np.eye(3)
    batch = [HighTransition(np.stack([eye[s], eye[NEXT[s, a]]]), a, REWARD[s, a], 1, False, np.ones(2, bool))
             for s in range(3) for a in range(2)]
    steps = 10_000
    for k in range(1, steps + 1):
        bundle.lr = 0.02 * (1 - k / (steps + 1)) + 1e-4
        dqn_update(bundle, batch, np.full(len(batch), GAMMA))
        sync_targets(bundle, k, 10)
    learned = np.array([bundle.q_window(eye[s][None]) for s in range(3)])
    err = float(np.max(np.abs(learned - oracle)))
    dt = time.perf_counter() - t0
    ok = err <= 1e-2 and dt < 10
    report(3, ok, f"max-norm error to value iteration {err:.2e} after {steps} steps, {dt:.1f}s")
    assert ok


# 4 ---------------------------------------------------------------------------


def test_slot_filling_invariants(report):
    cfg = Config()
    sim = SearchSimulator(cfg.env, seed=11)
    agent = HRLAgent(cfg, 11)
    t0 = time.perf_counter()
    violations: list[str] = []
    rollouts = 0
    session_no = 0
    while rollouts < 1000:
        session = sim.new_session(session_no)
        session_no += 1
        while rollouts < 1000:
            req, res = session.request, session.results
            mask = agent.option_mask(req, res)
            option = agent.select_option(agent._high_state(req, res)[None, :], 1.0, mask)
            if not mask[option.mask]:
                violations.append("illegal option")
            agent._sink = []
            page, fb, actions, rs = agent.execute_option(session, option, 1.0, learn=True)
            trs = agent._sink
            agent._sink = None
            rollouts += 1
            l = slot_count(option, res)
            if page.length != l or len(trs) != l:
                violations.append("length")
            ids = [it.item_id for _, it in page.slots]
            if len(set(ids)) != len(ids):
                violations.append("duplicate")
            for j in range(res.n_sources):
                shown = [it.item_id for _, it in page.slots if it.source == j]
                if shown != [it.item_id for it in res.stacks[j][: len(shown)]]:
                    violations.append("order")
                if shown and j not in option:
                    violations.append("mask")
            if l and (not trs[-1].terminal or any(t.terminal for t in trs[:-1])):
                violations.append("terminal")
            go_on = session.skip_page() if page.length == 0 else session.finish_page(page, fb)
            if not go_on:
                break
    dt = time.perf_counter() - t0
    ok = not violations and dt < 30
    report(4, ok, f"{rollouts} option rollouts, {len(violations)} violations, {dt:.1f}s")
    assert ok


# 5 ---------------------------------------------------------------------------


def _selector_loss_curve(strategy: str, iterations: int, seed: int) -> np.ndarray:
    cfg = Config()
    cfg.agent.strategy = strategy
    cfg.agent.train_low = False
    sim = SearchSimulator(cfg.env, seed)
    agent = HRLAgent(cfg, seed)
    i = 0
    while agent.high.updates < iterations:
        agent.run_session(sim.new_session(i), 0.1, 0.1, learn=True)
        i += 1
    return np.array([loss for _, loss in agent.curves.high[:iterations]])


def test_strategy_comparison(report):
    t0 = time.perf_counter()
    iterations = 50_000
    curves = {s: smooth(_selector_loss_curve(s, iterations, 0), 1000) for s in ("i", "ii")}
    ratio = curves["ii"][-1] / curves["i"][-1]
    tail = curves["ii"][int(0.8 * iterations):]
    slope = float(np.polyfit(np.arange(tail.size), tail, 1)[0])
    dt = time.perf_counter() - t0
    ok = (ratio >= 10.0 or slope >= 0.0) and dt < 20 * 60
    report(5, ok, f"final smoothed loss ratio II/I {ratio:.2f}, II tail slope {slope:.3g}, {dt:.0f}s")
    assert ok


# 6 and 7 ---------------------------------------------------------------------

SEEDS = range(5)


@pytest.fixture(scope="module")
def directional_runs():
    """Train HRL and flat RL per seed, then a paired A/B test against the rule."""
    out = []
    t0 = time.perf_counter()
    for seed in SEEDS:
        cfg = Config()
        cfg.agent.low_update_every = 4
        sim = SearchSimulator(cfg.env, seed=seed)
        hrl, _, _ = run_training(sim, cfg, 1000, seed=seed)
        flat = train_flat(sim, cfg, 1000, seed=seed)
        res = ab_test({"rule": RulePolicy(), "flat": flat, "hrl": hrl}, sim, 1500, baseline="rule",
                      traffic_seed=10_000 + seed, common_responses=True)
        out.append(res)
    return out, time.perf_counter() - t0


def test_directional_ctr_ordering(report, directional_runs):
    runs, dt = directional_runs
    med = {p: float(np.median([r.value(p, "verticals", "CTR") for r in runs])) for p in ("rule", "flat", "hrl")}
    gain = med["hrl"] / med["rule"] - 1.0
    ok = med["hrl"] > med["flat"] > med["rule"] and gain >= 0.10 and dt < 60 * 60
    report(6, ok, f"median vertical CTR hrl {med['hrl']:.4f} flat {med['flat']:.4f} rule {med['rule']:.4f}, "
                  f"hrl gain {gain:+.1%}, {dt:.0f}s")
    assert ok


def test_directional_core_gmv(report, directional_runs):
    runs, _ = directional_runs
    hrl = float(np.median([r.gain_of("hrl", "product", "GMV") for r in runs]))
    flat = float(np.median([r.gain_of("flat", "product", "GMV") for r in runs]))
    ok = hrl >= -0.01
    report(7, ok, f"median core GMV gain vs rule: hrl {hrl:+.2%}, flat {flat:+.2%}")
    assert ok


# 8 ---------------------------------------------------------------------------


def test_behavioral_cloning(report):
    t0 = time.perf_counter()
    cfg = Config()
    sim = SearchSimulator(cfg.env, seed=0)
    rule = RulePolicy()
    logs = [rule.play(sim.new_session(1_000_000 + i)) for i in range(11_000)]
    train, held = logs[:10_000], logs[10_000:]
    pretrained = HRLAgent(cfg, 0)
    bc_pretrain(pretrained, train, sim.catalog, seed=0)
    agree = agreement(pretrained, held, sim.catalog)["overall"]
    pairs = []
    for seed in SEEDS:
        untrained = HRLAgent(cfg, 100 + seed)
        res = ab_test({"untrained": untrained, "pretrained": copy.deepcopy(pretrained)}, sim, 1000,
                      baseline="untrained", traffic_seed=20_000 + seed, common_responses=True)
        a, b = res.value("pretrained", "all", "CTR"), res.value("untrained", "all", "CTR")
        pairs.append((a, b))
    diff = float(np.median([a - b for a, b in pairs]))
    dt = time.perf_counter() - t0
    ok = agree >= 0.8 and diff >= 0.0 and dt < 10 * 60
    detail = ", ".join(f"{a:.4f}/{b:.4f}" for a, b in pairs)
    report(8, ok, f"held-out agreement {agree:.3f}; CTR pretrained/untrained {detail}; "
                  f"median paired difference {diff:+.4f}; {dt:.0f}s")
    assert ok


# 9 ---------------------------------------------------------------------------


def test_train_determinism(report, tmp_path):
    t0 = time.perf_counter()
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--out", str(out), "--sessions", "40", "--seed", "5", "--workers", "1"]) == 0
        outs.append(out)
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in ("weights.aggh", "curves.jsonl"))
    dt = time.perf_counter() - t0
    ok = same and dt < 5 * 60
    report(9, ok, f"weights and curves byte-identical: {same}, {dt:.0f}s")
    assert ok


# 10 --------------------------------------------------------------------------


def test_aa_soundness(report):
    t0 = time.perf_counter()
    cfg = Config()
    sim = SearchSimulator(cfg.env, seed=0)
    res = ab_test({"a": RulePolicy(), "b": RulePolicy()}, sim, 10_000, baseline="a", traffic_seed=3)
    gains = {(r.source, r.metric): r.gain for r in res.rows if r.policy == "b" and r.gain is not None}
    worst = max(gains, key=lambda k: abs(gains[k]))
    paired = ab_test({"a": RulePolicy(), "b": RulePolicy()}, sim, 500, baseline="a", traffic_seed=3,
                     common_responses=True)
    paired_worst = max(abs(r.gain) for r in paired.rows if r.policy == "b" and r.gain is not None)
    dt = time.perf_counter() - t0
    ok = abs(gains[worst]) < 0.02 and dt < 5 * 60
    report(10, ok, f"{len(gains)} metrics over 2 x 10000 sessions, independent responses: largest |gain| "
                   f"{abs(gains[worst]):.2%} ({worst[0]} {worst[1]}); paired responses: {paired_worst:.2%}; {dt:.0f}s")
    assert ok
