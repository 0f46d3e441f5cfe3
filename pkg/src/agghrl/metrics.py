"""Online metrics over session logs and the bucket-testing harness."""

from __future__ import annotations

import hashlib
from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np

from .policy import PagePolicy
from .sim import SearchSimulator
from .types import SessionLog, SlotRecord


def _slots(logs: Iterable[SessionLog], sources) -> Iterable[SlotRecord]:
    src = {sources} if isinstance(sources, int) else set(sources)
    for slog in logs:
        for p in slog.pages:
            for s in p.slots:
                if s.source in src:
                    yield s


def ctr(logs: Iterable[SessionLog], vertical, mode: str = "impression") -> float | None:
    """Clicked impressions over viewed impressions of ``vertical`` (an id or a
    collection of ids). Viewed means shown, or examined when ``mode='examination'``.
    None when nothing was viewed."""
    if mode not in ("impression", "examination"):
        raise ValueError(f"unknown ctr mode {mode!r}")
    views = clicks = 0
    for s in _slots(logs, vertical):
        if mode == "examination" and not s.examined:
            continue
        views += 1
        clicks += s.click == 1
    return clicks / views if views else None


def adt(logs: Iterable[SessionLog], vertical) -> float | None:
    """Mean dwell in seconds over clicked impressions; None without clicks."""
    dwell = [s.dwell_ms for s in _slots(logs, vertical) if s.click == 1]
    return float(np.mean(dwell)) / 1000.0 if dwell else None


def cov(logs: Iterable[SessionLog], vertical) -> float:
    """Share of all displayed slots taken by ``vertical``."""
    src = {vertical} if isinstance(vertical, int) else set(vertical)
    total = mine = 0
    for slog in logs:
        for p in slog.pages:
            total += len(p.slots)
            mine += sum(1 for s in p.slots if s.source in src)
    return mine / total if total else 0.0


def gmv(logs: Iterable[SessionLog], source) -> float:
    return float(sum(s.pay for s in _slots(logs, source) if s.click == 1))


def bucket_assign(user_id, n_buckets: int) -> int:
    """Stable hash bucket of a user id (independent of process and platform)."""
    if n_buckets < 2:
        raise ValueError("need at least two buckets")
    digest = hashlib.sha256(str(user_id).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % n_buckets


def bucket_users(n_buckets: int, per_bucket: int, start: int = 0) -> list[list[int]]:
    """The first ``per_bucket`` user ids (scanning upward from ``start``) hashed to each bucket."""
    out: list[list[int]] = [[] for _ in range(n_buckets)]
    uid = start
    while any(len(b) < per_bucket for b in out):
        b = bucket_assign(uid, n_buckets)
        if len(out[b]) < per_bucket:
            out[b].append(uid)
        uid += 1
    return out


def gain(value: float | None, base: float | None) -> float | None:
    """Relative change (v - v_base) / v_base."""
    if value is None or base is None or base == 0:
        return None
    return (value - base) / base


@dataclass
class MetricRow:
    policy: str
    source: str
    metric: str
    value: float | None
    gain: float | None


@dataclass
class ABResult:
    baseline: str
    logs: dict[str, list[SessionLog]]
    rows: list[MetricRow] = field(default_factory=list)

    def value(self, policy: str, source: str, metric: str) -> float | None:
        for r in self.rows:
            if (r.policy, r.source, r.metric) == (policy, source, metric):
                return r.value
        raise KeyError((policy, source, metric))

    def gain_of(self, policy: str, source: str, metric: str) -> float | None:
        for r in self.rows:
            if (r.policy, r.source, r.metric) == (policy, source, metric):
                return r.gain
        raise KeyError((policy, source, metric))

    def to_text(self) -> str:
        lines = ["policy\tsource\tmetric\tvalue\tgain"]
        for r in self.rows:
            v = "" if r.value is None else repr(r.value)
            g = "" if r.gain is None else repr(r.gain)
            lines.append(f"{r.policy}\t{r.source}\t{r.metric}\t{v}\t{g}")
        return "\n".join(lines) + "\n"


def metric_table(logs: dict[str, list[SessionLog]], source_names: list[str], baseline: str,
                 ctr_mode: str = "impression") -> list[MetricRow]:
    """CTR/ADT/COV per vertical, GMV per source and in total, with gains vs ``baseline``."""
    def compute(L):
        vals = {}
        for j, name in enumerate(source_names):
            if j > 0:
                vals[(name, "CTR")] = ctr(L, j, ctr_mode)
                vals[(name, "ADT")] = adt(L, j)
                vals[(name, "COV")] = cov(L, j)
            vals[(name, "GMV")] = gmv(L, j)
        verts = list(range(1, len(source_names)))
        vals[("verticals", "CTR")] = ctr(L, verts, ctr_mode)
        vals[("all", "CTR")] = ctr(L, range(len(source_names)), ctr_mode)
        vals[("all", "GMV")] = gmv(L, range(len(source_names)))
        return vals

    base = compute(logs[baseline]) if baseline in logs else {}
    rows = []
    for name, L in logs.items():
        vals = compute(L)
        for (src, metric), v in vals.items():
            rows.append(MetricRow(name, src, metric, v, gain(v, base.get((src, metric)))))
    return rows


def ab_test(policies: dict[str, PagePolicy], sim: SearchSimulator, sessions_per_bucket: int,
            baseline: str | None = None, traffic_seed: int = 0, ctr_mode: str = "impression",
            common_responses: bool = False) -> ABResult:
    """Run each policy in its own bucket of equal size.

    Buckets draw user ids from disjoint hash ranges; every bucket replays the
    same generated traffic (the i-th session of each bucket shares its query
    and user profile) while user responses use a per-bucket stream. With
    ``common_responses`` every bucket shares one response stream, so the same
    item shown at the same position draws the same outcome (a paired design).
    """
    if len(policies) < 2:
        raise ValueError("an A/B test needs at least two policies")
    names = list(policies)
    baseline = names[0] if baseline is None else baseline
    if baseline not in policies:
        raise ValueError(f"baseline {baseline!r} is not among the policies")
    users = bucket_users(len(names), sessions_per_bucket)
    logs: dict[str, list[SessionLog]] = {}
    for b, name in enumerate(names):
        pol = policies[name]
        out = []
        for i in range(sessions_per_bucket):
            rseed = _bucket_seed(traffic_seed, 0 if common_responses else b)
            session = sim.new_session(i, traffic_seed=traffic_seed, response_seed=rseed, user_id=users[b][i])
            out.append(pol.play(session))
        logs[name] = out
    source_names = [s.name for s in sim.catalog.sources]
    return ABResult(baseline, logs, metric_table(logs, source_names, baseline, ctr_mode))


def _bucket_seed(traffic_seed: int, bucket: int) -> int:
    return int.from_bytes(hashlib.sha256(f"{traffic_seed}:{bucket}".encode()).digest()[:4], "big")
