"""Command-line entry point: ``agghrl train|abtest|genlogs|pretrain|plot``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, ConfigError, load_config
from .io import (
    LogFormatError,
    WeightFormatError,
    load_policy_weights,
    load_weights,
    policy_tensors,
    read_session_logs,
    save_weights,
    weights_kind,
    write_session_logs,
)

log = logging.getLogger("agghrl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAIL):
        super().__init__(message)
        self.code = code


def _versions() -> dict[str, str]:
    import numba

    return {"agghrl": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "numba": numba.__version__}


def _config(args) -> Config:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        raise CliError(f"config file not found: {args.config}", EXIT_USAGE) from None
    except ConfigError as e:
        raise CliError(f"invalid config: {e}", EXIT_USAGE) from None
    if getattr(args, "strategy", None):
        cfg.agent.strategy = args.strategy
    return cfg


def _manifest(out: Path, command: str, cfg: Config, args, **extra) -> None:
    data = {
        "command": command,
        "config_sha256": cfg.digest(),
        "seed": args.seed,
        "versions": _versions(),
        "config": cfg.to_dict(),
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(data, indent=2, sort_keys=True, default=list) + "\n")


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _simulator(cfg: Config, seed: int):
    from .sim import SearchSimulator

    return SearchSimulator(cfg.env, seed)


def _read_weights(path: str):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"weights not found: {p}")
    try:
        return load_weights(p)
    except WeightFormatError as e:
        raise CliError(f"{p}: {e}") from None


def _read_logs(path: str):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"session log not found: {p}")
    try:
        return read_session_logs(p)
    except LogFormatError as e:
        raise CliError(str(e)) from None


def _load_learned(kind: str, cfg: Config, path: str, seed: int):
    from .agent import HRLAgent
    from .baselines import FlatRLAgent

    tensors = _read_weights(path)
    try:
        found = weights_kind(tensors)
        if found != kind:
            raise CliError(f"{path} holds {found} weights, not {kind}")
        policy = HRLAgent(cfg, seed) if kind == "hrl" else FlatRLAgent(cfg, seed)
        load_policy_weights(policy, tensors)
    except WeightFormatError as e:
        raise CliError(f"{path}: {e}") from None
    return policy


def build_policy(spec: str, cfg: Config, seed: int, logs_path: str | None):
    """``name`` or ``name=weights``. Supervised composites read ``--logs``."""
    from .baselines import (
        CompositePolicy,
        ItemRegressor,
        RulePolicy,
        Template,
        TemplatePolicy,
        VerticalClassifiers,
        templates_from_config,
    )

    name, _, path = spec.partition("=")
    name = name.strip().lower()
    if name == "rule":
        return "rule", RulePolicy()
    if name == "core":
        pol = TemplatePolicy(Template(-1, ()))
        pol.name = "core"
        return "core", pol
    if name.startswith("template"):
        tid = int(name.removeprefix("template").lstrip(":") or path)
        templates = templates_from_config(cfg)
        if not 0 <= tid < len(templates):
            raise CliError(f"no template {tid}; config defines {len(templates)}")
        return f"template{tid}", TemplatePolicy(templates[tid])
    if name in ("hrl", "flat"):
        if not path:
            raise CliError(f"{name} needs trained weights: --policy {name}=PATH")
        return name, _load_learned(name, cfg, path, seed)
    if name in ("bc+rm", "bc+rl", "rl+rm"):
        if logs_path is None:
            raise CliError(f"{name} trains its supervised parts from --logs")
        logs = _read_logs(logs_path)
        sim = _simulator(cfg, seed)
        parts = {}
        if name.startswith("bc"):
            parts["classifiers"] = VerticalClassifiers(cfg, seed)
            parts["classifiers"].fit_logs(logs, sim.catalog)
        if name.endswith("rm"):
            parts["regressor"] = ItemRegressor(cfg, seed)
            parts["regressor"].fit_logs(logs, sim.catalog)
        if "rl" in name:
            if not path:
                raise CliError(f"{name} needs trained HRL weights: --policy {name}=PATH")
            parts["agent"] = _load_learned("hrl", cfg, path, seed)
        return name.upper(), CompositePolicy(name.upper(), **parts)
    raise CliError(f"unknown policy {spec!r}", EXIT_USAGE)


# --------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    from .agent import HRLAgent, run_training
    from .baselines import FlatRLAgent, train_flat

    cfg = _config(args)
    out = _outdir(args.out)
    sim = _simulator(cfg, args.seed)
    kind = (args.policy or "hrl").lower()
    if kind not in ("hrl", "flat"):
        raise CliError(f"train supports --policy hrl or flat, not {kind!r}", EXIT_USAGE)
    if kind == "hrl":
        agent = HRLAgent(cfg, args.seed)
        if args.init:
            load_policy_weights(agent, _read_weights(args.init))
        agent, curves, _ = run_training(sim, cfg, args.sessions, args.seed, agent, eps_start=args.eps_start,
                                        workers=args.workers)
    else:
        if args.workers > 1:
            log.warning("--workers applies to hrl training; flat trains in one process")
        agent = FlatRLAgent(cfg, args.seed)
        if args.init:
            load_policy_weights(agent, _read_weights(args.init))
        agent = train_flat(sim, cfg, args.sessions, args.seed, agent)
        curves = agent.curves
    save_weights(policy_tensors(agent), out / "weights.aggh")
    curves.write_jsonl(out / "curves.jsonl")
    _manifest(out, "train", cfg, args, policy=kind, sessions=args.sessions, strategy=cfg.agent.strategy,
              workers=args.workers, init=args.init, eps_start=args.eps_start,
              files=["weights.aggh", "curves.jsonl"])
    print(f"trained {kind} for {args.sessions} sessions -> {out}")
    return EXIT_OK


def _tables(result, source_names: list[str]) -> tuple[str, str]:
    base = result.baseline
    vertical_names = source_names[1:]
    t3 = [f"policy\tvertical\tCTR\tCTR_gain_vs_{base}\tADT_s\tADT_gain_vs_{base}\tCOV"]
    t4 = ["policy\t" + "\t".join(f"{s}_GMV_gain_vs_{base}" for s in [*source_names, "all"])]

    def f(v):
        return "" if v is None else f"{v:.6g}"

    for pol in result.logs:
        for v in vertical_names:
            t3.append("\t".join([pol, v, f(result.value(pol, v, "CTR")), f(result.gain_of(pol, v, "CTR")),
                                 f(result.value(pol, v, "ADT")), f(result.gain_of(pol, v, "ADT")),
                                 f(result.value(pol, v, "COV"))]))
        t4.append("\t".join([pol] + [f(result.gain_of(pol, s, "GMV")) for s in [*source_names, "all"]]))
    return "\n".join(t3) + "\n", "\n".join(t4) + "\n"


def cmd_abtest(args) -> int:
    from .metrics import ab_test

    cfg = _config(args)
    specs = [s for item in (args.policy or []) for s in item.split(",") if s.strip()]
    if len(specs) < 2:
        raise CliError("abtest needs at least two --policy entries", EXIT_USAGE)
    policies = {}
    for spec in specs:
        name, pol = build_policy(spec, cfg, args.seed, args.logs)
        if name in policies:
            raise CliError(f"policy {name} listed twice", EXIT_USAGE)
        policies[name] = pol
    baseline = "rule" if "rule" in policies else next(iter(policies))
    sim = _simulator(cfg, args.seed)
    result = ab_test(policies, sim, args.sessions, baseline=baseline, traffic_seed=args.seed,
                     ctr_mode=cfg.metrics.ctr_mode)
    out = _outdir(args.out)
    t3, t4 = _tables(result, [s.name for s in sim.catalog.sources])
    (out / "metrics.tsv").write_text(result.to_text())
    (out / "table3.tsv").write_text(t3)
    (out / "table4.tsv").write_text(t4)
    _manifest(out, "abtest", cfg, args, policies=specs, sessions_per_bucket=args.sessions, baseline=baseline,
              files=["metrics.tsv", "table3.tsv", "table4.tsv"])
    print(t3, end="")
    print(t4, end="")
    return EXIT_OK


def cmd_genlogs(args) -> int:
    cfg = _config(args)
    name, pol = build_policy(args.policy or "rule", cfg, args.seed, args.logs)
    sim = _simulator(cfg, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_session_logs((pol.play(sim.new_session(i)) for i in range(args.sessions)), out)
    print(f"wrote {n} {name} sessions -> {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .agent import HRLAgent
    from .bc import agreement, bc_pretrain

    cfg = _config(args)
    if args.logs is None:
        raise CliError("pretrain needs --logs", EXIT_USAGE)
    logs = _read_logs(args.logs)
    if not logs:
        raise CliError(f"{args.logs} holds no sessions")
    n_hold = int(round(len(logs) * args.holdout))
    train, held = logs[: len(logs) - n_hold], logs[len(logs) - n_hold:]
    sim = _simulator(cfg, args.seed)
    agent = HRLAgent(cfg, args.seed)
    try:
        losses = bc_pretrain(agent, train, sim.catalog, epochs=args.epochs, seed=args.seed)
    except ValueError as e:
        raise CliError(f"{args.logs}: {e}") from None
    out = _outdir(args.out)
    save_weights(policy_tensors(agent), out / "weights.aggh")
    with open(out / "bc_losses.jsonl", "w") as f:
        for level, vals in losses.items():
            for i, v in enumerate(vals):
                f.write(json.dumps({"level": level, "step": i + 1, "loss": v}) + "\n")
    agree = agreement(agent, held, sim.catalog) if held else {}
    _manifest(out, "pretrain", cfg, args, logs=args.logs, train_sessions=len(train), holdout_sessions=len(held),
              agreement=agree, files=["weights.aggh", "bc_losses.jsonl"])
    msg = f"pretrained on {len(train)} sessions -> {out}"
    if agree:
        msg += f"; held-out agreement {agree['overall']:.3f}"
    print(msg)
    return EXIT_OK


def _read_curves(path: Path) -> dict[str, list[tuple[float, float]]]:
    series: dict[str, list[tuple[float, float]]] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            key = rec.get("level", "high")
            x = rec.get("step", rec.get("session"))
            y = rec.get("loss", rec.get("return"))
            if x is None or y is None:
                continue
            series.setdefault(key, []).append((float(x), float(y)))
    return series


def _read_table(path: Path) -> list[dict[str, str]]:
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(lines) < 2:
        return []
    head = lines[0].split("\t")
    return [dict(zip(head, ln.split("\t"))) for ln in lines[1:]]


def smooth(y: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    if window <= 1 or y.size == 0:
        return y.astype(np.float64)
    c = np.cumsum(np.concatenate([[0.0], y]))
    idx = np.arange(1, y.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def _label(path: Path) -> str:
    man = path.parent / "manifest.json"
    if man.is_file():
        try:
            m = json.loads(man.read_text())
            return f"{path.parent.name} ({m.get('policy', '')} strategy {m.get('strategy', '')})"
        except json.JSONDecodeError:
            pass
    return path.parent.name or path.stem


def cmd_plot(args) -> int:
    inputs = [Path(p) for p in args.inputs]
    for p in inputs:
        if not p.is_file():
            raise CliError(f"input not found: {p}")
    out = _outdir(args.out)
    curves, tables = [], []
    for p in inputs:
        if p.suffix == ".tsv":
            rows = _read_table(p)
            if rows:
                tables.append((p, rows))
        else:
            series = _read_curves(p)
            if any(series.values()):
                curves.append((p, series))
    if not curves and not tables:
        raise CliError("nothing to plot: inputs are empty")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    if curves:
        levels = sorted({k for _, s in curves for k in s if k != "episode"})
        for level in levels:
            fig, ax = plt.subplots(figsize=(7, 4))
            for i, (p, series) in enumerate(curves):
                pts = series.get(level)
                if not pts:
                    continue
                arr = np.array(pts)
                ys = smooth(arr[:, 1], args.smooth)
                name = f"{i}_{p.parent.name or p.stem}_{level}.dat"
                np.savetxt(out / name, np.column_stack([arr[:, 0], ys]), fmt="%.10g", header="step loss")
                written.append(name)
                ax.plot(arr[:, 0], np.maximum(ys, 1e-12), label=_label(p))
            ax.set_yscale("log")
            ax.set_xlabel("iteration")
            ax.set_ylabel("loss (log scale)")
            ax.set_title(f"{level}-level training loss")
            ax.legend()
            fig.tight_layout()
            fig.savefig(out / f"loss_{level}.png", dpi=120)
            plt.close(fig)
            written.append(f"loss_{level}.png")
    for p, rows in tables:
        gain_cols = [c for c in rows[0] if "gain" in c]
        if not gain_cols:
            continue
        labels = [" / ".join(v for k, v in r.items() if "gain" not in k and k in ("policy", "vertical", "source",
                                                                                 "metric")) for r in rows]
        vals = np.array([[float(r[c]) if r[c] else np.nan for c in gain_cols] for r in rows])
        np.savetxt(out / f"{p.stem}_gains.dat", vals, fmt="%.10g", header=" ".join(gain_cols))
        fig, ax = plt.subplots(figsize=(8, 4))
        width = 0.8 / len(gain_cols)
        x = np.arange(len(rows))
        for j, c in enumerate(gain_cols):
            ax.bar(x + j * width, np.nan_to_num(vals[:, j]), width, label=c)
        ax.set_xticks(x + 0.4 - width / 2, labels, rotation=30, ha="right")
        ax.axhline(0.0, color="black", linewidth=0.8)
        ax.set_ylabel("relative gain")
        ax.legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(out / f"{p.stem}_gains.png", dpi=120)
        plt.close(fig)
        written += [f"{p.stem}_gains.dat", f"{p.stem}_gains.png"]
    print("wrote " + ", ".join(written))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="agghrl", description="Hierarchical RL for aggregated search.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_help: str):
        p.add_argument("--config", help="TOML config (defaults when omitted)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help=out_help)

    p = sub.add_parser("train", help="train an HRL or flat agent in the simulator")
    common(p, "output directory")
    p.add_argument("--policy", default="hrl", help="hrl (default) or flat")
    p.add_argument("--sessions", type=int, default=2000)
    p.add_argument("--strategy", choices=["i", "ii"])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--init", help="start from these weights (e.g. a pretrain output)")
    p.add_argument("--eps-start", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("abtest", help="bucket-test policies on shared simulated traffic")
    common(p, "output directory")
    p.add_argument("--policy", action="append",
                   help="rule, core, templateN, hrl=W, flat=W, bc+rm, bc+rl=W, rl+rm=W (repeat or comma-separate)")
    p.add_argument("--sessions", type=int, default=1000, help="sessions per bucket")
    p.add_argument("--logs", help="session logs for supervised baselines")
    p.add_argument("--strategy", choices=["i", "ii"])
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_abtest)

    p = sub.add_parser("genlogs", help="roll out a policy and write session logs")
    common(p, "output .jsonl path")
    p.add_argument("--policy", default="rule")
    p.add_argument("--sessions", type=int, default=1000)
    p.add_argument("--logs", help="session logs for supervised baselines")
    p.add_argument("--strategy", choices=["i", "ii"])
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_genlogs)

    p = sub.add_parser("pretrain", help="behavioral cloning from session logs")
    common(p, "output directory")
    p.add_argument("--logs", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--holdout", type=float, default=0.1, help="fraction of sessions held out for agreement")
    p.add_argument("--strategy", choices=["i", "ii"])
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("plot", help="log-scale loss curves and gain bar charts")
    p.add_argument("inputs", nargs="+", help="curves.jsonl / bc_losses.jsonl / table .tsv files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--smooth", type=int, default=200, help="moving-average window")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("AGGHRL_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("agghrl: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CliError as e:
        print(f"agghrl: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
