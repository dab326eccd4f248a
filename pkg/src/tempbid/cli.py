"""Command-line entry points: gen-data, train, eval, benchmark, interpret.

Exit codes: 0 success, 2 configuration problem, 3 data problem, 4 capability problem.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import baselines as bl
from . import interpret as ip
from . import report as rp
from .battery import BatteryConfig
from .cfgutil import from_dict, read_json, to_dict
from .data import (
    TWO_MONTH_INTERVALS,
    MarketConfig,
    SynthConfig,
    load_market_csv,
    split_episodes,
    synth_prices,
    train_eval_split,
    write_market_csv,
)
from .env import MARKET_MODES, EnvConfig, MarketEnv, Normalizer, RewardConfig, rollout, write_trace_csv
from .errors import CapabilityError, CompatibilityError, ConfigError, DataError
from .sac import SACAgent, SACConfig, TrainingLog, evaluate, train
from .tensor import read_checkpoint
from .ttfe import TTFEConfig

STRATEGIES = ("tempdrl", "mlp-drl", "dmpc-persistence", "dmpc-ema", "pio")
PROBES = ("q_trace", "attention", "gradient")
EXIT_CONFIG, EXIT_DATA, EXIT_CAPABILITY = 2, 3, 4


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 300
    train_fraction: float = 10 / 12
    initial_soc: float = 0.5


@dataclass(frozen=True)
class BenchConfig:
    lookahead: int = 48
    soc_grid_step: float = bl.DEFAULT_GRID_STEP
    power_levels: int = bl.DEFAULT_POWER_LEVELS
    ema_tau: float = 0.9


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    market: MarketConfig = field(default_factory=MarketConfig)
    battery: BatteryConfig = field(default_factory=BatteryConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    ttfe: TTFEConfig = field(default_factory=TTFEConfig)
    sac: SACConfig = field(default_factory=SACConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict:
        return {name: to_dict(getattr(self, name)) for name in SECTIONS}


SECTIONS = {
    "synth": SynthConfig,
    "market": MarketConfig,
    "battery": BatteryConfig,
    "reward": RewardConfig,
    "env": EnvConfig,
    "ttfe": TTFEConfig,
    "sac": SACConfig,
    "train": TrainConfig,
    "bench": BenchConfig,
}


def parse_run_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("expected a JSON object", "<root>")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section {unknown[0]!r}", unknown[0])
    parts = {name: from_dict(cls, data[name], name) for name, cls in SECTIONS.items() if name in data}
    cfg = RunConfig(**parts)
    if cfg.ttfe.seg_len != cfg.env.seg_len:
        raise ConfigError("must equal env.seg_len", "ttfe.seg_len")
    return cfg


def load_run_config(path: str | None, seed: int | None = None) -> RunConfig:
    cfg = parse_run_config(read_json(path)) if path else RunConfig()
    if seed is not None:
        cfg = replace(cfg, synth=replace(cfg.synth, seed=seed))
    return cfg


# --------------------------------------------------------------- agent files


def save_agent(path: Path, agent: SACAgent, cfg: RunConfig):
    meta = {
        "sac": json.dumps(to_dict(agent.cfg), sort_keys=True),
        "ttfe": json.dumps(to_dict(agent.ttfe_cfg), sort_keys=True),
        "battery": json.dumps(to_dict(agent.battery), sort_keys=True),
        "normalizer": json.dumps(to_dict(agent.normalizer), sort_keys=True),
        "market_mode": agent.market_mode,
        "seed": str(agent.seed),
    }
    agent.save(path, meta)


def load_agent(path: str | Path, cfg: RunConfig | None = None) -> SACAgent:
    """Rebuild an agent from a checkpoint's stored configuration.

    When ``cfg`` is given, its network shapes must agree with the checkpoint.
    """
    _, meta = read_checkpoint(path)
    try:
        sac = from_dict(SACConfig, json.loads(meta["sac"]), "sac")
        ttfe = from_dict(TTFEConfig, json.loads(meta["ttfe"]), "ttfe")
        bat = from_dict(BatteryConfig, json.loads(meta["battery"]), "battery")
        nd = json.loads(meta["normalizer"])
    except KeyError as exc:
        raise CompatibilityError(f"checkpoint lacks metadata {exc}") from exc
    if cfg is not None:
        if (cfg.ttfe.model_dim, cfg.ttfe.seg_len, cfg.sac.hidden) != (ttfe.model_dim, ttfe.seg_len, sac.hidden):
            raise CompatibilityError("checkpoint network shapes differ from the configuration")
    norm = Normalizer(tuple(nd["mean"]), tuple(nd["std"]))
    agent = SACAgent(sac, ttfe, bat, norm, meta.get("market_mode", "joint"), int(meta.get("seed", 0)))
    agent.load(path)
    return agent


# ------------------------------------------------------------------ commands


def load_episodes(data: str, cfg: RunConfig):
    series, events = load_market_csv(data)
    eps = split_episodes(series, events, cfg.market)
    return train_eval_split(eps, cfg.train.train_fraction) if len(eps) > 1 else (eps, eps)


def make_env(cfg: RunConfig, mode: str | None = None) -> MarketEnv:
    env_cfg = cfg.env if mode is None else replace(cfg.env, market_mode=mode)
    return MarketEnv(cfg.battery, cfg.market, cfg.reward, env_cfg)


def _manifest(cfg: RunConfig, seed: int, episodes, run_id: str, ckpt_hash: str = "") -> rp.RunManifest:
    return rp.RunManifest(run_id, seed, cfg.to_dict(), rp.data_fingerprint(episodes), ckpt_hash)


def cmd_gen_data(cfg: RunConfig, out: Path, n_intervals: int = TWO_MONTH_INTERVALS) -> Path:
    series, events = synth_prices(cfg.synth, n_intervals)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "prices.csv"
    tmp = path.with_name(".prices.csv.tmp")
    write_market_csv(tmp, series, events)
    tmp.replace(path)
    return path


def train_agent(cfg: RunConfig, train_eps, seed: int, use_ttfe: bool | None = None) -> tuple[SACAgent, TrainingLog]:
    sac = cfg.sac if use_ttfe is None else replace(cfg.sac, use_ttfe=use_ttfe)
    agent = SACAgent(sac, cfg.ttfe, cfg.battery, Normalizer.fit(train_eps), cfg.env.market_mode, seed)
    log = train(agent, make_env(cfg), train_eps, cfg.train.episodes, seed, cfg.train.initial_soc)
    return agent, log


def cmd_train(cfg: RunConfig, data: str, out: Path, seed: int) -> rp.RunManifest:
    train_eps, _ = load_episodes(data, cfg)
    agent, log = train_agent(cfg, train_eps, seed)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.npz"
    save_agent(ckpt, agent, cfg)
    man = _manifest(cfg, seed, train_eps, "train", agent.content_hash())
    man.write(out / "manifest.json")
    cols = ("episode", "return", "cash", "violations", "loss_pi", "loss_q", "loss_v")
    rows = [[r[c] if c == "episode" else float(r[c]) for c in cols] for r in log.rows]
    rp.write_text_atomic(out / "training_log.csv", rp.csv_text(cols, rows, man.hash))
    return man


def cmd_eval(cfg: RunConfig, checkpoint: str, data: str, out: Path, seed: int, modes: Sequence[str]) -> rp.RunManifest:
    agent = load_agent(checkpoint, cfg)
    _, eval_eps = load_episodes(data, cfg)
    man = _manifest(cfg, seed, eval_eps, "eval", agent.content_hash())
    out.mkdir(parents=True, exist_ok=True)
    man.write(out / "manifest.json")
    rows, stats = [], {}
    for mode in modes:
        runs = evaluate(agent, make_env(cfg, mode), eval_eps, cfg.train.initial_soc)
        rows.append(rp.revenue_row("agent", mode, runs))
        stats[mode] = rp.behavior_stats(runs, eval_eps, cfg.battery, cfg.market.dt_hours).to_dict()
        for i, r in enumerate(runs):
            write_trace_csv(out / f"trace_{mode}_{i:03d}.csv", r)
    rp.write_text_atomic(out / "revenue.csv", rp.revenue_csv(rows, man.hash))
    rp.write_json_atomic(out / "behavior.json", {"manifest": man.hash, "modes": stats})
    return man


def strategy_runs(name: str, cfg: RunConfig, mode: str, eval_eps, agents: dict):
    env = make_env(cfg, mode)
    soc = cfg.train.initial_soc
    b = cfg.bench
    if name in ("tempdrl", "mlp-drl"):
        return evaluate(agents[name], env, eval_eps, soc)
    if name == "pio":
        runs = []
        for ep in eval_eps:
            p = bl.DispatchProblem(ep, cfg.battery, cfg.market, soc * cfg.battery.e_cap, True, mode)
            sol = bl.pio_solve_dp(p, b.soc_grid_step, b.power_levels)
            runs.append(bl.realized(p, bl.replay_actions(p, sol), env))
        return runs
    fc = bl.persistence if name == "dmpc-persistence" else bl.ema_forecaster(b.ema_tau)
    return [
        rollout(env, ep, bl.dmpc_policy(ep, fc, b.lookahead, cfg.battery, cfg.market, mode, b.soc_grid_step, b.power_levels), soc)
        for ep in eval_eps
    ]


def cmd_benchmark(
    cfg: RunConfig, data: str, out: Path, seed: int, strategies: Sequence[str], modes: Sequence[str]
) -> rp.RunManifest:
    for s in strategies:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}; expected one of {STRATEGIES}")
    train_eps, eval_eps = load_episodes(data, cfg)
    agents = {}
    for name, flag in (("tempdrl", True), ("mlp-drl", False)):
        if name in strategies:
            agents[name], _ = train_agent(cfg, train_eps, seed, use_ttfe=flag)
    man = _manifest(cfg, seed, train_eps + eval_eps, "benchmark")
    out.mkdir(parents=True, exist_ok=True)
    man.write(out / "manifest.json")
    rows, series = [], []
    for name in strategies:
        for mode in modes:
            runs = strategy_runs(name, cfg, mode, eval_eps, agents)
            rows.append(rp.revenue_row(name, mode, runs))
            for i, c in enumerate(rp.cumulative_cash(runs)):
                series.append((name, mode, i, float(c)))
    rp.write_text_atomic(out / "benchmark.csv", rp.revenue_csv(rows, man.hash))
    rp.write_text_atomic(out / "cumulative.csv", rp.csv_text(("strategy", "mode", "step", "cumulative"), series, man.hash))
    return man


def cmd_interpret(cfg: RunConfig, checkpoint: str, data: str, out: Path, seed: int, probes: Sequence[str]) -> list[Path]:
    agent = load_agent(checkpoint, cfg)
    if "attention" in probes and agent.ttfe is None:
        raise CapabilityError("attention probe needs a checkpoint trained with the temporal feature extractor")
    _, eval_eps = load_episodes(data, cfg)
    man = _manifest(cfg, seed, eval_eps, "interpret", agent.content_hash())
    out.mkdir(parents=True, exist_ok=True)
    man.write(out / "manifest.json")
    written = []
    for probe in probes:
        if probe == "q_trace":
            rep = ip.q_trace(agent, make_env(cfg), eval_eps[0], cfg.train.initial_soc)
        elif probe == "attention":
            rep = ip.attention_spread_hist(agent, eval_eps)
        elif probe == "gradient":
            rep = ip.gradient_map(agent, eval_eps, cfg.train.initial_soc)
        else:
            raise ValueError(f"unknown probe {probe!r}; expected one of {PROBES}")
        path = out / f"{probe}.csv"
        rp.write_text_atomic(path, rp.csv_text(rep.columns, rep.rows, man.hash))
        written.append(path)
    return written


# ---------------------------------------------------------------------- main


def _csv_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tempbid", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="run configuration JSON")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default="runs/out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic price/event CSV")
    g.add_argument("--n-intervals", type=int, default=TWO_MONTH_INTERVALS)

    t = sub.add_parser("train", help="train an agent")
    t.add_argument("--data", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the evaluation episodes")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--modes", type=_csv_list, default=list(MARKET_MODES))

    b = sub.add_parser("benchmark", help="compare strategies")
    b.add_argument("--data", required=True)
    b.add_argument("--strategies", type=_csv_list, default=list(STRATEGIES))
    b.add_argument("--modes", type=_csv_list, default=list(MARKET_MODES))

    i = sub.add_parser("interpret", help="run interpretability probes")
    i.add_argument("--data", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--probes", type=_csv_list, default=list(PROBES))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        if args.command == "gen-data":
            raw = read_json(args.config) if args.config else {}
            # a bare synthesis config is accepted as well as a full run config
            if raw and not set(raw) & set(SECTIONS):
                raw = {"synth": raw}
            cfg = parse_run_config(raw)
            if args.seed is not None:
                cfg = replace(cfg, synth=replace(cfg.synth, seed=args.seed))
            print(cmd_gen_data(cfg, out, args.n_intervals))
            return 0
        cfg = load_run_config(args.config)
        seed = 0 if args.seed is None else args.seed
        for m in getattr(args, "modes", []):
            if m not in MARKET_MODES:
                raise ConfigError(f"unknown market mode {m!r}", "modes")
        if args.command == "train":
            man = cmd_train(cfg, args.data, out, seed)
        elif args.command == "eval":
            man = cmd_eval(cfg, args.checkpoint, args.data, out, seed, args.modes)
        elif args.command == "benchmark":
            man = cmd_benchmark(cfg, args.data, out, seed, args.strategies, args.modes)
        else:
            for p in args.probes:
                if p not in PROBES:
                    raise ConfigError(f"unknown probe {p!r}", "probes")
            cmd_interpret(cfg, args.checkpoint, args.data, out, seed, args.probes)
            return 0
        print(man.hash)
        return 0
    except (ConfigError, CompatibilityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CapabilityError as exc:
        print(f"capability error: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY
    except ValueError as exc:
        print(f"argument error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
