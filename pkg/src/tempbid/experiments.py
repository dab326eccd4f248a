"""Scaled synthetic-market experiments: the square-wave learning smoke test and the FCAS response check.

Both train small agents on a few synthetic days and score them on a held-out
day, so they run in minutes on one CPU core.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines as bl
from .battery import BatteryConfig
from .data import Episode, MarketConfig, SynthConfig, split_episodes, synth_prices
from .env import EnvConfig, MarketEnv, Normalizer, episode_revenue
from .report import BehaviorStats, behavior_stats
from .sac import SACAgent, SACConfig, evaluate, train
from .ttfe import TTFEConfig

SMOKE_TTFE = TTFEConfig(seg_len=16, model_dim=16, heads=2, n_blocks=1, ffn_dim=32)

# Network widths are scaled down for desk-scale runs. Rewards are scaled by
# 0.003, which keeps bootstrapped values O(100) for 5-minute rewards of O(1000);
# the entropy weight was tuned by hand at that scale. The extractor steps at a
# tenth of the head learning rates, and the policy loss reaches it only through
# the actor's input; otherwise it learns to inflate Q and the value diverges.
SMOKE_SAC = SACConfig(
    hidden=64,
    batch_size=256,
    warmup_transitions=576,
    update_every=2,
    reward_scale=0.003,
    alpha=0.006,
    lr_pi=3e-4,
    lr_q=3e-4,
    lr_v=3e-4,
    twin_q=True,
    ttfe_lr_scale=0.1,
    detach_critic_state=True,
)


@dataclass(frozen=True)
class SmokeConfig:
    period: int = 96
    train_days: int = 2
    episodes: int = 60
    final_window: int = 10
    initial_soc: float = 0.5
    sac: SACConfig = SMOKE_SAC
    ttfe: TTFEConfig = SMOKE_TTFE


@dataclass
class SmokeResult:
    use_ttfe: bool
    seed: int
    pio_cash: float
    eval_cash: list[float] = field(default_factory=list)
    train_cash: list[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_mean(self) -> float:
        return float(np.mean(self.eval_cash))

    @property
    def ratio(self) -> float:
        return self.final_mean / self.pio_cash


def square_wave_days(cfg: SmokeConfig, market: MarketConfig | None = None) -> tuple[list[Episode], Episode]:
    """Training days and one held-out day of a 20/200 square wave with zero FCAS prices and no events."""
    market = market or MarketConfig()
    synth = SynthConfig(spot_profile="square_wave", period=cfg.period, fcas_means=(0.0,) * 6, p_raise=0.0, p_lower=0.0)
    series, events = synth_prices(synth, market.episode_len * (cfg.train_days + 1))
    days = split_episodes(series, events, market)
    return days[:-1], days[-1]


def pio_cash(episode: Episode, battery: BatteryConfig, market_mode: str, initial_soc: float, market=None) -> float:
    p = bl.DispatchProblem(episode, battery, market or MarketConfig(), initial_soc * battery.e_cap, True, market_mode)
    sol = bl.pio_solve_dp(p)
    return episode_revenue(bl.realized(p, bl.replay_actions(p, sol)))[3]


def _agent(cfg_sac: SACConfig, ttfe: TTFEConfig, use_ttfe: bool, bat, norm, mode, seed) -> SACAgent:
    return SACAgent(replace(cfg_sac, use_ttfe=use_ttfe), ttfe, bat, norm, mode, seed)


def run_smoke(use_ttfe: bool, seed: int, cfg: SmokeConfig = SmokeConfig()) -> SmokeResult:
    """Train on the square wave and record held-out cash after each of the final episodes."""
    start = time.perf_counter()
    bat = BatteryConfig()
    train_days, held_out = square_wave_days(cfg)
    env = MarketEnv(bat, config=EnvConfig(seg_len=cfg.ttfe.seg_len, market_mode="spot_only"))
    agent = _agent(cfg.sac, cfg.ttfe, use_ttfe, bat, Normalizer.fit(train_days), "spot_only", seed)
    res = SmokeResult(use_ttfe, seed, pio_cash(held_out, bat, "spot_only", cfg.initial_soc))

    def after_episode(row):
        res.train_cash.append(row["cash"])
        if row["episode"] >= cfg.episodes - cfg.final_window:
            run = evaluate(agent, env, [held_out], cfg.initial_soc)[0]
            res.eval_cash.append(episode_revenue(run)[3])

    train(agent, env, train_days, cfg.episodes, seed, cfg.initial_soc, callback=after_episode)
    res.seconds = time.perf_counter() - start
    return res


# ------------------------------------------------------------------- FCAS


@dataclass(frozen=True)
class FcasConfig:
    """Spot moves by 10 AU$/MWh while every FCAS price sits at 300 AU$/MW."""

    train_days: int = 4
    eval_days: int = 4
    episodes: int = 20
    spot_low: float = 50.0
    spot_high: float = 60.0
    fcas_price: float = 300.0
    seed: int = 0
    sac: SACConfig = SMOKE_SAC
    ttfe: TTFEConfig = SMOKE_TTFE


@dataclass
class FcasResult:
    stats: BehaviorStats
    seconds: float

    def ratio(self, direction: str) -> float:
        return self.stats.response_ratio(direction)


def fcas_days(cfg: FcasConfig, market: MarketConfig | None = None) -> tuple[list[Episode], list[Episode]]:
    """Training and evaluation days with contingency events at the default two-month rates."""
    market = market or MarketConfig()
    synth = SynthConfig(
        seed=cfg.seed,
        spot_profile="square_wave",
        spot_low=cfg.spot_low,
        spot_high=cfg.spot_high,
        fcas_means=(cfg.fcas_price,) * 6,
    )
    series, events = synth_prices(synth, market.episode_len * (cfg.train_days + cfg.eval_days))
    days = split_episodes(series, events, market)
    return days[: cfg.train_days], days[cfg.train_days :]


def run_fcas_response(use_ttfe: bool, seed: int, cfg: FcasConfig = FcasConfig()) -> FcasResult:
    start = time.perf_counter()
    bat = BatteryConfig()
    train_days, eval_days = fcas_days(cfg)
    env = MarketEnv(bat, config=EnvConfig(seg_len=cfg.ttfe.seg_len, market_mode="joint"))
    agent = _agent(cfg.sac, cfg.ttfe, use_ttfe, bat, Normalizer.fit(train_days), "joint", seed)
    train(agent, env, train_days, cfg.episodes, seed)
    runs = evaluate(agent, env, eval_days)
    return FcasResult(behavior_stats(runs, eval_days, bat), time.perf_counter() - start)
