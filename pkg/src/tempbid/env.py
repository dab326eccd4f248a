"""Joint spot/FCAS bidding environment.

The environment is functional: ``reset`` returns an :class:`EnvState` and
``step`` maps (state, action) to a :class:`StepOutcome` without mutating the
input state. Shaped rewards use bid fractions, cash flow uses MW; both are
reported on every step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import battery as bt
from .battery import BatteryConfig, BatteryState, BidAction, ZERO_ACTION
from .data import Episode, MarketConfig, N_MARKETS, PriceVector
from .errors import ConfigError, EpisodeStateError

MARKET_MODES = ("joint", "spot_only", "fcas_only")
TRACE_COLUMNS = ("t", "soc", "v_dch", "v_ch", "a_spot", "a_fast", "a_slow", "a_delay", "reward", "cash_flow", "violated")


@dataclass(frozen=True)
class RewardConfig:
    tau_s: float = 0.9
    beta_s: float = 10.0
    penalty: float = 50.0

    def __post_init__(self):
        if not 0.0 < self.tau_s < 1.0:
            raise ConfigError("must be in (0, 1)", "tau_s")
        if self.beta_s < 0:
            raise ConfigError("must be >= 0", "beta_s")
        if self.penalty < 0:
            raise ConfigError("must be >= 0", "penalty")


@dataclass(frozen=True)
class EnvConfig:
    seg_len: int = 32
    initial_soc: float = 0.5
    market_mode: str = "joint"
    terminate_on_violation: bool = False

    def __post_init__(self):
        if self.seg_len < 1:
            raise ConfigError("must be >= 1", "seg_len")
        if self.market_mode not in MARKET_MODES:
            raise ConfigError(f"expected one of {MARKET_MODES}", "market_mode")


@dataclass(frozen=True)
class EnvState:
    soc_prev: float
    energy: float
    price_prev: PriceVector
    segment: np.ndarray  # (L, 7) raw prices, oldest -> newest
    t: int
    ema_spot: float
    feature_prev: np.ndarray | None = None


@dataclass(frozen=True)
class StepOutcome:
    next_state: EnvState
    reward: float
    done: bool
    cash_flow: float
    violated: bool
    action: BidAction  # executed (post-masking, post-fallback)
    info: dict = field(default_factory=dict)


# ------------------------------------------------------------------ reward terms


def update_ema(ema_prev: float, spot: float, cfg: RewardConfig) -> float:
    return cfg.tau_s * ema_prev + (1.0 - cfg.tau_s) * spot


def _sgn(x: float) -> int:
    return (x > 0) - (x < 0)


def indicators(spot: float, ema: float) -> tuple[int, int]:
    """(i_ch, i_dch): buy below the moving average, sell above it."""
    return _sgn(ema - spot), _sgn(spot - ema)


def reward_spot(a: BidAction, spot: float, ema: float, cfg: RewardConfig, bat: BatteryConfig) -> float:
    i_ch, i_dch = indicators(spot, ema)
    base = a.a_spot * spot * (a.v_dch * bat.eta_dch - a.v_ch / bat.eta_ch)
    guide = cfg.beta_s * a.a_spot * abs(spot - ema) * (i_dch * a.v_dch * bat.eta_dch + i_ch * a.v_ch / bat.eta_ch)
    return base + guide


def reward_fcas(a: BidAction, p: PriceVector, bat: BatteryConfig) -> tuple[float, float, float]:
    d = a.v_dch * bat.eta_dch
    c = a.v_ch / bat.eta_ch
    return (
        a.a_fast * (d * p.fr + c * p.fl),
        a.a_slow * (d * p.sr + c * p.sl),
        a.a_delay * (d * p.dr + c * p.dl),
    )


def mask_action(a: BidAction, mode: str) -> BidAction:
    if mode == "spot_only":
        return replace(a, a_fast=0.0, a_slow=0.0, a_delay=0.0)
    if mode == "fcas_only":
        return replace(a, a_spot=0.0)
    return a


def build_segment(prices: np.ndarray, t: int, seg_len: int) -> np.ndarray:
    """Prices at indices t-L .. t-1, left-padded with the earliest available row."""
    idx = np.clip(np.arange(t - seg_len, t), 0, None)
    return prices[idx].copy()


# -------------------------------------------------------------------- the env


class MarketEnv:
    def __init__(
        self,
        battery: BatteryConfig | None = None,
        market: MarketConfig | None = None,
        reward: RewardConfig | None = None,
        config: EnvConfig | None = None,
        feature_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    ):
        self.battery = battery or BatteryConfig()
        self.market = market or MarketConfig()
        self.reward_cfg = reward or RewardConfig()
        self.config = config or EnvConfig()
        self.feature_fn = feature_fn
        self.episode: Episode | None = None

    def reset(self, episode: Episode, initial_soc: float | None = None) -> EnvState:
        if len(episode) == 0:
            raise ValueError("episode is empty")
        soc = self.config.initial_soc if initial_soc is None else initial_soc
        energy = soc * self.battery.e_cap
        if not self.battery.e_min <= energy <= self.battery.e_max:
            raise ValueError(
                f"initial_soc={soc} outside SoC limits [{self.battery.soc_min}, {self.battery.soc_max}]"
            )
        self.episode = episode
        return self._make_state(energy, 0, float(episode.prices[0, 0]))

    def _make_state(self, energy: float, t: int, ema: float) -> EnvState:
        ep = self.episode
        seg = build_segment(ep.prices, t, self.config.seg_len)
        feat = self.feature_fn(seg) if self.feature_fn is not None else None
        prev = ep.price(max(t - 1, 0))
        return EnvState(energy / self.battery.e_cap, energy, prev, seg, t, ema, feat)

    def step(self, state: EnvState, a: BidAction) -> StepOutcome:
        ep = self.episode
        if ep is None:
            raise EpisodeStateError("step() before reset()")
        n = len(ep)
        if state.t >= n:
            raise EpisodeStateError(f"episode finished (t={state.t}, length {n})")
        bat, m, rcfg = self.battery, self.market, self.reward_cfg
        t = state.t
        p = ep.price(t)
        rf, lf = bool(ep.raise_flags[t]), bool(ep.lower_flags[t])

        a = mask_action(a, self.config.market_mode)
        cur = BatteryState(state.energy, state.soc_prev)
        new = bt.step_energy(cur, bt.energy_change(a, rf, lf, bat, m), bat)
        violated = not isinstance(new, BatteryState)
        if violated:
            a = ZERO_ACTION
            new = cur

        ema = update_ema(state.ema_spot, p.spot, rcfg)
        r_s = reward_spot(a, p.spot, ema, rcfg, bat)
        r_f, r_sl, r_d = reward_fcas(a, p, bat)
        reward = r_s + r_f + r_sl + r_d
        if violated:
            reward -= rcfg.penalty

        c_spot = bt.spot_cash(a, p.spot, bat, m)
        c_fcas = bt.fcas_cash(a, p, bat, m)
        c_deg = bt.degradation_cost(a, bat, m)
        cash = c_spot + c_fcas - c_deg

        done = t + 1 >= n or (violated and self.config.terminate_on_violation)
        nxt = self._make_state(new.energy, t + 1, ema)
        info = {
            "spot_cash": c_spot,
            "fcas_cash": c_fcas,
            "deg_cost": c_deg,
            "r_spot": r_s,
            "r_fast": r_f,
            "r_slow": r_sl,
            "r_delay": r_d,
            "raise": rf,
            "lower": lf,
            "energy_before": state.energy,
        }
        return StepOutcome(nxt, reward, done, cash, violated, a, info)


def episode_revenue(outcomes: Sequence[StepOutcome]) -> tuple[float, float, float, float]:
    """(spot revenue, FCAS revenue, degradation cost, total) in AU$."""
    r_spot = math.fsum(o.info["spot_cash"] for o in outcomes)
    r_fcas = math.fsum(o.info["fcas_cash"] for o in outcomes)
    cost = math.fsum(o.info["deg_cost"] for o in outcomes)
    return r_spot, r_fcas, cost, r_spot + r_fcas - cost


def rollout(env: MarketEnv, episode: Episode, policy: Callable[[EnvState], BidAction], initial_soc=None):
    """Run one full episode; returns the list of step outcomes."""
    s = env.reset(episode, initial_soc)
    out = []
    while True:
        o = env.step(s, policy(s))
        out.append(o)
        if o.done:
            return out
        s = o.next_state


def write_trace_csv(path: str | Path, outcomes: Sequence[StepOutcome]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for o in outcomes:
            a = o.action
            w.writerow(
                [o.next_state.t - 1, repr(o.next_state.soc_prev), a.v_dch, a.v_ch]
                + [repr(float(x)) for x in a.fractions]
                + [repr(float(o.reward)), repr(float(o.cash_flow)), int(o.violated)]
            )


# ---------------------------------------------------------------- normalization


@dataclass(frozen=True)
class Normalizer:
    """Per-market z-scoring of prices fed to the networks."""

    mean: tuple[float, ...] = (0.0,) * N_MARKETS
    std: tuple[float, ...] = (1.0,) * N_MARKETS

    @classmethod
    def fit(cls, episodes: Sequence[Episode]) -> "Normalizer":
        allp = np.concatenate([ep.prices for ep in episodes], axis=0)
        mu = allp.mean(axis=0)
        sd = allp.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        return cls(tuple(float(x) for x in mu), tuple(float(x) for x in sd))

    @classmethod
    def identity(cls) -> "Normalizer":
        return cls()

    def apply(self, prices: np.ndarray) -> np.ndarray:
        return (np.asarray(prices, dtype=np.float64) - np.asarray(self.mean)) / np.asarray(self.std)


def observe(state: EnvState, norm: Normalizer) -> tuple[np.ndarray, np.ndarray]:
    """Network inputs for a state: ([soc, 7 normalized prices], normalized (L, 7) segment)."""
    base = np.concatenate([[state.soc_prev], norm.apply(np.asarray(state.price_prev))])
    return base, norm.apply(state.segment)
