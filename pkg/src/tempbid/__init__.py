"""Temporal-aware joint spot/FCAS bidding for a battery: simulator, agent, baselines and probes."""

from .battery import BatteryConfig, BidAction
from .data import Episode, MarketConfig, SynthConfig, synth_prices, split_episodes
from .env import EnvConfig, MarketEnv, Normalizer, RewardConfig
from .sac import SACAgent, SACConfig
from .ttfe import TTFE, TTFEConfig

__all__ = [
    "BatteryConfig",
    "BidAction",
    "Episode",
    "MarketConfig",
    "SynthConfig",
    "synth_prices",
    "split_episodes",
    "EnvConfig",
    "MarketEnv",
    "Normalizer",
    "RewardConfig",
    "SACAgent",
    "SACConfig",
    "TTFE",
    "TTFEConfig",
]
