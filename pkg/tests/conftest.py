import numpy as np
import pytest
import torch

from tempbid.battery import BatteryConfig
from tempbid.data import Episode, MarketConfig
from tempbid.env import EnvConfig, MarketEnv, Normalizer
from tempbid.sac import SACAgent, SACConfig
from tempbid.ttfe import TTFEConfig

TINY_TTFE = TTFEConfig(seg_len=6, model_dim=8, heads=2, n_blocks=2, ffn_dim=12)
TINY_SAC = SACConfig(hidden=10, batch_size=4, warmup_transitions=8)


def make_episode(spot, fcas=None, raises=None, lowers=None) -> Episode:
    spot = np.asarray(spot, dtype=np.float64)
    n = len(spot)
    prices = np.zeros((n, 7))
    prices[:, 0] = spot
    if fcas is not None:
        prices[:, 1:] = np.asarray(fcas, dtype=np.float64)
    r = np.zeros(n, dtype=bool) if raises is None else np.asarray(raises, dtype=bool)
    lo = np.zeros(n, dtype=bool) if lowers is None else np.asarray(lowers, dtype=bool)
    return Episode(prices, r, lo)


def random_episode(rng: np.random.Generator, n: int, event_rate: float = 0.1) -> Episode:
    prices = np.column_stack([rng.uniform(-20, 300, n), rng.uniform(0, 10, (n, 6))])
    return Episode(prices, rng.random(n) < event_rate, rng.random(n) < event_rate)


def tiny_agent(use_ttfe=True, seed=0, market_mode="joint", **sac_kw) -> SACAgent:
    sac = SACConfig(**{**TINY_SAC.__dict__, "use_ttfe": use_ttfe, **sac_kw})
    return SACAgent(sac, TINY_TTFE, BatteryConfig(), Normalizer.identity(), market_mode, seed)


def tiny_env(market_mode="joint") -> MarketEnv:
    return MarketEnv(BatteryConfig(), MarketConfig(), config=EnvConfig(seg_len=TINY_TTFE.seg_len, market_mode=market_mode))


def random_batch(agent: SACAgent, n=4, seed=0) -> dict:
    g = torch.Generator().manual_seed(seed)
    L = agent.ttfe_cfg.seg_len

    def r(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    return {
        "base": r(n, 8),
        "seg": r(n, L, 7),
        "u": torch.tanh(r(n, 5)),
        "r": r(n),
        "base2": r(n, 8),
        "seg2": r(n, L, 7),
        "done": torch.zeros(n, dtype=torch.float64),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, ok: bool, detail: str):
    ACCEPTANCE[number] = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
