"""Property-based checks of the invariants each module promises."""

import math
from dataclasses import replace

import numpy as np
import torch
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import make_episode, tiny_agent
from tempbid import battery as bt
from tempbid.baselines import DispatchProblem, brute_force_solve, pio_solve_dp
from tempbid.battery import BatteryConfig, BatteryState, BidAction
from tempbid.data import Episode, MarketConfig
from tempbid.env import MarketEnv, RewardConfig, episode_revenue, reward_spot, rollout
from tempbid.sac import ReplayBuffer, latent_log_prob, squash_log_prob
from tempbid.tensor import layer_norm, softmax_rows, tensor

BAT = BatteryConfig()
M = MarketConfig()
frac = st.floats(0.0, 1.0, allow_nan=False)
cap = st.floats(0.0, 0.5, allow_nan=False)
SETTINGS = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@st.composite
def bids(draw):
    d = draw(st.sampled_from([(0, 0), (1, 0), (0, 1)]))
    return bt.clamp_bid(BidAction(d[0], d[1], draw(frac), draw(cap), draw(cap), draw(cap)), BAT)


@st.composite
def episodes(draw, n_min=1, n_max=12):
    n = draw(st.integers(n_min, n_max))
    spot = draw(st.lists(st.floats(-100, 1000), min_size=n, max_size=n))
    fcas = draw(st.lists(st.lists(st.floats(0, 50), min_size=6, max_size=6), min_size=n, max_size=n))
    flags = draw(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=n, max_size=n))
    prices = np.column_stack([spot, fcas])
    return Episode(prices, np.array([f[0] for f in flags]), np.array([f[1] for f in flags]))


# -------------------------------------------------------------------- battery


@SETTINGS
@given(st.lists(bids(), min_size=1, max_size=40), st.lists(st.tuples(st.booleans(), st.booleans()), min_size=40, max_size=40))
def test_committed_energy_stays_in_bounds(actions, flags):
    s = BatteryState.from_energy(5.0, BAT)
    for a, (rf, lf) in zip(actions, flags):
        new = bt.step_energy(s, bt.energy_change(a, rf, lf, BAT, M), BAT)
        if new:
            s = new
        assert BAT.e_min <= s.energy <= BAT.e_max


@SETTINGS
@given(frac)
def test_spot_energy_antisymmetric(a):
    up = bt.energy_change_spot(BidAction(v_ch=1, a_spot=a), BAT, M)
    down = bt.energy_change_spot(BidAction(v_dch=1, a_spot=a), BAT, M)
    assert up == bt.energy_change_spot(BidAction(v_dch=1, a_spot=a), replace(BAT), M) * 0 + up
    # swapping the direction flips the sign of the pre-efficiency energy flow
    assert up * BAT.eta_dch == -down * BAT.eta_ch or math.isclose(up * BAT.eta_dch, -down * BAT.eta_ch, rel_tol=1e-15)


@SETTINGS
@given(bids())
def test_no_events_no_fcas_energy(a):
    assert bt.energy_change_fcas(a, False, False, BAT, M) == 0.0


@SETTINGS
@given(bids(), st.booleans(), st.booleans())
def test_total_energy_is_sum_of_parts(a, rf, lf):
    total = bt.energy_change(a, rf, lf, BAT, M)
    assert total == bt.energy_change_spot(a, BAT, M) + bt.energy_change_fcas(a, rf, lf, BAT, M)


# ------------------------------------------------------------------------ env


@SETTINGS
@given(episodes(), st.data())
def test_reward_and_cash_reconciliation(ep, data):
    acts = [data.draw(bids()) for _ in range(len(ep))]
    it = iter(acts)
    out = rollout(MarketEnv(), ep, lambda s: next(it))
    pen = RewardConfig().penalty
    for o in out:
        i = o.info
        parts = i["r_spot"] + i["r_fast"] + i["r_slow"] + i["r_delay"] - (pen if o.violated else 0.0)
        assert abs(o.reward - parts) <= 1e-12 * max(1.0, abs(o.reward))
        if o.violated:
            assert o.next_state.soc_prev == i["energy_before"] / BAT.e_cap
    total = episode_revenue(out)[3]
    direct = math.fsum(
        bt.spot_cash(o.action, ep.prices[t, 0], BAT, M) + bt.fcas_cash(o.action, ep.price(t), BAT, M) - bt.degradation_cost(o.action, BAT, M)
        for t, o in enumerate(out)
    )
    assert math.isclose(total, direct, rel_tol=1e-9, abs_tol=1e-9)


@SETTINGS
@given(st.floats(0.0, 0.99), st.floats(0.01, 1.0), st.floats(1, 500), st.floats(0, 500))
def test_discharge_reward_monotone(a, da, spot, below):
    ema = spot - below - 1.0
    lo = reward_spot(BidAction(v_dch=1, a_spot=a), spot, ema, RewardConfig(), BAT)
    hi = reward_spot(BidAction(v_dch=1, a_spot=min(1.0, a + da)), spot, ema, RewardConfig(), BAT)
    assert hi > lo


# --------------------------------------------------------------------- tensor


@SETTINGS
@given(st.lists(st.lists(st.floats(-50, 50), min_size=3, max_size=3), min_size=1, max_size=5))
def test_softmax_rows_are_distributions(rows):
    p = softmax_rows(tensor(rows))
    assert torch.allclose(p.sum(-1), torch.ones(len(rows), dtype=torch.float64), atol=1e-12)
    assert ((p >= 0) & (p <= 1)).all()


@SETTINGS
@given(st.lists(st.floats(-100, 100), min_size=4, max_size=8).filter(lambda r: np.var(r) > 1.0))
def test_layer_norm_standardizes(row):
    n = len(row)
    y = layer_norm(tensor([row]), tensor(np.ones((1, n))), tensor(np.zeros((1, n))))[0].numpy()
    assert abs(y.mean()) < 1e-10
    assert abs(y.var() - 1.0) < 1e-4


# ------------------------------------------------------------------------ sac


def test_log_prob_normalizes():
    # importance-sample u uniformly on (-1, 1)^5 against the squashed Gaussian density
    g = np.random.default_rng(0)
    n = 100_000
    u = torch.as_tensor(g.uniform(-1 + 1e-9, 1 - 1e-9, (n, 5)))
    mean = torch.full((n, 5), 0.2, dtype=torch.float64)
    log_std = torch.full((n, 5), -0.3, dtype=torch.float64)
    dens = torch.exp(latent_log_prob(u, mean, log_std)).numpy()
    integral = dens.mean() * 2.0**5
    assert abs(integral - 1.0) < 0.05


def test_replay_sampling_uniform():
    buf = ReplayBuffer(50, 2)
    buf.register_episode(0, np.zeros((60, 7)))
    for t in range(50):
        buf.add(np.zeros(8), 0, t, np.zeros(5), 0.0, np.zeros(8), False)
    rng = np.random.default_rng(0)
    counts = np.zeros(50)
    for _ in range(100_000 // 10):
        np.add.at(counts, buf.sample_indices(10, rng), 1)
    assert stats.chisquare(counts).pvalue > 0.01


@SETTINGS
@given(st.integers(1, 40), st.integers(1, 30))
def test_replay_never_returns_evicted(capacity, extra):
    buf = ReplayBuffer(capacity, 2)
    buf.register_episode(0, np.zeros((capacity + extra + 1, 7)))
    n = capacity + extra
    for t in range(n):
        buf.add(np.zeros(8), 0, t, np.zeros(5), float(t), np.zeros(8), False)
    idx = buf.sample_indices(capacity, np.random.default_rng(t))
    assert buf.r[idx].min() >= n - capacity


@SETTINGS
@given(st.lists(st.floats(-5, 5), min_size=5, max_size=5))
def test_log_prob_consistent_with_latent(z):
    z = tensor([z])
    mean, log_std = tensor([[0.1] * 5]), tensor([[-0.5] * 5])
    u = torch.tanh(z)
    if (u.abs() < 1 - 1e-12).all():
        assert torch.allclose(squash_log_prob(z, mean, log_std), latent_log_prob(u, mean, log_std), atol=1e-6)


# ------------------------------------------------------------------ baselines


@settings(max_examples=40, deadline=None)
@given(episodes(1, 2), st.integers(0, 12))
def test_dp_equals_brute_force(ep, k0):
    p = DispatchProblem(ep, BAT, initial_energy=BAT.e_min + k0 * 0.75)
    assert pio_solve_dp(p, 0.1, 2).objective == brute_force_solve(p, 0.1, 2).objective


def test_probes_do_not_mutate_parameters():
    from tempbid.interpret import attention_spread_hist, gradient_map

    agent = tiny_agent()
    before = agent.content_hash()
    ep = make_episode(np.linspace(10, 90, 8))
    attention_spread_hist(agent, [ep])
    gradient_map(agent, [ep])
    assert agent.content_hash() == before
