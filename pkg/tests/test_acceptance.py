"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a PASS/FAIL line; the lines are printed together at the
end of the pytest run (see ``pytest_terminal_summary`` in conftest.py).
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import random_episode, record_acceptance
from tempbid import baselines as bl
from tempbid import battery as bt
from tempbid.battery import BatteryConfig, BidAction
from tempbid.cli import main
from tempbid.data import Episode, MarketConfig, SynthConfig, split_episodes, synth_prices
from tempbid.env import EnvConfig, MarketEnv, Normalizer, RewardConfig, episode_revenue, rollout
from tempbid.experiments import FcasConfig, SmokeConfig, run_fcas_response, run_smoke
from tempbid.interpret import attention_spread_hist, decision_components, gradient_map, q_trace, spread_bins
from tempbid.report import read_report_csv
from tempbid.sac import MLP, SACAgent, SACConfig, evaluate, train
from tempbid.tensor import ParamStore, finite_diff_check, layer_norm, linear, relu, softmax_rows, tanh, tensor
from tempbid.ttfe import TTFE, TTFEConfig

BAT = BatteryConfig()
M = MarketConfig()
SMALL_SAC = SACConfig(hidden=16, batch_size=8, warmup_transitions=16, update_every=4)


def _check(number: int, ok: bool, detail: str):
    record_acceptance(number, ok, detail)
    assert ok, detail


def _agent(use_ttfe=True, seed=0, ttfe=TTFEConfig(), mode="joint", norm=None, **kw) -> SACAgent:
    return SACAgent(replace(SMALL_SAC, use_ttfe=use_ttfe, **kw), ttfe, BAT, norm or Normalizer.identity(), mode, seed)


def _random_bid(rng) -> BidAction:
    d = int(rng.integers(0, 3))
    return bt.clamp_bid(BidAction(int(d == 1), int(d == 2), *rng.uniform(0, [1.0, 0.5, 0.5, 0.5])), BAT)


def _zero_qk(agent: SACAgent):
    with torch.no_grad():
        for i in range(agent.ttfe.cfg.n_blocks):
            agent.ttfe.store[f"block{i}.q.W"].zero_()
            agent.ttfe.store[f"block{i}.k.W"].zero_()


# ------------------------------------------------------------------ 1


def test_c1_gradient_fidelity():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    gen = torch.Generator().manual_seed(0)
    errs = {}

    x = tensor(rng.normal(size=(5, 6)))
    store = ParamStore()
    store.add_linear("l", 6, 4, gen)
    errs["linear"] = finite_diff_check(lambda: (linear(x, store["l.W"], store["l.b"]) ** 2).sum(), store, max_coords=None)
    xs = tensor(rng.normal(size=(4, 7)), requires_grad=True)
    w = tensor(rng.normal(size=(4, 7)))
    errs["softmax_rows"] = finite_diff_check(lambda: (softmax_rows(xs) * w).sum(), [xs], max_coords=None)
    ln = ParamStore()
    ln.add("g", rng.normal(size=7))
    ln.add("b", rng.normal(size=7))
    errs["layer_norm"] = finite_diff_check(lambda: (layer_norm(xs, ln["g"], ln["b"]) * w).sum(), [xs, ln["g"], ln["b"]], max_coords=None)
    xr = tensor(rng.normal(size=(4, 7)) + 0.05 * np.sign(rng.normal(size=(4, 7))), requires_grad=True)
    errs["relu"] = finite_diff_check(lambda: (relu(xr) * w).sum(), [xr], max_coords=None)
    errs["tanh"] = finite_diff_check(lambda: (tanh(xs) * w).sum(), [xs], max_coords=None)
    mlp_store = ParamStore()
    mlp = MLP(mlp_store, 6, 8, 3, gen)
    errs["mlp"] = finite_diff_check(lambda: (mlp(x) ** 2).sum(), mlp_store, max_coords=None)

    m = TTFE(TTFEConfig(), gen)
    seg = tensor(rng.normal(size=(32, 7)))
    proj = tensor(rng.normal(size=64))
    errs["ttfe"] = finite_diff_check(lambda: (m(seg)[0] * proj).sum(), m.store, max_coords=6)

    agent = _agent(ttfe=TTFEConfig(), twin_q=True)
    g = torch.Generator().manual_seed(1)
    n = 4

    def r(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    batch = {"base": r(n, 8), "seg": r(n, 32, 7), "u": torch.tanh(r(n, 5)), "r": r(n), "base2": r(n, 8), "seg2": r(n, 32, 7)}
    batch["done"] = torch.ones(n, dtype=torch.float64)  # the bootstrap target is held fixed (semi-gradient)
    nets = {"q": agent.q1.store, "value": agent.value.store, "policy": agent.policy.store}
    for which, st in nets.items():

        def f(which=which):
            agent.noise.manual_seed(7)
            return getattr(agent, f"{which}_loss")(batch)

        errs[f"{which}_loss"] = finite_diff_check(f, st, max_coords=6)
        if which != "value":
            errs[f"{which}_loss/ttfe"] = finite_diff_check(f, agent.ttfe.store, max_coords=3)
    secs = time.perf_counter() - start
    worst = max(errs, key=errs.get)
    _check(1, errs[worst] < 1e-4 and secs < 60, f"max rel err {errs[worst]:.2e} ({worst}), {secs:.1f}s")


# ------------------------------------------------------------------ 2


def test_c2_attention_correctness():
    rng = np.random.default_rng(2)
    m = TTFE(TTFEConfig(), torch.Generator().manual_seed(2))
    worst = 0.0
    for _ in range(100):
        _, records = m(tensor(rng.normal(size=(32, 7)) * rng.uniform(0.1, 30)))
        for att in records:
            worst = max(worst, float((att.sum(-1) - 1.0).abs().max()))
    seg = tensor(rng.normal(size=(32, 7)))
    x = m.embed(seg)
    y, _ = m.mha_block(x, 0)
    f, _ = m(seg)
    shapes = (tuple(seg.shape), tuple(x.shape), tuple(y.shape), tuple(f.shape))
    with torch.no_grad():
        for i in range(m.cfg.n_blocks):
            m.store[f"block{i}.q.W"].zero_()
            m.store[f"block{i}.k.W"].zero_()
    _, records = m(seg)
    uniform = all(bool((att == 1.0 / 32).all()) for att in records)
    ok = worst <= 1e-9 and uniform and shapes == ((32, 7), (32, 64), (32, 64), (64,))
    _check(2, ok, f"max |row sum - 1| {worst:.1e}, zero Q/K uniform={uniform}, shapes {shapes}")


# ------------------------------------------------------------------ 3

# e_min plus two grid steps of 1/6 MWh: three grid points, and one full-power
# 5-minute move of the default 2 MW battery is exactly one step
THREE_POINT_STEP = 1 / 6
THREE_POINT_BAT = BatteryConfig(e_max=0.5 + 2 * THREE_POINT_STEP)
MAX_SEQUENCES = 20_000


def _random_small_problem(rng):
    while True:
        T = int(rng.integers(1, 5))
        levels = int(rng.integers(2, 5))
        mode = str(rng.choice(["joint", "spot_only", "fcas_only"]))
        n_combos = 1 if mode == "spot_only" else levels**3
        if (1 + 2 * n_combos * 2) ** T <= MAX_SEQUENCES:
            break
    spot = rng.uniform(-50, 300, T)
    fcas = rng.uniform(0, 40, (T, 6))
    ep = Episode(np.column_stack([spot, fcas]), rng.random(T) < 0.3, rng.random(T) < 0.3)
    e0 = 0.5 + THREE_POINT_STEP * int(rng.integers(0, 3))
    return bl.DispatchProblem(ep, THREE_POINT_BAT, M, e0, bool(rng.random() < 0.8), mode), levels


def test_c3_dp_equals_brute_force():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    n, mismatches, grid_sizes = 200, 0, set()
    for _ in range(n):
        p, levels = _random_small_problem(rng)
        grid_sizes.add(len(bl.energy_grid(p, THREE_POINT_STEP)[0]))
        dp = bl.pio_solve_dp(p, THREE_POINT_STEP, levels)
        bf = bl.brute_force_solve(p, THREE_POINT_STEP, levels)
        mismatches += dp.objective != bf.objective
    secs = time.perf_counter() - start
    ok = mismatches == 0 and secs < 300 and grid_sizes == {3}
    _check(3, ok, f"{n} instances, {mismatches} mismatches, grid sizes {sorted(grid_sizes)}, {secs:.1f}s")


# ------------------------------------------------------------------ 4


def test_c4_pio_dominance():
    market = MarketConfig(episode_len=48)
    synth = SynthConfig(seed=4, spot_profile="ar1_with_spikes", spot_noise_std=30.0, fcas_noise_std=2.0)
    series, events = synth_prices(synth, 48 * 3)
    eps = split_episodes(series, events, market)
    train_eps, eval_eps = eps[:1], eps[1:]
    env_cfg = EnvConfig(seg_len=8)
    ttfe = TTFEConfig(seg_len=8, model_dim=8, heads=2, n_blocks=1, ffn_dim=8)
    norm = Normalizer.fit(train_eps)
    soc = 0.5
    lines, ok = [], True
    pio_totals = {}
    for mode in ("spot_only", "joint"):
        env = MarketEnv(BAT, market, config=replace(env_cfg, market_mode=mode))
        pio_total = 0.0
        for ep in eval_eps:
            p = bl.DispatchProblem(ep, BAT, market, soc * BAT.e_cap, True, mode)
            sol, _, change = bl.refine_pio(p, power_levels=3)
            ok &= change < 0.005
            pio_total += episode_revenue(bl.realized(p, bl.replay_actions(p, sol), env))[3]
        pio_totals[mode] = pio_total
        others = {}
        rng = np.random.default_rng(5)
        others["idle"] = [rollout(env, ep, lambda s: bt.ZERO_ACTION, soc) for ep in eval_eps]
        others["random"] = [rollout(env, ep, lambda s: _random_bid(rng), soc) for ep in eval_eps]
        for name, fc in (("dmpc-persistence", bl.persistence), ("dmpc-ema", bl.ema_forecaster())):
            pol = lambda ep, fc=fc: bl.dmpc_policy(ep, fc, 12, BAT, market, mode, 0.1, 3)
            others[name] = [rollout(env, ep, pol(ep), soc) for ep in eval_eps]
        for name, flag in (("tempdrl", True), ("mlp-drl", False)):
            agent = _agent(flag, seed=4, ttfe=ttfe, mode=mode, norm=norm)
            train(agent, env, train_eps, 2, seed=4, initial_soc=soc)
            others[name] = evaluate(agent, env, eval_eps, soc)
        for name, runs in others.items():
            total = sum(episode_revenue(r)[3] for r in runs)
            ok &= pio_total >= total - 0.005 * abs(pio_total)
            lines.append(f"{mode}/{name} {total:.1f}")
        lines.append(f"{mode}/pio {pio_total:.1f}")
    ordered = pio_totals["joint"] >= pio_totals["spot_only"] >= 0.0
    _check(4, ok and ordered, f"joint {pio_totals['joint']:.1f} >= spot {pio_totals['spot_only']:.1f} >= 0; " + ", ".join(lines))


# ------------------------------------------------------------------ 5


def test_c5_environment_accounting():
    rng = np.random.default_rng(5)
    env = MarketEnv()
    pen = RewardConfig().penalty
    n_seq, worst_reward, worst_cash, in_bounds = 10_000, 0.0, 0.0, True
    for _ in range(n_seq):
        T = int(rng.integers(1, 13))
        ep = random_episode(rng, T, 0.2)
        it = iter([_random_bid(rng) for _ in range(T)])
        out = rollout(env, ep, lambda s: next(it), float(rng.uniform(0.05, 0.95)))
        for o in out:
            i = o.info
            in_bounds &= BAT.e_min <= o.next_state.energy <= BAT.e_max
            parts = i["r_spot"] + i["r_fast"] + i["r_slow"] + i["r_delay"] - (pen if o.violated else 0.0)
            worst_reward = max(worst_reward, abs(o.reward - parts) / max(1.0, abs(o.reward)))
        direct = math.fsum(
            bt.spot_cash(o.action, ep.prices[t, 0], BAT, M) + bt.fcas_cash(o.action, ep.price(t), BAT, M) - bt.degradation_cost(o.action, BAT, M)
            for t, o in enumerate(out)
        )
        total = episode_revenue(out)[3]
        worst_cash = max(worst_cash, abs(total - direct) / max(1.0, abs(direct)))
    fixture_ep = Episode(np.array([[0.0] + [0.0] * 6, [100.0] + [0.0] * 6]), np.zeros(2, bool), np.zeros(2, bool))
    env_spot = MarketEnv(config=EnvConfig(market_mode="spot_only"))
    acts = iter([BidAction(v_ch=1, a_spot=1.0), BidAction(v_dch=1, a_spot=1.0)])
    fixture = episode_revenue(rollout(env_spot, fixture_ep, lambda s: next(acts), BAT.soc_min))[3]
    p = bl.DispatchProblem(fixture_ep, BAT, M, BAT.e_min, True, "spot_only")
    oracle = bl.brute_force_solve(p, 1 / 60, 2).objective
    ok = in_bounds and worst_reward <= 1e-9 and worst_cash <= 1e-9 and round(fixture, 3) == 15.667 and abs(oracle - fixture) < 1e-9
    detail = f"{n_seq} sequences, bounds ok={in_bounds}, reward err {worst_reward:.1e}, cash err {worst_cash:.1e}, fixture {fixture:.3f} (oracle {oracle:.3f})"
    _check(5, ok, detail)


# ------------------------------------------------------------------ 6


def test_c6_learning_smoke():
    cfg = SmokeConfig()
    start = time.perf_counter()
    seeds = (0, 1, 2)
    passes, parts = 0, []
    for seed in seeds:
        tempdrl = run_smoke(True, seed, cfg)
        mlp = run_smoke(False, seed, cfg)
        ok = tempdrl.ratio >= 0.70 and mlp.ratio >= 0.50
        passes += ok
        parts.append(f"seed {seed}: TempDRL {tempdrl.ratio:.2f}, MLP {mlp.ratio:.2f}")
    secs = time.perf_counter() - start
    ok = passes >= 2 and secs < 30 * 60
    _check(6, ok, f"{passes}/3 seeds pass, {secs / 60:.1f} min; " + "; ".join(parts))


# ------------------------------------------------------------------ 7


def test_c7_fcas_responsiveness():
    res = run_fcas_response(True, 0, FcasConfig())
    st = res.stats
    up, down = res.ratio("raise"), res.ratio("lower")
    ok = (up > 0.5 or down > 0.5) and st.raise_occurred > 0 and st.lower_occurred > 0
    detail = f"raise {st.raise_delivered}/{st.raise_occurred}, lower {st.lower_delivered}/{st.lower_occurred}, {res.seconds:.0f}s"
    _check(7, ok, detail)


# ------------------------------------------------------------------ 8


def _fd_gradient_map(agent: SACAgent, ep: Episode, soc: float, h: float = 1e-4) -> np.ndarray:
    """Independent route: central differences in raw AU$/MWh, binned the same way."""
    from tempbid.env import build_segment

    L = agent.ttfe_cfg.seg_len
    norm = agent.normalizer
    sums, counts = np.zeros((8, 3)), np.zeros(8)
    for t in range(len(ep)):
        raw = build_segment(ep.prices, t, L)
        base = torch.as_tensor(np.concatenate([[soc], norm.apply(ep.prices[max(t - 1, 0)])]))[None]

        def comps(r):
            with torch.no_grad():
                return decision_components(agent, base, torch.as_tensor(norm.apply(r))[None])[0].numpy()

        bins = spread_bins(raw[-1, 0] - raw[:, 0])
        for pos in range(L):
            up, dn = raw.copy(), raw.copy()
            up[pos, 0] += h
            dn[pos, 0] -= h
            sums[bins[pos]] += np.abs((comps(up) - comps(dn)) / (2 * h))
            counts[bins[pos]] += 1
    return np.divide(sums, counts[:, None], out=np.zeros((8, 3)), where=counts[:, None] > 0)


def test_c8_interpretability_probes():
    rng = np.random.default_rng(8)
    ttfe = TTFEConfig(seg_len=32, model_dim=16, heads=2, n_blocks=1, ffn_dim=16)
    ep = random_episode(rng, 40)
    env = MarketEnv(config=EnvConfig(seg_len=32))
    agent = _agent(seed=8, ttfe=ttfe, norm=Normalizer.fit([ep]))
    train(agent, env, [ep], 2, seed=8)
    qt = q_trace(agent, env, ep)
    qn = qt.column("q_norm")
    trace_ok = qn.min() == 0.0 and qn.max() == 1.0 and qt.column("q")[qn.argmax()] == qt.meta["q_max"]

    _zero_qk(agent)
    hist = attention_spread_hist(agent, [ep])
    uni_err = max(abs(w - 1 / 32) for _, w, n in hist.rows if n)

    fresh = _agent(seed=9, ttfe=ttfe, norm=Normalizer.fit([ep]))
    short = Episode(ep.prices[:3], ep.raise_flags[:3], ep.lower_flags[:3])
    analytic = np.array([row[1:4] for row in gradient_map(fresh, [short]).rows])
    numeric = _fd_gradient_map(fresh, short, 0.5)
    mask = (np.abs(analytic) + np.abs(numeric)) > 1e-10
    rel = np.abs(analytic - numeric)[mask] / np.maximum(np.abs(analytic), np.abs(numeric))[mask]
    grad_err = float(rel.max()) if rel.size else 0.0
    ok = trace_ok and uni_err <= 1e-9 and grad_err < 1e-4 and mask.sum() > 0
    _check(8, ok, f"q_trace 0/1 ok={trace_ok}, uniform attention err {uni_err:.1e}, gradient map rel err {grad_err:.1e} over {int(mask.sum())} entries")


# ------------------------------------------------------------------ 9


TINY_RUN = {
    "synth": {"seed": 9, "spot_profile": "ar1_with_spikes"},
    "market": {"episode_len": 24},
    "env": {"seg_len": 6},
    "ttfe": {"seg_len": 6, "model_dim": 8, "heads": 2, "n_blocks": 1, "ffn_dim": 8},
    "sac": {"hidden": 8, "batch_size": 4, "warmup_transitions": 8, "update_every": 4},
    "train": {"episodes": 3, "train_fraction": 0.75},
    "bench": {"lookahead": 3, "soc_grid_step": 0.1, "power_levels": 2},
}


def _run_pipeline(root, cfg, data) -> dict:
    run, ev, ip = root / "run", root / "eval", root / "interp"
    assert main(["--config", cfg, "--seed", "3", "--out", str(run), "train", "--data", data]) == 0
    ck = str(run / "checkpoint.npz")
    assert main(["--config", cfg, "--seed", "3", "--out", str(ev), "eval", "--data", data, "--checkpoint", ck]) == 0
    assert main(["--config", cfg, "--seed", "3", "--out", str(ip), "interpret", "--data", data, "--checkpoint", ck]) == 0
    files = [run / "training_log.csv", ev / "revenue.csv", ev / "behavior.json"] + sorted(ip.glob("*.csv"))
    return {f.relative_to(root).as_posix(): f.read_bytes() for f in files}


def test_c9_reproducibility(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY_RUN))
    assert main(["--config", str(cfg), "--out", str(tmp_path / "data"), "gen-data", "--n-intervals", "96"]) == 0
    data = str(tmp_path / "data" / "prices.csv")
    a = _run_pipeline(tmp_path / "a", str(cfg), data)
    b = _run_pipeline(tmp_path / "b", str(cfg), data)
    identical = a == b and len(a) == 6

    from tempbid.cli import load_agent, save_agent, parse_run_config

    ck = tmp_path / "a" / "run" / "checkpoint.npz"
    agent = load_agent(ck)
    save_agent(tmp_path / "again.npz", agent, parse_run_config(TINY_RUN))
    again = load_agent(tmp_path / "again.npz")
    round_trip = all(
        np.array_equal(x.detach().numpy(), y.detach().numpy())
        for name in agent.stores
        for x, y in zip(agent.stores[name].values(), again.stores[name].values())
    ) and agent.content_hash() == again.content_hash()
    _check(9, identical and round_trip, f"{len(a)} report files identical={identical}, checkpoint round trip={round_trip}")


# ------------------------------------------------------------------ 10


def test_c10_dmpc_perfect_forecast():
    rng = np.random.default_rng(10)
    n, matches = 50, 0
    for _ in range(n):
        T = int(rng.integers(2, 9))
        ep = random_episode(rng, T, 0.0)
        e0 = float(rng.choice(bl.energy_grid(bl.DispatchProblem(ep, BAT, initial_energy=5.0), 0.5)[0]))
        mode = str(rng.choice(["joint", "spot_only", "fcas_only"]))
        p = bl.DispatchProblem(ep, BAT, M, e0, False, mode)
        first = bl.replay_actions(p, bl.pio_solve_dp(p, 1 / 60, 3))[0]
        got = bl.dmpc_bid(ep.prices[:1], bl.perfect_forecaster(ep.prices), e0, T, BAT, M, mode, 1 / 60, 3)
        matches += got == first
    _check(10, matches == n, f"{matches}/{n} first actions identical")
