"""Optimization baselines: perfect-information dispatch, a brute-force check and rolling MPC.

Discretization
--------------
Energy lives on the grid ``{e0 + k * step} ∩ [e_min, e_max]`` anchored at the
initial energy. A discrete action is ``(direction, fcas levels, k)``:
direction is idle / charge / discharge, each FCAS bid takes one of
``power_levels`` evenly spaced fractions in [0, p_max_fcas / p_max], and the
battery moves ``k >= 0`` grid steps in the chosen direction. The spot power is
whatever makes that move exact::

    p_spot = (k * step - E_fcas) / dt,   0 <= p_spot <= p_max - sum(P_fcas)

where ``E_fcas`` is the energy moved by FCAS delivery under the assumed
events. The continuous problem is a MILP (binary direction per interval,
linear cash flow, linear energy balance, box limits on energy and power);
on the grid it is solved exactly by backward induction.

Ties are broken towards the lexicographically smallest action, ordered by
(direction, fcas level tuple, k), identically in the DP and the brute force.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import battery as bt
from .battery import BatteryConfig, BidAction, ZERO_ACTION
from .data import N_MARKETS, Episode, MarketConfig
from .env import EnvConfig, MarketEnv, RewardConfig, rollout
from .errors import ContractError, SizeError

IDLE, CHARGE, DISCHARGE = 0, 1, 2
DEFAULT_GRID_STEP = 1.0 / 60.0
DEFAULT_POWER_LEVELS = 5
BRUTE_MAX_T = 6
BRUTE_MAX_LEVELS = 4


@dataclass(frozen=True)
class DispatchProblem:
    episode: Episode
    battery: BatteryConfig = BatteryConfig()
    market: MarketConfig = MarketConfig()
    initial_energy: float = 5.0
    # True: optimize against the episode's event flags; False: assume none occur
    known_events: bool = True
    market_mode: str = "joint"

    def __post_init__(self):
        if len(self.episode) == 0:
            raise ValueError("dispatch problem needs a non-empty price slice")
        if not self.battery.e_min <= self.initial_energy <= self.battery.e_max:
            raise ValueError(
                f"initial energy {self.initial_energy} outside [{self.battery.e_min}, {self.battery.e_max}]"
            )

    def __len__(self):
        return len(self.episode)


@dataclass(frozen=True)
class DispatchSolution:
    actions: tuple[BidAction, ...]
    objective: float
    energy: np.ndarray  # length T + 1, grid energies
    choices: tuple[tuple[int, int, int], ...]  # (direction, combo index, k) per step


# ------------------------------------------------------------ discretization


def energy_grid(p: DispatchProblem, step: float) -> tuple[np.ndarray, int]:
    """Grid energies (ascending) and the index of the initial energy."""
    if not step > 0:
        raise ValueError("soc_grid_step must be > 0")
    bat, e0 = p.battery, p.initial_energy
    n_down = int(math.floor((e0 - bat.e_min) / step + 1e-9))
    n_up = int(math.floor((bat.e_max - e0) / step + 1e-9))
    g = e0 + step * np.arange(-n_down, n_up + 1)
    g[np.abs(g - bat.e_min) < 1e-9] = bat.e_min
    g[np.abs(g - bat.e_max) < 1e-9] = bat.e_max
    return np.clip(g, bat.e_min, bat.e_max), n_down


def fcas_combos(p: DispatchProblem, power_levels: int) -> np.ndarray:
    """All (fast, slow, delay) bid-fraction triples, lexicographic; (1, 3) zero row outside joint/fcas modes."""
    if power_levels < 2:
        raise ValueError("power_levels must be >= 2")
    if p.market_mode == "spot_only":
        return np.zeros((1, 3))
    levels = np.linspace(0.0, p.battery.fcas_cap, power_levels)
    return np.array(list(itertools.product(levels, repeat=3)))


@dataclass(frozen=True)
class _Tables:
    grid: np.ndarray
    start: int
    combos: np.ndarray
    kmax: int
    step: float


def _tables(p: DispatchProblem, step: float, power_levels: int) -> _Tables:
    grid, start = energy_grid(p, step)
    combos = fcas_combos(p, power_levels)
    kmax = min(len(grid) - 1, int(math.floor(p.battery.p_max * p.market.dt_hours / step + 1e-9)))
    return _Tables(grid, start, combos, kmax, step)


def step_rewards(p: DispatchProblem, tab: _Tables, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Cash flow of every (direction, combo, k) at step t, -inf where infeasible.

    Returns (reward, spot fraction), both shaped (3, n_combos, kmax + 1).
    Idle is only defined at combo 0, k 0.
    """
    bat, m, ep = p.battery, p.market, p.episode
    price = ep.prices[t]
    spot, fr, fl, sr, sl, dr, dl = (float(x) for x in price)
    spot_allowed = p.market_mode != "fcas_only"
    C, K = len(tab.combos), tab.kmax + 1
    reward = np.full((3, C, K), -np.inf)
    frac = np.zeros((3, C, K))
    reward[IDLE, 0, 0] = 0.0

    pf, ps, pd = (tab.combos * bat.p_max).T  # MW
    k_energy = np.arange(K) * tab.step
    rf, lf = (bool(ep.raise_flags[t]), bool(ep.lower_flags[t])) if p.known_events else (False, False)
    delivered = m.dt_fast * pf + m.dt_slow * ps + m.dt_delay * pd
    headroom = bat.p_max - (pf + ps + pd)
    for d, (v_dch, v_ch) in ((CHARGE, (0, 1)), (DISCHARGE, (1, 0))):
        a_dir = BidAction(v_dch=v_dch, v_ch=v_ch)
        mult = bt.event_multiplier(a_dir, rf, lf, bat)
        e_fcas = mult * delivered
        p_spot = (k_energy[None, :] - e_fcas[:, None]) / m.dt_hours
        ok = (p_spot >= -1e-12) & (p_spot <= headroom[:, None] + 1e-12)
        if not spot_allowed:
            ok &= np.abs(p_spot) <= 1e-12
        p_spot = np.clip(p_spot, 0.0, None) if spot_allowed else np.zeros_like(p_spot)
        coef = v_dch * bat.eta_dch - v_ch / bat.eta_ch
        c_spot = m.dt_hours * coef * spot * p_spot
        raise_part = v_dch * bat.eta_dch * (fr * pf + sr * ps + dr * pd)
        lower_part = v_ch / bat.eta_ch * (fl * pf + sl * ps + dl * pd)
        c_fcas = m.dt_hours * (raise_part + lower_part)
        c_deg = bat.c_deg * m.dt_hours * v_dch * (p_spot + (pf + ps + pd)[:, None])
        r = c_spot + c_fcas[:, None] - c_deg
        reward[d] = np.where(ok, r, -np.inf)
        frac[d] = p_spot / bat.p_max
    return reward, frac


def _successor(d: int, g: int, k: int) -> int:
    return g + k if d == CHARGE else g - k if d == DISCHARGE else g


# ------------------------------------------------------------------- solvers


def pio_solve_dp(
    p: DispatchProblem, soc_grid_step: float = DEFAULT_GRID_STEP, power_levels: int = DEFAULT_POWER_LEVELS
) -> DispatchSolution:
    """Backward induction over (t, energy grid) with the full discrete action set."""
    tab = _tables(p, soc_grid_step, power_levels)
    T, G = len(p), len(tab.grid)
    C, K = len(tab.combos), tab.kmax + 1
    value = np.zeros(G)
    policy = np.zeros((T, G), dtype=np.int64)
    gi = np.arange(G)
    ks = np.arange(K)
    rewards = []
    for t in range(T - 1, -1, -1):
        r, frac = step_rewards(p, tab, t)
        rewards.append((r, frac))
        # continuation value per (direction, g, k); -inf off the grid
        up = gi[:, None] + ks[None, :]
        dn = gi[:, None] - ks[None, :]
        cont = np.full((3, G, K), -np.inf)
        cont[IDLE] = np.where(ks[None, :] == 0, value[:, None], -np.inf)
        cont[CHARGE] = np.where(up < G, value[np.minimum(up, G - 1)], -np.inf)
        cont[DISCHARGE] = np.where(dn >= 0, value[np.maximum(dn, 0)], -np.inf)
        q = r[:, None, :, :] + cont[:, :, None, :]  # (3, G, C, K)
        flat = q.transpose(1, 0, 2, 3).reshape(G, -1)
        best = np.argmax(flat, axis=1)
        policy[t] = best
        value = flat[gi, best]
    rewards.reverse()

    g = tab.start
    energy = [tab.grid[g]]
    choices, actions = [], []
    for t in range(T):
        d, c, k = np.unravel_index(policy[t, g], (3, C, K))
        d, c, k = int(d), int(c), int(k)
        choices.append((d, c, k))
        actions.append(_to_action(d, tab.combos[c], rewards[t][1][d, c, k]))
        g = _successor(d, g, k)
        energy.append(tab.grid[g])
    return DispatchSolution(tuple(actions), float(value[tab.start]), np.array(energy), tuple(choices))


def brute_force_solve(
    p: DispatchProblem, soc_grid_step: float = DEFAULT_GRID_STEP, power_levels: int = DEFAULT_POWER_LEVELS
) -> DispatchSolution:
    """Exhaustive enumeration on the DP's discretization (small instances only)."""
    if len(p) > BRUTE_MAX_T or power_levels > BRUTE_MAX_LEVELS:
        raise SizeError(f"brute force limited to T <= {BRUTE_MAX_T} and <= {BRUTE_MAX_LEVELS} power levels")
    tab = _tables(p, soc_grid_step, power_levels)
    T, G = len(p), len(tab.grid)
    tables = [step_rewards(p, tab, t) for t in range(T)]
    feasible = [
        [(d, c, k) for d in range(3) for c in range(len(tab.combos)) for k in range(tab.kmax + 1) if np.isfinite(r[d, c, k])]
        for r, _ in tables
    ]

    best_total, best_seq = -math.inf, None
    for seq in itertools.product(*feasible):
        g, ok = tab.start, True
        for d, c, k in seq:
            g = _successor(d, g, k)
            if not 0 <= g < G:
                ok = False
                break
        if not ok:
            continue
        total = 0.0
        for t in range(T - 1, -1, -1):
            d, c, k = seq[t]
            total = tables[t][0][d, c, k] + total
        if total > best_total:
            best_total, best_seq = total, seq

    g = tab.start
    energy, actions = [tab.grid[g]], []
    for t, (d, c, k) in enumerate(best_seq):
        actions.append(_to_action(d, tab.combos[c], tables[t][1][d, c, k]))
        g = _successor(d, g, k)
        energy.append(tab.grid[g])
    return DispatchSolution(tuple(actions), float(best_total), np.array(energy), tuple(best_seq))


def _to_action(d: int, combo: np.ndarray, spot_frac: float) -> BidAction:
    if d == IDLE:
        return ZERO_ACTION
    f, s, dl = (float(x) for x in combo)
    return BidAction(v_dch=int(d == DISCHARGE), v_ch=int(d == CHARGE), a_spot=float(spot_frac), a_fast=f, a_slow=s, a_delay=dl)


def replay_actions(p: DispatchProblem, sol: DispatchSolution) -> list[BidAction]:
    """Actions adjusted so that exact replay through the battery model stays inside the energy limits.

    Grid energies and the physics' running sum can differ in the last ulp;
    where that would cross a limit the spot fraction is nudged down.
    """
    bat, m, ep = p.battery, p.market, p.episode
    e = p.initial_energy
    out = []
    for t, a in enumerate(sol.actions):
        rf, lf = bool(ep.raise_flags[t]), bool(ep.lower_flags[t])
        for _ in range(64):
            new = bt.step_energy(bt.BatteryState.from_energy(e, bat), bt.energy_change(a, rf, lf, bat, m), bat)
            if new or a.a_spot == 0.0:
                break
            a = replace(a, a_spot=float(np.nextafter(a.a_spot, 0.0) * (1 - 1e-13)))
        if new:
            e = new.energy
        out.append(a)
    return out


def realized(p: DispatchProblem, actions: Sequence[BidAction], env: MarketEnv | None = None):
    """Replay a fixed action list through the market environment; returns step outcomes."""
    env = env or MarketEnv(p.battery, p.market, RewardConfig(), EnvConfig(market_mode=p.market_mode))
    it = iter(actions)
    return rollout(env, p.episode, lambda s: next(it), p.initial_energy / p.battery.e_cap)


def refine_pio(
    p: DispatchProblem,
    soc_grid_step: float = DEFAULT_GRID_STEP,
    power_levels: int = DEFAULT_POWER_LEVELS,
    rel_tol: float = 0.005,
    max_rounds: int = 4,
) -> tuple[DispatchSolution, float, float]:
    """Halve the energy grid step until the objective changes by less than ``rel_tol``.

    Returns (solution, final step, final relative change).
    """
    sol = pio_solve_dp(p, soc_grid_step, power_levels)
    change = math.inf
    for _ in range(max_rounds):
        soc_grid_step /= 2
        nxt = pio_solve_dp(p, soc_grid_step, power_levels)
        change = abs(nxt.objective - sol.objective) / max(abs(nxt.objective), 1e-12)
        sol = nxt
        if change < rel_tol:
            break
    return sol, soc_grid_step, change


# -------------------------------------------------------------- forecasting

Forecaster = Callable[[np.ndarray, int], np.ndarray]


def persistence(history: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat the last observed price vector."""
    history = np.asarray(history, dtype=np.float64)
    if len(history) == 0:
        raise ValueError("history is empty")
    return np.repeat(history[-1:], horizon, axis=0)


def ema_forecaster(tau: float = 0.9) -> Forecaster:
    """Repeat the exponentially smoothed price vector (seeded with the first observation)."""

    def predict(history: np.ndarray, horizon: int) -> np.ndarray:
        history = np.asarray(history, dtype=np.float64)
        if len(history) == 0:
            raise ValueError("history is empty")
        s = history[0].copy()
        for row in history[1:]:
            s = tau * s + (1.0 - tau) * row
        return np.repeat(s[None], horizon, axis=0)

    return predict


def perfect_forecaster(future: np.ndarray) -> Forecaster:
    """Oracle returning the true upcoming prices regardless of history."""
    future = np.asarray(future, dtype=np.float64)

    def predict(history: np.ndarray, horizon: int) -> np.ndarray:
        return future[:horizon]

    return predict


def dmpc_bid(
    history: np.ndarray,
    forecaster: Forecaster,
    energy: float,
    lookahead: int = 48,
    battery: BatteryConfig | None = None,
    market: MarketConfig | None = None,
    market_mode: str = "joint",
    soc_grid_step: float = DEFAULT_GRID_STEP,
    power_levels: int = DEFAULT_POWER_LEVELS,
) -> BidAction:
    """Forecast, solve the event-free lookahead problem and return its first action."""
    if len(history) == 0:
        raise ValueError("history is empty")
    pred = np.asarray(forecaster(history, lookahead), dtype=np.float64)
    if pred.shape != (lookahead, N_MARKETS):
        raise ContractError(f"forecaster returned shape {pred.shape}, expected ({lookahead}, {N_MARKETS})")
    ep = Episode(pred, np.zeros(lookahead, dtype=bool), np.zeros(lookahead, dtype=bool))
    p = DispatchProblem(ep, battery or BatteryConfig(), market or MarketConfig(), energy, False, market_mode)
    sol = pio_solve_dp(p, soc_grid_step, power_levels)
    return replay_actions(p, sol)[0]


def dmpc_policy(
    episode: Episode,
    forecaster: Forecaster,
    lookahead: int = 48,
    battery: BatteryConfig | None = None,
    market: MarketConfig | None = None,
    market_mode: str = "joint",
    soc_grid_step: float = DEFAULT_GRID_STEP,
    power_levels: int = DEFAULT_POWER_LEVELS,
):
    """Env policy callable. History at step t is prices[:t], or the first row alone at t = 0."""
    prices = episode.prices

    def policy(state) -> BidAction:
        hist = prices[: max(state.t, 1)]
        return dmpc_bid(hist, forecaster, state.energy, lookahead, battery, market, market_mode, soc_grid_step, power_levels)

    return policy
