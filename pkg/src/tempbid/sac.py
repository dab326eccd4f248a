"""Soft actor-critic bidding agent with a shared temporal feature extractor.

Policy, Q, value and target-value networks are MLPs over the state
``[soc, 7 normalized prices, F' temporal features]``. The policy outputs a
squashed Gaussian over a 5-d latent ``u`` in [-1, 1]^5, decoded into a bid by
:func:`decode_action`. Replay stores latent actions so log-probabilities stay
well defined.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import tensor as tc
from .battery import BatteryConfig, BidAction, clamp_bid
from .data import N_MARKETS, Episode
from .env import EnvState, MarketEnv, Normalizer, mask_action, observe, rollout
from .errors import ConfigError
from .tensor import DTYPE, ParamStore, Tensor, adam_step, backward, linear, relu
from .ttfe import TTFE, TTFEConfig

ACTION_DIM = 5
LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
LOG_COLUMNS = ("episode", "return", "cash", "violations", "loss_pi", "loss_q", "loss_v")


@dataclass(frozen=True)
class SACConfig:
    gamma: float = 0.99
    alpha: float = 0.2
    tau_psi: float = 0.01
    beta_L: float = 10.0
    lr_pi: float = 3e-4
    lr_v: float = 3e-4
    lr_q: float = 3e-4
    buffer_capacity: int = 1_000_000
    batch_size: int = 256
    warmup_transitions: int = 1000
    use_ttfe: bool = True
    hidden: int = 512
    twin_q: bool = False
    update_every: int = 1
    reward_scale: float = 1.0
    # L2 weight on the pre-squash mean and log-std (SAC-v1 reference regularizer); 0 disables
    pre_tanh_reg: float = 0.0
    # "q_and_policy": the shared extractor steps with both losses; "q_only": critic loss only
    ttfe_updates: str = "q_and_policy"
    # extractor steps use the calling loss's learning rate times this factor
    ttfe_lr_scale: float = 1.0
    # policy loss feeds Q a detached state, so the extractor cannot raise Q by moving features
    detach_critic_state: bool = False

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("must be in (0, 1]", "gamma")
        if not 0.0 < self.tau_psi < 1.0:
            raise ConfigError("must be in (0, 1)", "tau_psi")
        for name in ("lr_pi", "lr_v", "lr_q"):
            if not getattr(self, name) > 0:
                raise ConfigError("learning rate must be > 0", name)
        if self.alpha < 0:
            raise ConfigError("must be >= 0", "alpha")
        if self.buffer_capacity < 1 or self.batch_size < 1:
            raise ConfigError("must be >= 1", "batch_size")
        if self.update_every < 1:
            raise ConfigError("must be >= 1", "update_every")
        if not self.ttfe_lr_scale > 0:
            raise ConfigError("must be > 0", "ttfe_lr_scale")
        if self.pre_tanh_reg < 0:
            raise ConfigError("must be >= 0", "pre_tanh_reg")
        if self.ttfe_updates not in ("q_and_policy", "q_only"):
            raise ConfigError("must be 'q_and_policy' or 'q_only'", "ttfe_updates")


# ------------------------------------------------------------- action decoding


def decode_fractions(u: Tensor, bat: BatteryConfig) -> Tensor:
    """Differentiable map from latent u (..., 5) to (a_spot, a_fast, a_slow, a_delay)."""
    half = (u[..., 1:] + 1.0) * 0.5
    scale = torch.tensor([1.0, bat.fcas_cap, bat.fcas_cap, bat.fcas_cap], dtype=u.dtype)
    return half * scale


def decode_action(u, bat: BatteryConfig, market_mode: str = "joint") -> BidAction:
    """Latent u in [-1, 1]^5 -> bid. u[0] >= 0 discharges (ties discharge), else charges."""
    u = np.clip(np.asarray(u, dtype=np.float64), -1.0, 1.0)
    discharge = u[0] >= 0.0
    cap = bat.fcas_cap
    a = BidAction(
        v_dch=int(discharge),
        v_ch=int(not discharge),
        a_spot=(u[1] + 1.0) / 2.0,
        a_fast=(u[2] + 1.0) / 2.0 * cap,
        a_slow=(u[3] + 1.0) / 2.0 * cap,
        a_delay=(u[4] + 1.0) / 2.0 * cap,
    )
    return clamp_bid(mask_action(a, market_mode), bat)


def _mode_mask(market_mode: str) -> torch.Tensor:
    m = {"joint": [1, 1, 1, 1], "spot_only": [1, 0, 0, 0], "fcas_only": [0, 1, 1, 1]}[market_mode]
    return torch.tensor(m, dtype=DTYPE)


def ancillary_loss(u: Tensor, bat: BatteryConfig, market_mode: str = "joint") -> Tensor:
    """Per-sample a_bid * [a_bid > 1] where a_bid sums the decoded bid fractions."""
    a_bid = (decode_fractions(u, bat) * _mode_mask(market_mode)).sum(dim=-1)
    return a_bid * (a_bid > 1.0).to(a_bid.dtype)


def squash_log_prob(z: Tensor, mean: Tensor, log_std: Tensor) -> Tensor:
    """log pi(tanh(z)) for z ~ N(mean, exp(log_std)), summed over action dims."""
    normal = -0.5 * ((z - mean) / torch.exp(log_std)) ** 2 - log_std - 0.5 * math.log(2 * math.pi)
    # log(1 - tanh(z)^2), written to stay finite for large |z|
    log_det = 2.0 * (math.log(2.0) - z - F.softplus(-2.0 * z))
    return (normal - log_det).sum(dim=-1)


def latent_log_prob(u: Tensor, mean: Tensor, log_std: Tensor) -> Tensor:
    """Density of a given latent u in (-1, 1)^5 under the squashed Gaussian."""
    return squash_log_prob(torch.atanh(u), mean, log_std)


# --------------------------------------------------------------------- networks


class MLP:
    """Two ReLU hidden layers and a linear head."""

    def __init__(self, store: ParamStore, in_dim: int, hidden: int, out_dim: int, gen: torch.Generator):
        self.store = store
        store.add_linear("fc1", in_dim, hidden, gen)
        store.add_linear("fc2", hidden, hidden, gen)
        store.add_linear("head", hidden, out_dim, gen)
        self.in_dim = in_dim

    def __call__(self, x: Tensor) -> Tensor:
        s = self.store
        x = relu(linear(x, s["fc1.W"], s["fc1.b"]))
        x = relu(linear(x, s["fc2.W"], s["fc2.b"]))
        return linear(x, s["head.W"], s["head.b"])


@dataclass
class PolicyOutput:
    mean: Tensor
    log_std: Tensor
    u: Tensor
    log_prob: Tensor | None
    z: Tensor | None = None


# ----------------------------------------------------------------------- replay


class ReplayBuffer:
    """Ring buffer of transitions.

    Temporal segments are not copied per transition: each transition keeps an
    (episode slot, step) key and the segment is rebuilt from that episode's
    normalized prices when sampled.
    """

    def __init__(self, capacity: int, seg_len: int, base_dim: int = 1 + N_MARKETS):
        self.capacity = int(capacity)
        self.seg_len = seg_len
        self.base_dim = base_dim
        self.size = 0
        self.ptr = 0
        self.n_added = 0
        self._alloc = 0
        self.base = np.zeros((0, base_dim))
        self.base2 = np.zeros((0, base_dim))
        self.u = np.zeros((0, ACTION_DIM))
        self.r = np.zeros(0)
        self.done = np.zeros(0)
        self.slot = np.zeros(0, dtype=np.int64)
        self.t = np.zeros(0, dtype=np.int64)
        self.order = np.zeros(0, dtype=np.int64)  # insertion counter, for age checks
        self.episodes: dict[int, np.ndarray] = {}

    def __len__(self):
        return self.size

    def register_episode(self, slot: int, norm_prices: np.ndarray):
        self.episodes[slot] = norm_prices

    def _grow(self):
        new = min(self.capacity, max(1024, 2 * self._alloc))
        for name in ("base", "base2", "u", "r", "done", "slot", "t", "order"):
            old = getattr(self, name)
            arr = np.zeros((new,) + old.shape[1:], dtype=old.dtype)
            arr[: self._alloc] = old
            setattr(self, name, arr)
        self._alloc = new

    def add(self, base, slot: int, t: int, u, r: float, base2, done: bool):
        if self.ptr >= self._alloc:
            self._grow()
        i = self.ptr
        self.base[i], self.base2[i], self.u[i] = base, base2, u
        self.r[i], self.done[i] = r, float(done)
        self.slot[i], self.t[i] = slot, t
        self.order[i] = self.n_added
        self.n_added += 1
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        live = set(np.unique(self.slot[: self.size]).tolist())
        if len(self.episodes) > len(live) + 8:
            self.episodes = {k: v for k, v in self.episodes.items() if k in live}

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(self.size, size=min(batch_size, self.size), replace=False)

    def segments(self, idx: np.ndarray, offset: int = 0) -> np.ndarray:
        """Same rows as build_segment for each transition, gathered one episode slot at a time."""
        slots = self.slot[idx]
        rows = np.clip(self.t[idx, None] + offset + np.arange(-self.seg_len, 0), 0, None)
        first = next(iter(self.episodes.values()))
        out = np.empty((len(idx), self.seg_len, first.shape[1]))
        for slot in np.unique(slots):
            sel = slots == slot
            out[sel] = self.episodes[int(slot)][rows[sel]]
        return out

    def batch(self, idx: np.ndarray) -> dict[str, Tensor]:
        as_t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=DTYPE)
        return {
            "base": as_t(self.base[idx]),
            "seg": as_t(self.segments(idx)),
            "u": as_t(self.u[idx]),
            "r": as_t(self.r[idx]),
            "base2": as_t(self.base2[idx]),
            "seg2": as_t(self.segments(idx, offset=1)),
            "done": as_t(self.done[idx]),
        }

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, Tensor]:
        return self.batch(self.sample_indices(batch_size, rng))


# ------------------------------------------------------------------------ agent


class SACAgent:
    def __init__(
        self,
        sac: SACConfig | None = None,
        ttfe: TTFEConfig | None = None,
        battery: BatteryConfig | None = None,
        normalizer: Normalizer | None = None,
        market_mode: str = "joint",
        seed: int = 0,
    ):
        self.cfg = sac or SACConfig()
        self.ttfe_cfg = ttfe or TTFEConfig()
        self.battery = battery or BatteryConfig()
        self.normalizer = normalizer or Normalizer.identity()
        self.market_mode = market_mode
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        self.noise = torch.Generator().manual_seed(seed + 1)
        self.rng = np.random.default_rng(seed + 2)

        self.feat_dim = self.ttfe_cfg.model_dim
        self.base_dim = 1 + N_MARKETS
        self.state_dim = self.base_dim + self.feat_dim
        h = self.cfg.hidden

        self.ttfe = TTFE(self.ttfe_cfg, gen) if self.cfg.use_ttfe else None
        self.policy = MLP(ParamStore("policy"), self.state_dim, h, 2 * ACTION_DIM, gen)
        self.q1 = MLP(ParamStore("q"), self.state_dim + ACTION_DIM, h, 1, gen)
        self.q2 = MLP(ParamStore("q2"), self.state_dim + ACTION_DIM, h, 1, gen) if self.cfg.twin_q else None
        self.value = MLP(ParamStore("value"), self.state_dim, h, 1, gen)
        self.value_target = MLP(ParamStore("value_target"), self.state_dim, h, 1, gen)
        self.value_target.store.copy_from(self.value.store)

    # ------------------------------------------------------------------ plumbing

    @property
    def stores(self) -> dict[str, ParamStore]:
        out = {}
        if self.ttfe is not None:
            out["ttfe"] = self.ttfe.store
        out["policy"] = self.policy.store
        out["q"] = self.q1.store
        if self.q2 is not None:
            out["q2"] = self.q2.store
        out["value"] = self.value.store
        out["value_target"] = self.value_target.store
        return out

    def zero_grad(self):
        for s in self.stores.values():
            s.zero_grad()

    def features(self, seg: Tensor) -> Tensor:
        """Temporal features for (B, L, 7) normalized segments; zeros without TTFE."""
        if self.ttfe is None:
            return torch.zeros(seg.shape[:-2] + (self.feat_dim,), dtype=DTYPE)
        return self.ttfe(seg)[0]

    def state(self, base: Tensor, seg: Tensor) -> Tensor:
        return torch.cat([base, self.features(seg)], dim=-1)

    def q(self, s: Tensor, u: Tensor, net: MLP | None = None) -> Tensor:
        return (net or self.q1)(torch.cat([s, u], dim=-1)).squeeze(-1)

    def q_min(self, s: Tensor, u: Tensor) -> Tensor:
        q = self.q(s, u)
        if self.q2 is not None:
            q = torch.minimum(q, self.q(s, u, self.q2))
        return q

    def v(self, s: Tensor, target: bool = False) -> Tensor:
        return (self.value_target if target else self.value)(s).squeeze(-1)

    def policy_params(self, s: Tensor) -> tuple[Tensor, Tensor]:
        out = self.policy(s)
        mean, log_std = out[..., :ACTION_DIM], out[..., ACTION_DIM:]
        return mean, torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)

    def sample(self, s: Tensor, deterministic: bool = False) -> PolicyOutput:
        mean, log_std = self.policy_params(s)
        if deterministic:
            return PolicyOutput(mean, log_std, torch.tanh(mean), None, mean)
        eps = torch.randn(mean.shape, generator=self.noise, dtype=DTYPE)
        z = mean + torch.exp(log_std) * eps
        return PolicyOutput(mean, log_std, torch.tanh(z), squash_log_prob(z, mean, log_std), z)

    def observe(self, state: EnvState) -> tuple[np.ndarray, np.ndarray]:
        return observe(state, self.normalizer)

    def sample_action(self, state: EnvState, deterministic: bool = False) -> tuple[np.ndarray, float | None]:
        base, seg = self.observe(state)
        with torch.no_grad():
            s = self.state(torch.as_tensor(base[None]), torch.as_tensor(seg[None]))
            out = self.sample(s, deterministic)
        lp = None if out.log_prob is None else float(out.log_prob[0])
        return out.u[0].numpy().copy(), lp

    def act(self, state: EnvState, deterministic: bool = True) -> BidAction:
        u, _ = self.sample_action(state, deterministic)
        return decode_action(u, self.battery, self.market_mode)

    # ------------------------------------------------------------------ losses

    def q_target(self, batch, gamma: float | None = None) -> Tensor:
        """Bootstrapped target r + gamma * (1 - done) * V_target(s'), without gradient."""
        g = self.cfg.gamma if gamma is None else gamma
        with torch.no_grad():
            s2 = self.state(batch["base2"], batch["seg2"])
            return batch["r"] * self.cfg.reward_scale + g * (1.0 - batch["done"]) * self.v(s2, target=True)

    def q_loss(self, batch) -> Tensor:
        target = self.q_target(batch)
        s = self.state(batch["base"], batch["seg"])
        loss = 0.5 * ((self.q(s, batch["u"]) - target) ** 2).mean()
        if self.q2 is not None:
            loss = loss + 0.5 * ((self.q(s, batch["u"], self.q2) - target) ** 2).mean()
        return loss

    def value_loss(self, batch, s: Tensor | None = None) -> Tensor:
        with torch.no_grad():
            s = self.state(batch["base"], batch["seg"]) if s is None else s.detach()
            out = self.sample(s)
            target = self.q_min(s, out.u) - self.cfg.alpha * out.log_prob
        return 0.5 * ((self.v(s) - target) ** 2).mean()

    def policy_loss(self, batch, s: Tensor | None = None) -> Tensor:
        s = self.state(batch["base"], batch["seg"]) if s is None else s
        out = self.sample(s)
        s_critic = s.detach() if self.cfg.detach_critic_state else s
        soft = (self.cfg.alpha * out.log_prob - self.q_min(s_critic, out.u)).mean()
        anc = ancillary_loss(out.u, self.battery, self.market_mode).mean()
        loss = soft + self.cfg.beta_L * anc
        if self.cfg.pre_tanh_reg > 0:
            loss = loss + self.cfg.pre_tanh_reg * ((out.mean**2).mean() + (out.log_std**2).mean())
        return loss

    # ----------------------------------------------------------------- updates

    def _step_ttfe(self, lr):
        if self.ttfe is not None:
            adam_step(self.ttfe.store, lr * self.cfg.ttfe_lr_scale)

    def update_q(self, batch) -> float:
        self.zero_grad()
        loss = self.q_loss(batch)
        backward(loss)
        adam_step(self.q1.store, self.cfg.lr_q)
        if self.q2 is not None:
            adam_step(self.q2.store, self.cfg.lr_q)
        self._step_ttfe(self.cfg.lr_q)
        self.zero_grad()
        return float(loss.detach())

    def update_value(self, batch, s: Tensor | None = None) -> float:
        self.zero_grad()
        loss = self.value_loss(batch, s)
        backward(loss)
        adam_step(self.value.store, self.cfg.lr_v)
        self.zero_grad()
        return float(loss.detach())

    def update_policy(self, batch, s: Tensor | None = None) -> float:
        self.zero_grad()
        loss = self.policy_loss(batch, s)
        backward(loss)
        adam_step(self.policy.store, self.cfg.lr_pi)
        if self.cfg.ttfe_updates == "q_and_policy":
            self._step_ttfe(self.cfg.lr_pi)
        self.zero_grad()
        return float(loss.detach())

    def update_target(self, tau: float | None = None):
        self.value_target.store.soft_update(self.value.store, self.cfg.tau_psi if tau is None else tau)

    def update(self, batch) -> tuple[float, float, float]:
        lq = self.update_q(batch)
        # the extractor does not move between the value and policy steps, so one forward serves both
        s = self.state(batch["base"], batch["seg"])
        lv = self.update_value(batch, s)
        lp = self.update_policy(batch, s)
        self.update_target()
        return lp, lq, lv

    # ------------------------------------------------------------- checkpoints

    def save(self, path, meta=None):
        meta = dict(meta or {})
        meta.setdefault("use_ttfe", str(self.cfg.use_ttfe))
        tc.save_checkpoint(path, self.stores, meta)

    def load(self, path):
        return tc.load_checkpoint(path, self.stores)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, s in self.stores.items():
            h.update(name.encode())
            h.update(s.checksum().encode())
        return h.hexdigest()


# ---------------------------------------------------------------------- training


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([r["episode"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])

    def to_text(self) -> str:
        lines = [",".join(LOG_COLUMNS)]
        for r in self.rows:
            lines.append(",".join([str(r["episode"])] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]]))
        return "\n".join(lines) + "\n"


def train(
    agent: SACAgent,
    env: MarketEnv,
    episodes: Sequence[Episode],
    n_episodes: int,
    seed: int = 0,
    initial_soc: float | None = None,
    callback=None,
) -> TrainingLog:
    """Interact and learn for ``n_episodes`` episodes drawn from ``episodes``.

    Each step: build the segment, act, fall back to the zero action on an
    energy-limit violation (inside the env), store the transition and, once
    the warmup is filled, update every network every ``update_every`` steps.
    """
    cfg = agent.cfg
    log = TrainingLog()
    if n_episodes <= 0:
        return log
    rng = np.random.default_rng(seed)
    # MLP-DRL never reads segments, so its buffer stores empty ones
    buf = ReplayBuffer(cfg.buffer_capacity, agent.ttfe_cfg.seg_len if agent.ttfe is not None else 0)
    total_steps = 0
    for ep_i in range(n_episodes):
        ep = episodes[int(rng.integers(len(episodes)))]
        buf.register_episode(ep_i, agent.normalizer.apply(ep.prices))
        state = env.reset(ep, initial_soc)
        ret = cash = 0.0
        viol = 0
        losses = []
        while True:
            base, _ = agent.observe(state)
            if buf.n_added < cfg.warmup_transitions:
                u = rng.uniform(-1.0, 1.0, ACTION_DIM)
            else:
                u, _ = agent.sample_action(state)
            o = env.step(state, decode_action(u, agent.battery, agent.market_mode))
            base2, _ = agent.observe(o.next_state)
            buf.add(base, ep_i, state.t, u, o.reward, base2, o.done)
            ret += o.reward
            cash += o.cash_flow
            viol += int(o.violated)
            total_steps += 1
            if len(buf) >= max(cfg.warmup_transitions, 1) and total_steps % cfg.update_every == 0:
                batch = buf.sample(cfg.batch_size, agent.rng)
                losses.append(agent.update(batch))
            if o.done:
                break
            state = o.next_state
        lp, lq, lv = (np.mean(losses, axis=0).tolist() if losses else (math.nan,) * 3)
        row = {"episode": ep_i, "return": ret, "cash": cash, "violations": viol, "loss_pi": lp, "loss_q": lq, "loss_v": lv}
        log.rows.append(row)
        if callback is not None:
            callback(row)
    return log


def evaluate(agent: SACAgent, env: MarketEnv, episodes: Sequence[Episode], initial_soc=None, deterministic=True):
    """Deterministic rollouts; returns per-episode lists of StepOutcome."""
    return [rollout(env, ep, lambda s: agent.act(s, deterministic), initial_soc) for ep in episodes]
