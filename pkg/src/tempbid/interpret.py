"""Post-hoc probes of a trained agent: Q-value traces, attention versus price spread, input-gradient maps.

None of the probes touch parameter gradients or values; input gradients are
taken with ``torch.autograd.grad`` on leaf copies of the segment.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Episode
from .env import MarketEnv, build_segment, observe
from .errors import CapabilityError
from .sac import SACAgent, decode_action, decode_fractions, _mode_mask
from .tensor import DTYPE

SPREAD_BIN_LABELS = ("(-inf,-20)", "[-20,-10)", "[-10,-5)", "[-5,0)", "[0,5]", "(5,10]", "(10,20]", "(20,inf)")
GRADIENT_COMPONENTS = ("charge", "discharge", "total_bid")


def spread_bin(spread: float) -> int:
    """Index of the spread bin; the middle bin [0, 5] is closed on both sides."""
    if spread < -20:
        return 0
    if spread < -10:
        return 1
    if spread < -5:
        return 2
    if spread < 0:
        return 3
    if spread <= 5:
        return 4
    if spread <= 10:
        return 5
    if spread <= 20:
        return 6
    return 7


def spread_bins(spreads: np.ndarray) -> np.ndarray:
    return np.array([spread_bin(float(x)) for x in np.ravel(spreads)], dtype=np.int64).reshape(np.shape(spreads))


@dataclass
class ProbeReport:
    kind: str
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([repr(x) if isinstance(x, float) else x for x in r])

    def to_json(self) -> dict:
        return {"kind": self.kind, "columns": list(self.columns), "rows": [list(r) for r in self.rows], "meta": self.meta}


def _segments_of(
    agent: SACAgent, episodes: Sequence[Episode], soc: float = 0.5
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(base, normalized segment, raw segment) for every step of every episode, at a fixed SoC."""
    L = agent.ttfe_cfg.seg_len
    norm = agent.normalizer
    out = []
    for ep in episodes:
        for t in range(len(ep)):
            raw = build_segment(ep.prices, t, L)
            prev = ep.prices[max(t - 1, 0)]
            base = np.concatenate([[soc], norm.apply(prev)])
            out.append((base, norm.apply(raw), raw))
    return out


def _segment_spreads(raw: np.ndarray) -> np.ndarray:
    """Newest spot price minus the spot price at each history position."""
    return raw[-1, 0] - raw[:, 0]


# ---------------------------------------------------------------------- probes


def q_trace(agent: SACAgent, env: MarketEnv, episode: Episode, initial_soc=None) -> ProbeReport:
    """Q(s_t, u_t) along the deterministic trajectory, min-max normalized over the episode.

    A constant trace maps to 0.5.
    """
    state = env.reset(episode, initial_soc)
    rows, qs = [], []
    while True:
        u, _ = agent.sample_action(state, deterministic=True)
        base, seg = observe(state, agent.normalizer)
        with torch.no_grad():
            s = agent.state(torch.as_tensor(base[None]), torch.as_tensor(seg[None]))
            q = float(agent.q(s, torch.as_tensor(u[None]))[0])
        o = env.step(state, decode_action(u, agent.battery, agent.market_mode))
        a = o.action
        rows.append([state.t, a.v_dch, a.v_ch, float(sum(a.fractions)), q])
        qs.append(q)
        if o.done:
            break
        state = o.next_state
    qs = np.array(qs)
    lo, hi = qs.min(), qs.max()
    norm = np.full_like(qs, 0.5) if hi == lo else (qs - lo) / (hi - lo)
    report = ProbeReport("q_trace", ("t", "v_dch", "v_ch", "bid_sum", "q", "q_norm"), meta={"q_min": float(lo), "q_max": float(hi)})
    report.rows = [tuple(r + [float(n)]) for r, n in zip(rows, norm)]
    return report


def attention_row(agent: SACAgent, seg: np.ndarray, row: str = "newest") -> np.ndarray:
    """Final-block attention, averaged over heads, for one normalized segment: length L."""
    if agent.ttfe is None:
        raise CapabilityError("attention probe needs an agent with the temporal feature extractor")
    with torch.no_grad():
        _, records = agent.ttfe(torch.as_tensor(seg, dtype=DTYPE))
    att = records[-1].mean(dim=0).numpy()  # (L, L)
    if row == "newest":
        return att[-1].copy()
    if row == "mean":
        return att.mean(axis=0)
    raise ValueError("row must be 'newest' or 'mean'")


def attention_spread_hist(agent: SACAgent, episodes: Sequence[Episode], row: str = "newest") -> ProbeReport:
    """Average attention weight paid to history positions, grouped by their price spread."""
    if agent.ttfe is None:
        raise CapabilityError("attention probe needs an agent with the temporal feature extractor")
    sums = np.zeros(8)
    counts = np.zeros(8, dtype=np.int64)
    for _, seg, raw in _segments_of(agent, episodes):
        w = attention_row(agent, seg, row)
        bins = spread_bins(_segment_spreads(raw))
        np.add.at(sums, bins, w)
        np.add.at(counts, bins, 1)
    mean = np.divide(sums, counts, out=np.zeros(8), where=counts > 0)
    report = ProbeReport("attention_spread", ("bin", "mean_weight", "count"), meta={"row": row})
    report.rows = [(SPREAD_BIN_LABELS[i], float(mean[i]), int(counts[i])) for i in range(8)]
    return report


def decision_components(agent: SACAgent, base: torch.Tensor, seg: torch.Tensor) -> torch.Tensor:
    """Deterministic (charge, discharge, total bid) for a batch; differentiable in ``seg``."""
    s = agent.state(base, seg)
    mean, _ = agent.policy_params(s)
    u = torch.tanh(mean)
    discharge = (1.0 + u[..., 0]) * 0.5
    charge = (1.0 - u[..., 0]) * 0.5
    total = (decode_fractions(u, agent.battery) * _mode_mask(agent.market_mode)).sum(dim=-1)
    return torch.stack([charge, discharge, total], dim=-1)


def input_gradients(agent: SACAgent, base: np.ndarray, seg: np.ndarray) -> np.ndarray:
    """d(component)/d(raw spot price at each history position): shape (3, L)."""
    seg_t = torch.as_tensor(seg, dtype=DTYPE)[None].clone().requires_grad_(True)
    base_t = torch.as_tensor(base, dtype=DTYPE)[None]
    comps = decision_components(agent, base_t, seg_t)[0]
    grads = []
    for i in range(3):
        (g,) = torch.autograd.grad(comps[i], seg_t, retain_graph=i < 2, allow_unused=True)
        g = None if g is None else g[0]
        g = torch.zeros_like(seg_t[0]) if g is None else g
        grads.append(g[:, 0].detach().numpy() / agent.normalizer.std[0])
    return np.stack(grads)


def gradient_map(agent: SACAgent, episodes: Sequence[Episode], soc: float = 0.5) -> ProbeReport:
    """Mean |input gradient| per (spread bin, decision component): an 8 x 3 map.

    The SoC input is held at ``soc`` so the map reflects price history alone.
    """
    sums = np.zeros((8, 3))
    counts = np.zeros(8, dtype=np.int64)
    for base, seg, raw in _segments_of(agent, episodes, soc):
        g = np.abs(input_gradients(agent, base, seg))  # (3, L)
        bins = spread_bins(_segment_spreads(raw))
        np.add.at(sums, bins, g.T)
        np.add.at(counts, bins, 1)
    mean = np.divide(sums, counts[:, None], out=np.zeros((8, 3)), where=counts[:, None] > 0)
    report = ProbeReport("gradient_map", ("bin",) + GRADIENT_COMPONENTS + ("count",), meta={"units": "per AU$/MWh"})
    report.rows = [(SPREAD_BIN_LABELS[i],) + tuple(float(x) for x in mean[i]) + (int(counts[i]),) for i in range(8)]
    return report


def write_report(path: str | Path, report: ProbeReport, manifest_hash: str | None = None):
    path = Path(path)
    report.to_csv(path.with_suffix(".csv"))
    payload = report.to_json()
    if manifest_hash is not None:
        payload["manifest"] = manifest_hash
    path.with_suffix(".json").write_text(json.dumps(payload, indent=1, sort_keys=True))
