"""Revenue tables, behaviour statistics, run manifests and atomic report writing."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .battery import BatteryConfig
from .data import Episode
from .env import StepOutcome, episode_revenue

REVENUE_COLUMNS = ("strategy", "mode", "spot", "fcas", "degradation", "total")
# arbitrage spread bins in AU$/MWh on |spot_t - spot_{t-1}|
ARBITRAGE_EDGES = (0.0, 10.0, 20.0, 30.0, 40.0)
ARBITRAGE_LABELS = ("[0,10)", "[10,20)", "[20,30)", "[30,40)", "[40,inf)")


# ---------------------------------------------------------------- file output


def write_text_atomic(path: str | Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_json_atomic(path: str | Path, payload):
    write_text_atomic(path, json.dumps(payload, indent=1, sort_keys=True) + "\n")


def csv_text(columns: Sequence[str], rows: Sequence[Sequence], manifest_hash: str | None = None) -> str:
    buf = io.StringIO()
    if manifest_hash is not None:
        buf.write(f"# manifest: {manifest_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def read_report_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# ------------------------------------------------------------------ manifests


def data_fingerprint(episodes: Sequence[Episode]) -> str:
    h = hashlib.sha256()
    for ep in episodes:
        h.update(np.ascontiguousarray(ep.prices, dtype=np.float64).tobytes())
        h.update(np.asarray(ep.raise_flags, dtype=np.uint8).tobytes())
        h.update(np.asarray(ep.lower_flags, dtype=np.uint8).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    seed: int
    config: dict
    data_fingerprint: str
    checkpoint_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "config": self.config,
            "data_fingerprint": self.data_fingerprint,
            "checkpoint_hash": self.checkpoint_hash,
        }

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def write(self, path: str | Path):
        write_json_atomic(path, dict(self.to_dict(), manifest_hash=self.hash))


# -------------------------------------------------------------------- revenue


@dataclass(frozen=True)
class RevenueRow:
    strategy: str
    mode: str
    spot: float
    fcas: float
    degradation: float
    total: float

    def as_tuple(self):
        return (self.strategy, self.mode, self.spot, self.fcas, self.degradation, self.total)


def revenue_row(strategy: str, mode: str, runs: Sequence[Sequence[StepOutcome]]) -> RevenueRow:
    """Sum of per-episode revenue over a set of evaluation rollouts."""
    parts = [episode_revenue(r) for r in runs]
    spot = math.fsum(p[0] for p in parts)
    fcas = math.fsum(p[1] for p in parts)
    deg = math.fsum(p[2] for p in parts)
    return RevenueRow(strategy, mode, spot, fcas, deg, math.fsum(p[3] for p in parts))


def cumulative_cash(runs: Sequence[Sequence[StepOutcome]]) -> np.ndarray:
    """Cumulative cash flow over the concatenated evaluation steps."""
    flows = [o.cash_flow for r in runs for o in r]
    return np.cumsum(flows) if flows else np.zeros(0)


# ------------------------------------------------------------------ behaviour


@dataclass
class BehaviorStats:
    """Bid volumes, contingency responses, idle intervals and arbitrage volume by spread.

    Bid power totals are MW summed over intervals (MW-intervals).
    """

    bid_power: dict = field(default_factory=lambda: {"spot": 0.0, "fast": 0.0, "slow": 0.0, "delay": 0.0})
    raise_occurred: int = 0
    raise_delivered: int = 0
    lower_occurred: int = 0
    lower_delivered: int = 0
    idle_empty: int = 0
    idle_full: int = 0
    idle_other: int = 0
    arbitrage_charge_mwh: list = field(default_factory=lambda: [0.0] * len(ARBITRAGE_LABELS))
    arbitrage_discharge_mwh: list = field(default_factory=lambda: [0.0] * len(ARBITRAGE_LABELS))

    def to_dict(self) -> dict:
        return {
            "bid_power_mw_intervals": dict(self.bid_power),
            "raise": {"delivered": self.raise_delivered, "occurred": self.raise_occurred},
            "lower": {"delivered": self.lower_delivered, "occurred": self.lower_occurred},
            "idle": {"soc_empty": self.idle_empty, "soc_full": self.idle_full, "other": self.idle_other},
            "arbitrage_bins": list(ARBITRAGE_LABELS),
            "arbitrage_charge_mwh": list(self.arbitrage_charge_mwh),
            "arbitrage_discharge_mwh": list(self.arbitrage_discharge_mwh),
        }

    def response_ratio(self, direction: str) -> float:
        occ = self.raise_occurred if direction == "raise" else self.lower_occurred
        dlv = self.raise_delivered if direction == "raise" else self.lower_delivered
        return dlv / occ if occ else math.nan


def _arbitrage_bin(spread: float) -> int:
    return int(np.searchsorted(ARBITRAGE_EDGES, abs(spread), side="right") - 1)


def behavior_stats(
    runs: Sequence[Sequence[StepOutcome]], episodes: Sequence[Episode], bat: BatteryConfig, dt_hours: float = 5 / 60
) -> BehaviorStats:
    """Aggregate executed actions of evaluation rollouts.

    A contingency response is delivered when the event flag is set and the
    battery bid FCAS power in the matching direction: discharging for raise,
    charging for lower.
    """
    st = BehaviorStats()
    tol = 1e-9
    for run, ep in zip(runs, episodes):
        for t, o in enumerate(run):
            a = o.action
            st.bid_power["spot"] += a.a_spot * bat.p_max
            st.bid_power["fast"] += a.a_fast * bat.p_max
            st.bid_power["slow"] += a.a_slow * bat.p_max
            st.bid_power["delay"] += a.a_delay * bat.p_max
            fcas = a.a_fast + a.a_slow + a.a_delay
            if ep.raise_flags[t]:
                st.raise_occurred += 1
                st.raise_delivered += int(a.v_dch == 1 and fcas > 0)
            if ep.lower_flags[t]:
                st.lower_occurred += 1
                st.lower_delivered += int(a.v_ch == 1 and fcas > 0)
            if sum(a.fractions) == 0.0:
                e = o.info["energy_before"]
                if e <= bat.e_min + tol:
                    st.idle_empty += 1
                elif e >= bat.e_max - tol:
                    st.idle_full += 1
                else:
                    st.idle_other += 1
            if a.a_spot > 0 and t > 0:
                b = _arbitrage_bin(ep.prices[t, 0] - ep.prices[t - 1, 0])
                mwh = a.a_spot * bat.p_max * dt_hours
                if a.v_ch:
                    st.arbitrage_charge_mwh[b] += mwh
                elif a.v_dch:
                    st.arbitrage_discharge_mwh[b] += mwh
    return st


def revenue_csv(rows: Sequence[RevenueRow], manifest_hash: str | None = None) -> str:
    return csv_text(REVENUE_COLUMNS, [r.as_tuple() for r in rows], manifest_hash)


def summarize(rows: Sequence[RevenueRow]) -> Mapping[str, Mapping[str, float]]:
    out: dict = {}
    for r in rows:
        out.setdefault(r.strategy, {})[r.mode] = r.total
    return out
