"""Market configuration, price/event ingestion, synthetic markets and episode slicing.

Prices for the seven markets are carried as an (n, 7) float array in the
column order ``spot, fr, fl, sr, sl, dr, dl``; contingency events as two
boolean arrays of the same length.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, IntegrityError, ParseError, SchemaError

PRICE_FIELDS = ("spot", "fr", "fl", "sr", "sl", "dr", "dl")
EVENT_FIELDS = ("raise", "lower")
CSV_COLUMNS = ("t",) + PRICE_FIELDS + EVENT_FIELDS
N_MARKETS = len(PRICE_FIELDS)

# 61 days of 5-minute intervals and the contingency counts observed over it
TWO_MONTH_INTERVALS = 61 * 288
RAISE_EVENTS_TWO_MONTHS = 341
LOWER_EVENTS_TWO_MONTHS = 294


@dataclass(frozen=True)
class MarketConfig:
    dt_hours: float = 5 / 60
    dt_fast: float = 6 / 3600
    dt_slow: float = 55 / 3600
    dt_delay: float = 4 / 60
    episode_len: int = 288

    def __post_init__(self):
        for name in ("dt_hours", "dt_fast", "dt_slow", "dt_delay"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be > 0", name)
        # the three windows may overlap, so only each one is bounded by the interval
        for name in ("dt_fast", "dt_slow", "dt_delay"):
            if getattr(self, name) > self.dt_hours:
                raise ConfigError("fcas dispatch duration exceeds the dispatch interval", name)
        if self.episode_len < 1:
            raise ConfigError("must be >= 1", "episode_len")


class PriceVector(NamedTuple):
    spot: float
    fr: float
    fl: float
    sr: float
    sl: float
    dr: float
    dl: float

    @classmethod
    def from_array(cls, row) -> "PriceVector":
        return cls(*(float(x) for x in row))


class PriceSeries:
    """Gap-free, read-only series of price vectors indexed by interval number."""

    def __init__(self, t, prices):
        t = np.asarray(t, dtype=np.int64).copy()
        prices = np.asarray(prices, dtype=np.float64).copy()
        if prices.ndim != 2 or prices.shape[1] != N_MARKETS:
            raise SchemaError(f"prices must have shape (n, {N_MARKETS}), got {prices.shape}")
        if t.shape != (prices.shape[0],):
            raise SchemaError("index and price arrays differ in length")
        if len(t) > 1 and np.any(np.diff(t) != 1):
            bad = int(np.flatnonzero(np.diff(t) != 1)[0])
            raise IntegrityError(f"interval index not gap-free between t={t[bad]} and t={t[bad + 1]}")
        if not np.all(np.isfinite(prices)):
            raise IntegrityError("non-finite price")
        t.flags.writeable = False
        prices.flags.writeable = False
        self.t = t
        self.prices = prices

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i) -> PriceVector:
        return PriceVector.from_array(self.prices[i])

    @property
    def records(self):
        return [(int(ti), PriceVector.from_array(p)) for ti, p in zip(self.t, self.prices)]

    @property
    def spot(self):
        return self.prices[:, 0]

    def slice(self, start, stop) -> "PriceSeries":
        return PriceSeries(self.t[start:stop], self.prices[start:stop])


class ContingencySeries:
    def __init__(self, raise_flags, lower_flags):
        r = np.asarray(raise_flags)
        lo = np.asarray(lower_flags)
        if r.shape != lo.shape or r.ndim != 1:
            raise SchemaError("raise/lower flag arrays must be 1-D and equal length")
        for name, arr in (("raise", r), ("lower", lo)):
            if arr.size and not np.all((arr == 0) | (arr == 1)):
                raise IntegrityError(f"{name} flags must be 0/1")
        self.raise_flags = r.astype(bool)
        self.lower_flags = lo.astype(bool)
        self.raise_flags.flags.writeable = False
        self.lower_flags.flags.writeable = False

    def __len__(self):
        return len(self.raise_flags)

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n, bool), np.zeros(n, bool))

    def slice(self, start, stop) -> "ContingencySeries":
        return ContingencySeries(self.raise_flags[start:stop], self.lower_flags[start:stop])


@dataclass(frozen=True)
class Episode:
    """One episode window: prices plus aligned contingency flags."""

    prices: np.ndarray
    raise_flags: np.ndarray
    lower_flags: np.ndarray
    start: int = 0

    def __len__(self):
        return self.prices.shape[0]

    @classmethod
    def from_series(cls, series: PriceSeries, events: ContingencySeries | None = None):
        events = events if events is not None else ContingencySeries.zeros(len(series))
        return cls(series.prices, events.raise_flags, events.lower_flags, int(series.t[0]) if len(series) else 0)

    def price(self, i) -> PriceVector:
        return PriceVector.from_array(self.prices[i])


# --------------------------------------------------------------------------- CSV


def load_market_csv(path: str | Path) -> tuple[PriceSeries, ContingencySeries]:
    """Read ``t,spot,fr,fl,sr,sl,dr,dl[,raise,lower]``; event columns default to 0."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("empty file: missing header row") from None
        for col in ("t",) + PRICE_FIELDS:
            if col not in header:
                raise SchemaError(f"missing column {col!r}")
        pos = {name: header.index(name) for name in CSV_COLUMNS if name in header}
        ts, rows, raises, lowers = [], [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise ParseError(f"expected {len(header)} cells, got {len(row)}", line_no)
            ts.append(_parse_int(row[pos["t"]], "t", line_no))
            rows.append([_parse_float(row[pos[f]], f, line_no) for f in PRICE_FIELDS])
            raises.append(_parse_flag(row[pos["raise"]], "raise", line_no) if "raise" in pos else 0)
            lowers.append(_parse_flag(row[pos["lower"]], "lower", line_no) if "lower" in pos else 0)
    prices = np.array(rows, dtype=np.float64).reshape(-1, N_MARKETS)
    return PriceSeries(ts, prices), ContingencySeries(raises, lowers)


def load_price_csv(path: str | Path, market_cfg: MarketConfig | None = None) -> PriceSeries:
    return load_market_csv(path)[0]


def write_market_csv(path: str | Path, series: PriceSeries, events: ContingencySeries | None = None):
    events = events if events is not None else ContingencySeries.zeros(len(series))
    if len(events) != len(series):
        raise IntegrityError("event series length differs from price series")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i in range(len(series)):
            # repr() of a float round-trips bit-exactly
            w.writerow(
                [int(series.t[i])]
                + [repr(float(x)) for x in series.prices[i]]
                + [int(events.raise_flags[i]), int(events.lower_flags[i])]
            )


def _parse_float(cell, col, line_no):
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"non-numeric value {cell!r} in column {col!r}", line_no) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {cell!r} in column {col!r}", line_no)
    return v


def _parse_int(cell, col, line_no):
    try:
        return int(cell)
    except ValueError:
        try:
            f = float(cell)
        except ValueError:
            raise ParseError(f"non-numeric value {cell!r} in column {col!r}", line_no) from None
        if f != int(f):
            raise ParseError(f"non-integer value {cell!r} in column {col!r}", line_no) from None
        return int(f)


def _parse_flag(cell, col, line_no):
    v = _parse_int(cell.strip() or "0", col, line_no)
    if v not in (0, 1):
        raise ParseError(f"flag must be 0 or 1, got {cell!r} in column {col!r}", line_no)
    return v


# --------------------------------------------------------------------- synthesis

SPOT_PROFILES = ("square_wave", "sinusoid", "ar1_with_spikes")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    spot_profile: str = "square_wave"
    spot_low: float = 20.0
    spot_high: float = 200.0
    fcas_means: tuple[float, ...] = (5.44, 0.02, 3.25, 0.08, 2.93, 0.50)
    fcas_noise_std: float = 0.0
    p_raise: float = RAISE_EVENTS_TWO_MONTHS / TWO_MONTH_INTERVALS
    p_lower: float = LOWER_EVENTS_TWO_MONTHS / TWO_MONTH_INTERVALS
    period: int = 288
    spot_noise_std: float = 10.0
    spike_prob: float = 0.005

    def __post_init__(self):
        if self.spot_profile not in SPOT_PROFILES:
            raise ConfigError(f"unknown profile {self.spot_profile!r}; expected one of {SPOT_PROFILES}", "spot_profile")
        if not self.spot_low <= self.spot_high:
            raise ConfigError("spot_low must be <= spot_high", "spot_low")
        if len(self.fcas_means) != 6:
            raise ConfigError("expected 6 values (fr, fl, sr, sl, dr, dl)", "fcas_means")
        for name in ("p_raise", "p_lower", "spike_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError("must be a probability in [0, 1]", name)
        if self.fcas_noise_std < 0 or self.spot_noise_std < 0:
            raise ConfigError("noise std must be >= 0", "fcas_noise_std")
        if self.period < 2:
            raise ConfigError("must be >= 2", "period")


def synth_prices(cfg: SynthConfig, n_intervals: int) -> tuple[PriceSeries, ContingencySeries]:
    """Deterministic synthetic 7-market prices and contingency flags."""
    if n_intervals < 1:
        raise ValueError(f"n_intervals must be >= 1, got {n_intervals}")
    rng = np.random.default_rng(cfg.seed)
    idx = np.arange(n_intervals)
    lo, hi = cfg.spot_low, cfg.spot_high
    if cfg.spot_profile == "square_wave":
        half = cfg.period // 2
        spot = np.where((idx // half) % 2 == 0, lo, hi).astype(np.float64)
    elif cfg.spot_profile == "sinusoid":
        spot = 0.5 * (lo + hi) - 0.5 * (hi - lo) * np.cos(2 * np.pi * idx / cfg.period)
    else:
        spot = _ar1_with_spikes(rng, n_intervals, lo, hi, cfg.spot_noise_std, cfg.spike_prob)
    fcas = np.asarray(cfg.fcas_means, dtype=np.float64)[None, :] + cfg.fcas_noise_std * rng.standard_normal(
        (n_intervals, 6)
    )
    fcas = np.maximum(fcas, 0.0)
    prices = np.column_stack([spot, fcas])
    # events are drawn from their own stream so price settings don't move them
    ev_rng = np.random.default_rng([cfg.seed, 1])
    raises = ev_rng.random(n_intervals) < cfg.p_raise
    lowers = ev_rng.random(n_intervals) < cfg.p_lower
    return PriceSeries(idx, prices), ContingencySeries(raises, lowers)


def _ar1_with_spikes(rng, n, lo, hi, noise_std, spike_prob, phi=0.95):
    mean = 0.5 * (lo + hi)
    x = np.empty(n)
    level = mean
    eps = rng.standard_normal(n) * noise_std
    for i in range(n):
        level = mean + phi * (level - mean) + eps[i]
        x[i] = level
    spikes = rng.random(n) < spike_prob
    x[spikes] = rng.uniform(hi, 5 * hi, size=int(spikes.sum()))
    return x


# ---------------------------------------------------------------------- episodes


def split_episodes(series: PriceSeries, events: ContingencySeries | None, cfg: MarketConfig) -> list[Episode]:
    """Cut consecutive non-overlapping windows of ``episode_len``; the tail is dropped."""
    events = events if events is not None else ContingencySeries.zeros(len(series))
    if len(events) != len(series):
        raise IntegrityError("event series length differs from price series")
    n = len(series) // cfg.episode_len
    if n < 1:
        raise ValueError(f"series of length {len(series)} is shorter than one episode ({cfg.episode_len})")
    out = []
    for k in range(n):
        a, b = k * cfg.episode_len, (k + 1) * cfg.episode_len
        out.append(
            Episode(series.prices[a:b], events.raise_flags[a:b], events.lower_flags[a:b], int(series.t[a]))
        )
    return out


def train_eval_split(episodes: list[Episode], train_fraction: float = 10 / 12) -> tuple[list[Episode], list[Episode]]:
    """Leading episodes train, trailing ones evaluate (chronological split)."""
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must be in (0, 1]")
    n_train = int(math.floor(len(episodes) * train_fraction + 1e-9))
    if len(episodes) >= 2 and train_fraction < 1.0:
        n_train = min(max(n_train, 1), len(episodes) - 1)
    return list(episodes[:n_train]), list(episodes[n_train:])
