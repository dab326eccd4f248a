"""Battery physics: bid validity, energy accounting, degradation and per-step cash flow.

All powers are in MW, energies in MWh and prices in AU$/MWh. Bids are
carried as fractions of ``p_max``; the helpers here convert to MW.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import MarketConfig, PriceVector
from .errors import ConfigError


@dataclass(frozen=True)
class BatteryConfig:
    eta_ch: float = 0.95
    eta_dch: float = 0.95
    p_max: float = 2.0
    p_max_fcas: float = 1.0
    e_cap: float = 10.0
    e_min: float = 0.5
    e_max: float = 9.5
    c_deg: float = 1.0
    # Gate raise events to discharging and lower events to charging. Off by
    # default: the literal energy equation moves energy on either event type.
    strict_direction: bool = False

    def __post_init__(self):
        for name in ("eta_ch", "eta_dch"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError("efficiency must be in (0, 1]", name)
        if not 0.0 <= self.e_min < self.e_max <= self.e_cap:
            raise ConfigError("need 0 <= e_min < e_max <= e_cap", "e_min")
        if not 0.0 < self.p_max_fcas <= self.p_max:
            raise ConfigError("need 0 < p_max_fcas <= p_max", "p_max_fcas")
        if self.c_deg < 0:
            raise ConfigError("must be >= 0", "c_deg")

    @property
    def fcas_cap(self) -> float:
        """Largest FCAS bid expressed as a fraction of p_max."""
        return self.p_max_fcas / self.p_max

    @property
    def soc_min(self) -> float:
        return self.e_min / self.e_cap

    @property
    def soc_max(self) -> float:
        return self.e_max / self.e_cap


@dataclass(frozen=True)
class BatteryState:
    energy: float
    soc: float

    @classmethod
    def from_energy(cls, energy: float, cfg: BatteryConfig) -> "BatteryState":
        return cls(energy, energy / cfg.e_cap)


@dataclass(frozen=True)
class BidAction:
    v_dch: int = 0
    v_ch: int = 0
    a_spot: float = 0.0
    a_fast: float = 0.0
    a_slow: float = 0.0
    a_delay: float = 0.0

    @property
    def fractions(self) -> tuple[float, float, float, float]:
        return (self.a_spot, self.a_fast, self.a_slow, self.a_delay)

    @property
    def is_zero(self) -> bool:
        return self.v_dch == 0 and self.v_ch == 0 and not any(self.fractions)


ZERO_ACTION = BidAction()


@dataclass(frozen=True)
class BidVerdict:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


@dataclass(frozen=True)
class EnergyLimitViolation:
    """Returned instead of a new state when the energy would leave [e_min, e_max]."""

    energy: float
    would_be: float

    def __bool__(self):
        return False


def validate_bid(a: BidAction, cfg: BatteryConfig) -> BidVerdict:
    bad = []
    if a.v_dch not in (0, 1) or a.v_ch not in (0, 1):
        bad.append("binary: v_dch and v_ch must be 0 or 1")
    elif a.v_dch + a.v_ch > 1:
        bad.append("mutual-exclusion: cannot charge and discharge simultaneously")
    if not 0.0 <= a.a_spot <= 1.0:
        bad.append("spot-cap: a_spot outside [0, 1]")
    cap = cfg.fcas_cap
    for name in ("a_fast", "a_slow", "a_delay"):
        v = getattr(a, name)
        if not 0.0 <= v <= cap:
            bad.append(f"fcas-cap: {name}={v} outside [0, {cap}]")
    if sum(a.fractions) > 1.0:
        bad.append("rated-power: bid fractions sum above 1")
    return BidVerdict(tuple(bad))


def powers(a: BidAction, cfg: BatteryConfig) -> tuple[float, float, float, float]:
    """(p_spot, p_fast, p_slow, p_delay) in MW."""
    return (a.a_spot * cfg.p_max, a.a_fast * cfg.p_max, a.a_slow * cfg.p_max, a.a_delay * cfg.p_max)


def energy_change_spot(a: BidAction, cfg: BatteryConfig, m: MarketConfig) -> float:
    return m.dt_hours * (a.v_ch - a.v_dch) * (a.a_spot * cfg.p_max)


def event_multiplier(a: BidAction, raise_flag, lower_flag, cfg: BatteryConfig) -> int:
    """The indicator sum multiplying the FCAS energy term."""
    r, lo = int(bool(raise_flag)), int(bool(lower_flag))
    if cfg.strict_direction:
        return r * a.v_dch + lo * a.v_ch
    return r + lo


def energy_change_fcas(a: BidAction, raise_flag, lower_flag, cfg: BatteryConfig, m: MarketConfig) -> float:
    _, pf, ps, pd = powers(a, cfg)
    delivered = m.dt_fast * pf + m.dt_slow * ps + m.dt_delay * pd
    return (a.v_ch - a.v_dch) * event_multiplier(a, raise_flag, lower_flag, cfg) * delivered


def energy_change(a: BidAction, raise_flag, lower_flag, cfg: BatteryConfig, m: MarketConfig) -> float:
    return energy_change_spot(a, cfg, m) + energy_change_fcas(a, raise_flag, lower_flag, cfg, m)


def step_energy(s: BatteryState, delta_e: float, cfg: BatteryConfig) -> BatteryState | EnergyLimitViolation:
    # limits are inclusive and compared without tolerance
    e = s.energy + delta_e
    if cfg.e_min <= e <= cfg.e_max:
        return BatteryState.from_energy(e, cfg)
    return EnergyLimitViolation(s.energy, e)


def degradation_cost(a: BidAction, cfg: BatteryConfig, m: MarketConfig) -> float:
    return cfg.c_deg * m.dt_hours * a.v_dch * sum(powers(a, cfg))


def spot_cash(a: BidAction, spot: float, cfg: BatteryConfig, m: MarketConfig) -> float:
    coef = a.v_dch * cfg.eta_dch - a.v_ch / cfg.eta_ch
    return m.dt_hours * coef * spot * (a.a_spot * cfg.p_max)


def fcas_cash(a: BidAction, p: PriceVector, cfg: BatteryConfig, m: MarketConfig) -> float:
    _, pf, ps, pd = powers(a, cfg)
    raise_part = a.v_dch * cfg.eta_dch * (p.fr * pf + p.sr * ps + p.dr * pd)
    lower_part = a.v_ch / cfg.eta_ch * (p.fl * pf + p.sl * ps + p.dl * pd)
    return m.dt_hours * (raise_part + lower_part)


def clamp_bid(a: BidAction, cfg: BatteryConfig) -> BidAction:
    """Clamp fractions into their caps, then scale down so the four sum to at most 1."""
    cap = cfg.fcas_cap
    spot = min(max(a.a_spot, 0.0), 1.0)
    fcas = [min(max(v, 0.0), cap) for v in (a.a_fast, a.a_slow, a.a_delay)]
    total = spot + sum(fcas)
    if total > 1.0:
        spot, fcas = spot / total, [v / total for v in fcas]
        # guard against the quotient rounding the sum a hair above one
        while spot + fcas[0] + fcas[1] + fcas[2] > 1.0:
            spot = spot * (1 - 1e-15)
    return BidAction(a.v_dch, a.v_ch, spot, fcas[0], fcas[1], fcas[2])
