"""Parameter records for the benchmark devices.

All records are frozen dataclasses so they can be shared between threads and
used as cache keys. Values are per unit on the system base unless a field says
otherwise; time constants are in seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields


class ParameterError(ValueError):
    """Raised when a parameter record violates its invariants."""


def _require(cond, msg):
    if not cond:
        raise ParameterError(msg)


@dataclass(frozen=True)
class PerUnitBase:
    s_base: float = 3.0e10
    v_base: float = 500.0e3
    f_base: float = 50.0

    def __post_init__(self):
        _require(self.s_base > 0 and self.v_base > 0 and self.f_base > 0,
                 "per-unit bases must be strictly positive")

    @property
    def omega_b(self) -> float:
        return 2.0 * math.pi * self.f_base

    @property
    def z_base(self) -> float:
        return self.v_base ** 2 / self.s_base

    @property
    def i_base(self) -> float:
        """Line current base in A (three-phase, line-line voltage base)."""
        return self.s_base / (math.sqrt(3.0) * self.v_base)


@dataclass(frozen=True)
class SmParams:
    H: float = 1.438
    Kd: float = 0.0
    Ra: float = 0.0025
    Xd: float = 1.8
    Xq: float = 1.7
    Xd_p: float = 0.3
    Xd_pp: float = 0.25
    Xq_pp: float = 0.25
    Td0_p: float = 8.0
    Td0_pp: float = 0.03
    Tq0_pp: float = 0.05
    Xl: float = 0.2

    def __post_init__(self):
        _require(self.H > 0, "sm.H must be > 0")
        _require(self.Xd >= self.Xd_p >= self.Xd_pp > self.Xl >= 0,
                 "sm reactances must satisfy Xd >= Xd_p >= Xd_pp > Xl >= 0")
        _require(self.Xq > self.Xq_pp > self.Xl, "sm reactances must satisfy Xq > Xq_pp > Xl")
        _require(self.Xd > self.Xd_p > self.Xd_pp,
                 "the flux model needs strict Xd > Xd_p > Xd_pp to place the field and damper windings")
        _require(min(self.Td0_p, self.Td0_pp, self.Tq0_pp) > 0, "sm time constants must be > 0")
        _require(self.Ra >= 0, "sm.Ra must be >= 0")


@dataclass(frozen=True)
class AvrParams:
    Ke: float = 500.0
    Te: float = 0.05
    vg_ref: float = 1.0

    def __post_init__(self):
        _require(self.Ke > 0 and self.Te > 0, "avr.Ke and avr.Te must be > 0")


@dataclass(frozen=True)
class GovTurbineParams:
    Rg: float = 0.02
    Tg: float = 0.5
    Tr: float = 10.0
    Fh: float = 0.1

    def __post_init__(self):
        _require(0 < self.Rg < 1, "gov.Rg must lie in (0, 1)")
        _require(self.Tg > 0 and self.Tr > 0, "gov.Tg and gov.Tr must be > 0")
        _require(0 <= self.Fh <= 1, "gov.Fh must lie in [0, 1]")


@dataclass(frozen=True)
class GflParams:
    Rf: float = 0.015
    Lf: float = 0.1
    Cf: float = 0.11
    Kp: float = 0.62
    Ki: float = 650.0
    tau_f: float = 0.3e-3
    tau_p: float = 0.0
    tau_w: float = 0.1
    Rp: float = 0.04
    Kp_pll: float = 0.3183
    Ki_pll: float = 9.82

    def __post_init__(self):
        _require(self.Lf > 0 and self.Cf > 0, "gfl.Lf and gfl.Cf must be > 0")
        _require(self.Ki > 0, "gfl.Ki must be > 0")
        _require(self.tau_f > 0 and self.tau_w > 0, "gfl.tau_f and gfl.tau_w must be > 0")
        _require(self.tau_p >= 0, "gfl.tau_p must be >= 0")
        _require(self.Rp > 0, "gfl.Rp must be > 0")


@dataclass(frozen=True)
class EquGridParams:
    He: float = 1.438
    Du: float = 0.0
    V: float = 1.0
    Pl: float = 0.0

    def __post_init__(self):
        _require(self.He > 0, "grid.He must be > 0")
        _require(self.Du >= 0, "grid.Du must be >= 0")
        _require(self.V > 0, "grid.V must be > 0")


def record_from_dict(cls, data: dict, where: str):
    """Build a parameter record, rejecting unknown keys with a path-qualified message."""
    known = {f.name for f in fields(cls)}
    unknown = sorted(k for k in data if k not in known and not k.startswith("_"))
    if unknown:
        raise ParameterError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k.startswith("_"):
            continue
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ParameterError(f"{where}.{k}: expected a number, got {v!r}")
        kwargs[k] = float(v)
    try:
        return cls(**kwargs)
    except ParameterError as exc:
        raise ParameterError(f"{where}: {exc}") from None


def record_to_dict(rec) -> dict:
    return {f.name: getattr(rec, f.name) for f in fields(rec)}
