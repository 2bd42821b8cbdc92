"""Reduction of a detailed network onto the triangle-form benchmark.

Branch impedance magnitudes come from short-circuit currents, the equivalent
grid inertia is the rating-weighted mean of the kept generators and its
damping matches their aggregate droop gain.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .config import BenchmarkConfig, nominal_config
from .network import DynamicSystem, branch_impedances, triangle_config
from .params import ParameterError, PerUnitBase

SQRT3 = math.sqrt(3.0)
LOCATIONS = ("inv", "sm", "path")


@dataclass(frozen=True)
class ShortCircuitMeasurement:
    location: str
    U: float  # line-line voltage, V
    Icc: float  # A

    def __post_init__(self):
        if not self.U > 0:
            raise ParameterError(f"short-circuit measurement {self.location}: U must be > 0")
        if not self.Icc > 0:
            raise ParameterError(f"short-circuit measurement {self.location}: Icc must be > 0")


@dataclass(frozen=True)
class GeneratorRecord:
    name: str
    H: float  # s, on the unit's own rating
    S: float  # VA
    Rg: float | None = None  # droop, pu on the unit rating; None = no primary control

    def __post_init__(self):
        if not self.H > 0:
            raise ParameterError(f"generator {self.name}: H must be > 0")
        if not self.S > 0:
            raise ParameterError(f"generator {self.name}: S must be > 0")


def impedance_from_short_circuit(m: ShortCircuitMeasurement) -> float:
    """|Z| = U / (Icc sqrt(3)) in ohm."""
    return m.U / (m.Icc * SQRT3)


def aggregate_inertia(gens) -> float:
    gens = list(gens)
    if not gens:
        raise ParameterError("aggregate_inertia: empty generator list")
    s_t = sum(g.S for g in gens)
    return sum(g.H * g.S for g in gens) / s_t


def tune_equivalent_droop(gens, base: PerUnitBase) -> float:
    """Aggregate static power-frequency gain sum(S_i / s_base / Rg_i), pu."""
    du = 0.0
    for g in gens:
        if g.Rg is None:
            continue
        if g.Rg == 0:
            raise ParameterError(f"generator {g.name}: zero droop gives an infinite gain")
        du += (g.S / base.s_base) / g.Rg
    return du


def split_impedance(z_mag: float, x_over_r: float) -> tuple[float, float]:
    """(R, X) with |R + jX| = z_mag and X / R = x_over_r."""
    if not x_over_r > 0:
        raise ParameterError("X/R ratio must be > 0")
    r = z_mag / math.hypot(1.0, x_over_r)
    return r, r * x_over_r


def reduce_to_benchmark(sc1: ShortCircuitMeasurement, sc2: ShortCircuitMeasurement, gens,
                        base: PerUnitBase | None = None, template: BenchmarkConfig | None = None,
                        z3=None, sc3: ShortCircuitMeasurement | None = None,
                        x_over_r: float = 10.0) -> BenchmarkConfig:
    """Triangle-form benchmark from two (or three) short-circuit measurements.

    ``sc1`` is taken at the inverter bus and gives Z'1, ``sc2`` at the
    machine bus gives Z'2. Z'3 is either given (``z3``: ohm magnitude or an
    ``(R, X)`` pair) or derived from ``sc3``, a fault at the machine bus
    measured on the inverter-to-machine line, whose path impedance is
    Z'1 + Z'3 (same X/R assumed, so magnitudes subtract).
    """
    template = template or nominal_config()
    base = base or template.base
    gens = list(gens)
    z1 = impedance_from_short_circuit(sc1)
    z2 = impedance_from_short_circuit(sc2)
    if z3 is not None:
        z3_rx = tuple(float(v) for v in z3) if isinstance(z3, (tuple, list)) else split_impedance(float(z3), x_over_r)
    elif sc3 is not None:
        z_path = impedance_from_short_circuit(sc3)
        if z_path <= z1:
            raise ParameterError("third measurement implies a path impedance below Z'1")
        z3_rx = split_impedance(z_path - z1, x_over_r)
    else:
        raise ParameterError("Z'3 is missing: pass z3 (ohm) or a third short-circuit measurement "
                             "at the machine bus on the inverter-to-machine line")
    imp = {"z1p": split_impedance(z1, x_over_r), "z2p": split_impedance(z2, x_over_r), "z3p": z3_rx}
    grid = replace(template.grid, He=aggregate_inertia(gens), Du=tune_equivalent_droop(gens, base))
    return replace(template, topology="triangle", lines={}, impedances=imp, base=base, grid=grid)


# ------------------------------------------------------------ synthetic faults

def fault_system(cfg: BenchmarkConfig, location: str) -> DynamicSystem:
    """Passive triangle network fed by the grid source with a bolted fault.

    Devices are disconnected. ``location`` selects the faulted bus and the
    monitored line: ``inv`` (line z1p), ``sm`` (line z2p) or ``path``
    (fault at the machine bus, inverter bus fed only through z1p, line z3p).
    States are the d/q currents of the monitored line and of the parallel
    path, in pu on the network frame.
    """
    if location not in LOCATIONS:
        raise ParameterError(f"fault location must be one of {LOCATIONS}")
    z = branch_impedances(triangle_config(cfg))
    if location == "inv":
        zm, zp = z["z1p"].z, z["z2p"].z + z["z3p"].z
    elif location == "sm":
        zm, zp = z["z2p"].z, z["z1p"].z + z["z3p"].z
    else:
        # the machine-side branch z2p is the parallel path; z3p sits in series with z1p
        zm, zp = z["z1p"].z + z["z3p"].z, z["z2p"].z
    wb = cfg.base.omega_b
    V = cfg.grid.V

    def rl(i_d, i_q, zz, v):
        r, x = zz.real, zz.imag
        return (wb / x * (v - r * i_d + x * i_q), wb / x * (-r * i_q - x * i_d))

    def f(x, u):
        a = rl(x[0], x[1], zm, u[0])
        b = rl(x[2], x[3], zp, u[0])
        return np.array([a[0], a[1], b[0], b[1]])

    return DynamicSystem(("mon.i_d", "mon.i_q", "par.i_d", "par.i_q"), ("V",), f,
                         lambda x, u: np.zeros(0), u0=np.array([V]), config=cfg)


def synthesize_measurement(cfg: BenchmarkConfig, location: str, t_end: float = 0.6,
                           max_step: float = 5e-5) -> ShortCircuitMeasurement:
    """Simulate a fault on the benchmark network and return the steady
    short-circuit current of the monitored line as a measurement."""
    from .timedomain import Scenario, simulate

    sys = fault_system(cfg, location)
    tr = simulate(sys, Scenario(t_end, max_step=max_step, channels=("mon.i_d", "mon.i_q"),
                                x0=np.zeros(4), sample_dt=max_step))
    n = max(4, len(tr.t) // 20)
    i_pu = float(np.mean(np.hypot(tr["mon.i_d"][-n:], tr["mon.i_q"][-n:])))
    i_base = cfg.base.s_base / (SQRT3 * cfg.base.v_base)
    return ShortCircuitMeasurement(location, cfg.base.v_base, i_pu * i_base)


# ------------------------------------------------------------------ CSV input

def _rows(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh)]
    return [{k.strip(): (v or "").strip() for k, v in r.items()} for r in rows]


def _num(row, key, path, line):
    try:
        return float(row[key])
    except (KeyError, ValueError):
        raise ParameterError(f"{path}:{line}: column {key!r} must be a number") from None


def load_generators(path) -> list[GeneratorRecord]:
    """CSV with columns ``name, H_s, S_VA`` and optional ``Rg``."""
    out = []
    for n, r in enumerate(_rows(path), start=2):
        rg = r.get("Rg", "")
        out.append(GeneratorRecord(r.get("name", f"G{n - 1}"), _num(r, "H_s", path, n),
                                   _num(r, "S_VA", path, n), float(rg) if rg else None))
    return out


def load_measurements(path) -> dict:
    """CSV with columns ``location, U_V, Icc_A``; returns ``{location: measurement}``."""
    out = {}
    for n, r in enumerate(_rows(path), start=2):
        loc = r.get("location", "")
        if loc not in LOCATIONS:
            raise ParameterError(f"{path}:{n}: location must be one of {LOCATIONS}, got {loc!r}")
        out[loc] = ShortCircuitMeasurement(loc, _num(r, "U_V", path, n), _num(r, "Icc_A", path, n))
    return out


def sample_data_path(name: str) -> Path:
    return Path(str(resources.files("coupling_modes").joinpath(f"data/{name}")))
