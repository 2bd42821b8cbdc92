"""Benchmark network: star/triangle conversion and assembly of the dynamic system.

Nodes
-----
``inv``  inverter point of common coupling (filter capacitor, voltage is a state)
``sm``   machine terminal (no shunt element)
``grid`` equivalent-grid source (voltage imposed)
``n``    interior star node (star form only, no shunt element)

Nodes without a shunt element carry no voltage state. Kirchhoff's current law
there fixes one incident branch current per node, so those currents are
computed from the remaining states, and the node voltages are eliminated by
requiring the time derivative of the current balance to vanish. The result is
an explicit ODE in the labelled states with no spurious fast modes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import components as cm
from .config import BenchmarkConfig, BRANCH_OF
from .params import ParameterError, PerUnitBase

INPUT_LABELS = ("P_inv", "Q_inv", "P_sm", "vg_ref", "V", "P_l")

BRANCH_NODES = {
    "z1": ("inv", "n"),
    "z2": ("sm", "n"),
    "zcc": ("n", "grid"),
    "z1p": ("inv", "grid"),
    "z2p": ("sm", "grid"),
    "z3p": ("inv", "sm"),
}

DEVICE_GROUP = {"sm": "SM", "avr": "SM", "gov": "SM", "gfl": "inverter", "pll": "inverter",
                "droop": "inverter", "grid": "grid"}


class NetworkError(ValueError):
    """Raised for ill-posed network data (zero impedance, singular node algebra)."""


@dataclass(frozen=True)
class ComplexImpedance:
    r: float
    x: float
    unit_system: str = "pu"

    def __post_init__(self):
        if self.unit_system not in ("physical", "pu"):
            raise ValueError(f"unit_system must be 'physical' or 'pu', got {self.unit_system!r}")

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)

    @classmethod
    def from_complex(cls, z, unit_system="pu"):
        return cls(float(z.real), float(z.imag), unit_system)


@dataclass(frozen=True)
class StarTriple:
    z1: ComplexImpedance
    z2: ComplexImpedance
    zcc: ComplexImpedance


@dataclass(frozen=True)
class TriangleTriple:
    z1p: ComplexImpedance
    z2p: ComplexImpedance
    z3p: ComplexImpedance


def _units(*zs):
    units = {z.unit_system for z in zs}
    if len(units) != 1:
        raise ValueError("impedances must share one unit system")
    return units.pop()


def star_to_triangle(s: StarTriple) -> TriangleTriple:
    unit = _units(s.z1, s.z2, s.zcc)
    z1, z2, zcc = s.z1.z, s.z2.z, s.zcc.z
    if z1 == 0 or z2 == 0 or zcc == 0:
        raise ValueError("star_to_triangle: star impedances must be nonzero")
    num = z1 * zcc + z2 * zcc + z1 * z2
    return TriangleTriple(
        ComplexImpedance.from_complex(num / z2, unit),
        ComplexImpedance.from_complex(num / z1, unit),
        ComplexImpedance.from_complex(num / zcc, unit),
    )


def triangle_to_star(t: TriangleTriple) -> StarTriple:
    unit = _units(t.z1p, t.z2p, t.z3p)
    a, b, c = t.z1p.z, t.z2p.z, t.z3p.z
    total = a + b + c
    if total == 0:
        raise ValueError("triangle_to_star: sum of triangle impedances is zero")
    return StarTriple(
        ComplexImpedance.from_complex(a * c / total, unit),
        ComplexImpedance.from_complex(b * c / total, unit),
        ComplexImpedance.from_complex(a * b / total, unit),
    )


def impedance_from_length(length_km, per_km: ComplexImpedance, base: PerUnitBase) -> ComplexImpedance:
    if not length_km > 0:
        raise ValueError("impedance_from_length: length must be > 0")
    zb = base.z_base
    return ComplexImpedance(length_km * per_km.r / zb, length_km * per_km.x / zb, "pu")


def per_km_impedance(cfg: BenchmarkConfig) -> ComplexImpedance:
    ld = cfg.line_data
    if ld.per_km_is_magnitude:
        r = ld.r_per_km / math.hypot(1.0, ld.x_over_r)
    else:
        r = ld.r_per_km
    return ComplexImpedance(r, r * ld.x_over_r, "physical")


def branch_impedances(cfg: BenchmarkConfig) -> dict:
    """Per-unit impedance of every branch of the configured topology."""
    per_km = per_km_impedance(cfg)
    by_branch = {b: k for k, b in BRANCH_OF.items()}
    out = {}
    for b in cfg.branches:
        if b in cfg.impedances:
            r, x = cfg.impedances[b]
            out[b] = ComplexImpedance(r / cfg.base.z_base, x / cfg.base.z_base, "pu")
        else:
            out[b] = impedance_from_length(cfg.lines[by_branch[b]], per_km, cfg.base)
    return out


def triangle_config(cfg: BenchmarkConfig) -> BenchmarkConfig:
    """The triangle-form configuration equivalent to a star-form one."""
    if cfg.topology == "triangle":
        return cfg
    z = branch_impedances(cfg)
    tri = star_to_triangle(StarTriple(z["z1"], z["z2"], z["zcc"]))
    zb = cfg.base.z_base
    imp = {name: (getattr(tri, name).r * zb, getattr(tri, name).x * zb) for name in ("z1p", "z2p", "z3p")}
    from dataclasses import replace
    return replace(cfg, topology="triangle", lines={}, impedances=imp)


@dataclass(frozen=True)
class StateLabel:
    device: str
    name: str

    def __str__(self):
        return f"{self.device}.{self.name}"


@dataclass(frozen=True)
class DynamicSystem:
    """Labelled explicit system ``dx/dt = f(x, u)`` with algebraic residual ``g``.

    ``g`` reports the current balance at the nodes whose voltages were
    eliminated; it is zero by construction for every state.
    """

    state_labels: tuple
    input_labels: tuple
    f: Callable
    g: Callable
    output_labels: tuple = ()
    outputs: Callable | None = None
    u0: np.ndarray = field(default_factory=lambda: np.zeros(0))
    reference_state: str | None = None
    slack_input: str | None = None
    config: BenchmarkConfig | None = None
    model: object = None

    @property
    def n(self) -> int:
        return len(self.state_labels)

    def index(self, label: str) -> int:
        for i, s in enumerate(self.state_labels):
            if str(s) == label:
                return i
        raise KeyError(label)

    def input_index(self, label: str) -> int:
        return self.input_labels.index(label)

    def output_index(self, label: str) -> int:
        return self.output_labels.index(label)

    def group_of(self, i: int) -> str:
        dev = self.state_labels[i].device
        if dev.startswith("line_"):
            return "grid"
        return DEVICE_GROUP.get(dev, dev)


def _solve_small(m, b):
    """Gaussian elimination with partial pivoting for tiny dense systems."""
    n = len(b)
    a = [row[:] + [b[i]] for i, row in enumerate(m)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(a[r][col]))
        if a[piv][col] == 0.0:
            raise NetworkError("singular node-voltage algebra")
        a[col], a[piv] = a[piv], a[col]
        inv = 1.0 / a[col][col]
        for r in range(col + 1, n):
            fac = a[r][col] * inv
            if fac:
                row_r, row_c = a[r], a[col]
                for k in range(col, n + 1):
                    row_r[k] -= fac * row_c[k]
    x = [0.0] * n
    for r in range(n - 1, -1, -1):
        s = a[r][n] - sum(a[r][k] * x[k] for k in range(r + 1, n))
        x[r] = s / a[r][r]
    return x


OUTPUT_LABELS = (
    "i_s_d", "i_s_q", "I_s",
    "i_sm_d", "i_sm_q", "I_L2",
    "i_g2_d", "i_g2_q", "I_g2",
    "v_t_d", "v_t_q", "V_t",
    "v_c_d", "v_c_q", "V_c",
    "P_inv_meas", "Q_inv_meas", "P_G", "P_sm_e", "Te",
)


class BenchmarkModel:
    """Right-hand side of the assembled benchmark (see module docstring)."""

    def __init__(self, cfg: BenchmarkConfig):
        self.cfg = cfg
        self.base = cfg.base
        self.has_inv = cfg.include_inverter
        self.circuit = cm.sm_circuit(cfg.sm, cfg.base.omega_b)
        z = branch_impedances(cfg)
        branches = []
        for name in cfg.branches:
            frm, to = BRANCH_NODES[name]
            if not self.has_inv and "inv" in (frm, to):
                continue
            zb = z[name]
            if zb.x <= 0:
                raise NetworkError(f"branch {name}: reactance must be > 0 (got {zb.x:g} pu); "
                                   "zero-impedance branches make the node algebra singular")
            if zb.r < 0:
                raise NetworkError(f"branch {name}: negative resistance")
            branches.append((name, frm, to, zb.r, zb.x))
        self.branches = branches
        nb = len(branches)
        self.c_nodes = ["sm"] + (["n"] if cfg.topology == "star" else [])
        self.k_nodes = (["inv"] if self.has_inv else []) + ["grid"]

        def incidence(node):
            return [1.0 if b[1] == node else (-1.0 if b[2] == node else 0.0) for b in branches]

        self.A_c = [incidence(nd) for nd in self.c_nodes]
        self.A_k = {nd: incidence(nd) for nd in self.k_nodes}
        nc = len(self.c_nodes)
        dep = None
        for combo in itertools.combinations(reversed(range(nb)), nc):
            sub = np.array([[self.A_c[r][c] for c in combo] for r in range(nc)])
            if abs(np.linalg.det(sub)) > 1e-12:
                dep = sorted(combo)
                break
        if dep is None:
            raise NetworkError("no branch set can satisfy current balance at the machine/star nodes")
        self.dep = dep
        self.indep = [b for b in range(nb) if b not in dep]
        ad = np.array([[self.A_c[r][c] for c in dep] for r in range(nc)])
        ai = np.array([[self.A_c[r][c] for c in self.indep] for r in range(nc)]).reshape(nc, len(self.indep))
        ad_inv = np.linalg.inv(ad)
        self.P = (-ad_inv @ ai).tolist()
        self.Q = ad_inv.tolist()
        wb = self.base.omega_b
        self.kb = [wb / b[4] for b in branches]
        m1 = np.array(self.A_c) @ np.diag(self.kb) @ np.array(self.A_c).T
        self.M1 = m1.tolist()

        labels = [StateLabel("sm", s) for s in cm.SM_STATES]
        labels += [StateLabel("avr", "gamma_avr"), StateLabel("gov", "x_gov"), StateLabel("gov", "x_turb")]
        self.tau_p = cfg.gfl.tau_p > 0
        if self.has_inv:
            labels += [StateLabel("gfl", s) for s in cm.GFL_STATES]
            labels += [StateLabel("pll", s) for s in cm.PLL_STATES]
            labels += [StateLabel("droop", "x_droop_w")]
            if self.tau_p:
                labels += [StateLabel("droop", "x_pmeas")]
        self.line_offset = len(labels)
        for b in self.indep:
            labels += [StateLabel(f"line_{branches[b][0]}", "i_line_d"),
                       StateLabel(f"line_{branches[b][0]}", "i_line_q")]
        labels += [StateLabel("grid", s) for s in cm.GRID_STATES]
        self.labels = tuple(labels)
        self.n = len(labels)

    # -- evaluation -------------------------------------------------------------

    def branch_currents(self, x, i_sm):
        """All branch currents (list of (d, q)) from the state and machine current."""
        nb = len(self.branches)
        cur = [None] * nb
        off = self.line_offset
        for j, b in enumerate(self.indep):
            cur[b] = (x[off + 2 * j], x[off + 2 * j + 1])
        inj = [i_sm] + [(0.0, 0.0)] * (len(self.c_nodes) - 1)
        for r, b in enumerate(self.dep):
            d = q = 0.0
            for j, bi in enumerate(self.indep):
                p = self.P[r][j]
                if p:
                    d += p * cur[bi][0]
                    q += p * cur[bi][1]
            for k, (jd, jq) in enumerate(inj):
                qq = self.Q[r][k]
                if qq:
                    d += qq * jd
                    q += qq * jq
            cur[b] = (d, q)
        return cur

    def evaluate(self, x, u, want_outputs=False):
        cfg = self.cfg
        base = self.base
        wb = base.omega_b
        c = self.circuit
        x = [float(v) for v in x]
        P_inv, Q_inv, P_sm, vg_ref, V, P_l = (float(v) for v in u)
        omega_f = x[-2]
        theta_f = x[-1]
        sm = x[0:7]
        ag = x[7:10]

        i_d, i_q, _, _, _ = cm.sm_currents(sm, c)
        i_sm = cm.rotate(i_d, i_q, sm[0])
        cur = self.branch_currents(x, i_sm)

        vknown = {"grid": cm.equgrid_voltage(cfg.grid, V)}
        if self.has_inv:
            vknown["inv"] = (x[12], x[13])

        # branch derivative without the eliminated node voltages
        a = []
        for b, (name, frm, to, R, L) in enumerate(self.branches):
            vf_ = vknown.get(frm, (0.0, 0.0))
            vt_ = vknown.get(to, (0.0, 0.0))
            kb = self.kb[b]
            ib = cur[b]
            a.append((kb * (vf_[0] - vt_[0] - R * ib[0]) + wb * omega_f * ib[1],
                      kb * (vf_[1] - vt_[1] - R * ib[1]) - wb * omega_f * ib[0]))

        vf = cfg.avr.Ke * (vg_ref - ag[0])
        pm = cfg.gov.Fh * ag[1] + (1.0 - cfg.gov.Fh) * ag[2]
        d_sm0, _, te = cm.sm_derivatives(sm, (0.0, 0.0), vf, pm, cfg.sm, base, omega_f)
        rate0 = cm.sm_current_rate(sm, d_sm0, c)
        K = cm.sm_voltage_gain(sm, c, wb)

        nc = len(self.c_nodes)
        M = [[0.0] * (2 * nc) for _ in range(2 * nc)]
        rhs = [0.0] * (2 * nc)
        for k in range(nc):
            for m in range(nc):
                v = self.M1[k][m]
                M[2 * k][2 * m] = v
                M[2 * k + 1][2 * m + 1] = v
            s_d = s_q = 0.0
            for b, coef in enumerate(self.A_c[k]):
                if coef:
                    s_d += coef * a[b][0]
                    s_q += coef * a[b][1]
            inj = rate0 if k == 0 else (0.0, 0.0)
            rhs[2 * k] = inj[0] - s_d
            rhs[2 * k + 1] = inj[1] - s_q
        M[0][0] -= K[0][0]
        M[0][1] -= K[0][1]
        M[1][0] -= K[1][0]
        M[1][1] -= K[1][1]
        vsol = _solve_small(M, rhs)
        v_t = (vsol[0], vsol[1])

        vrd, vrq = cm.rotate(v_t[0], v_t[1], -sm[0])
        d_sm = list(d_sm0)
        d_sm[2] += wb * vrd
        d_sm[3] += wb * vrq
        v_mag = math.hypot(v_t[0], v_t[1])
        d_ag, _, _ = cm.avr_governor_derivatives(ag, v_mag, sm[1] - 1.0, cfg.avr, cfg.gov, P_sm, vg_ref)

        out = list(d_sm) + list(d_ag)
        i_g = (0.0, 0.0)
        if self.has_inv:
            gfl = x[10:18]
            pll = x[18:20]
            g_d = g_q = 0.0
            for b, coef in enumerate(self.A_k["inv"]):
                if coef:
                    g_d += coef * cur[b][0]
                    g_q += coef * cur[b][1]
            i_g = (g_d, g_q)
            vcd, vcq = gfl[2], gfl[3]
            th = pll[1]
            co, si = math.cos(th), math.sin(th)
            vpq = -si * vcd + co * vcq
            vmag = math.hypot(vcd, vcq)
            vq_norm = vpq / vmag if vmag > 1e-9 else 0.0
            d_pll, dw_est = cm.pll_derivatives(pll, vq_norm, cfg.gfl, base, omega_f)
            x_w = x[20]
            x_p = x[21] if self.tau_p else 0.0
            dx_w, dx_p, p_ref = cm.droop_derivatives(x_w, x_p, dw_est, P_inv, cfg.gfl)
            d_gfl, _ = cm.gfl_derivatives(gfl, th, 1.0 + dw_est, p_ref, Q_inv, i_g, cfg.gfl, base, omega_f)
            out += list(d_gfl) + list(d_pll) + [dx_w]
            if self.tau_p:
                out.append(dx_p)

        vnodes = [v_t] + ([(vsol[2], vsol[3])] if nc > 1 else [])
        for b in self.indep:
            kb = self.kb[b]
            dd, dq = a[b]
            for k in range(nc):
                coef = self.A_c[k][b]
                if coef:
                    dd += kb * coef * vnodes[k][0]
                    dq += kb * coef * vnodes[k][1]
            out += [dd, dq]

        gi_d = gi_q = 0.0
        for b, coef in enumerate(self.A_k["grid"]):
            if coef:
                gi_d -= coef * cur[b][0]
                gi_q -= coef * cur[b][1]
        vg = vknown["grid"]
        p_g = vg[0] * gi_d + vg[1] * gi_q
        out += list(cm.equgrid_derivatives(omega_f, theta_f, p_g, cfg.grid, base, P_l))
        deriv = np.array(out)
        if not want_outputs:
            return deriv
        if self.has_inv:
            isd, isq, vcd, vcq = x[10], x[11], x[12], x[13]
        else:
            isd = isq = vcd = vcq = 0.0
        y = {
            "i_s_d": isd, "i_s_q": isq, "I_s": math.hypot(isd, isq),
            "i_sm_d": i_sm[0], "i_sm_q": i_sm[1], "I_L2": math.hypot(*i_sm),
            "i_g2_d": gi_d, "i_g2_q": gi_q, "I_g2": math.hypot(gi_d, gi_q),
            "v_t_d": v_t[0], "v_t_q": v_t[1], "V_t": v_mag,
            "v_c_d": vcd, "v_c_q": vcq, "V_c": math.hypot(vcd, vcq),
            "P_inv_meas": vcd * i_g[0] + vcq * i_g[1],
            "Q_inv_meas": vcq * i_g[0] - vcd * i_g[1],
            "P_G": p_g,
            "P_sm_e": v_t[0] * i_sm[0] + v_t[1] * i_sm[1],
            "Te": te,
        }
        for b, (name, *_rest) in enumerate(self.branches):
            y[f"i_{name}_d"] = cur[b][0]
            y[f"i_{name}_q"] = cur[b][1]
        return deriv, y

    def output_labels(self):
        return OUTPUT_LABELS + tuple(
            f"i_{b[0]}_{ax}" for b in self.branches for ax in ("d", "q"))

    def outputs(self, x, u):
        _, y = self.evaluate(x, u, want_outputs=True)
        return np.array([y[k] for k in self.output_labels()])

    def residual(self, x, u):
        """Current balance at the eliminated nodes (identically zero)."""
        sm = [float(v) for v in x[0:7]]
        i_d, i_q, _, _, _ = cm.sm_currents(sm, self.circuit)
        i_sm = cm.rotate(i_d, i_q, sm[0])
        cur = self.branch_currents([float(v) for v in x], i_sm)
        res = []
        for k, row in enumerate(self.A_c):
            inj = i_sm if k == 0 else (0.0, 0.0)
            res.append(sum(c * cur[b][0] for b, c in enumerate(row)) - inj[0])
            res.append(sum(c * cur[b][1] for b, c in enumerate(row)) - inj[1])
        return np.array(res)


def default_inputs(cfg: BenchmarkConfig) -> np.ndarray:
    p_inv = cfg.P_inv if cfg.include_inverter else 0.0
    q_inv = cfg.Q_inv if cfg.include_inverter else 0.0
    return np.array([p_inv, q_inv, cfg.P_sm, cfg.avr.vg_ref, cfg.grid.V, cfg.grid.Pl])


def assemble_benchmark(cfg: BenchmarkConfig) -> DynamicSystem:
    """Wire all device models onto the configured star or triangle network.

    State order: machine (7), AVR (1), governor/turbine (2), inverter filter and
    current control (8), PLL (2), droop (1, +1 when tau_p > 0), one d/q pair per
    independent line current, equivalent grid (2).
    """
    model = BenchmarkModel(cfg)
    return DynamicSystem(
        state_labels=model.labels,
        input_labels=INPUT_LABELS,
        f=model.evaluate,
        g=model.residual,
        output_labels=model.output_labels(),
        outputs=model.outputs,
        u0=default_inputs(cfg),
        reference_state="grid.theta_f",
        slack_input="P_l",
        config=cfg,
        model=model,
    )
