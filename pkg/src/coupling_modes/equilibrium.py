"""Operating point of the assembled EMT model.

The fixed point is found on the EMT equations themselves so that it is an
exact equilibrium of what gets linearised and simulated. The equivalent
grid's angle is the reference (held at zero) and its net load ``P_l`` is the
slack that absorbs the power balance, which forces the steady frequency to
nominal.
"""

from __future__ import annotations

import cmath
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import fsolve

from . import components as cm
from .network import DynamicSystem, assemble_benchmark

log = logging.getLogger(__name__)


class EquilibriumError(RuntimeError):
    """Newton iteration failed to reach the residual tolerance."""

    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


class InfeasibleOperatingPoint(EquilibriumError):
    """The network cannot transfer the requested power."""


@dataclass(frozen=True)
class NewtonSettings:
    tol: float = 1e-10
    max_iter: int = 200
    jacobian_reuse: int = 5
    min_damping: float = 1.0 / 1024
    fd_step: float = 1e-7


@dataclass
class OperatingPoint:
    x: np.ndarray
    u: np.ndarray
    state_labels: tuple
    input_labels: tuple
    residual_norm: float
    iterations: int = 0
    info: dict = field(default_factory=dict)

    def state(self, label: str) -> float:
        return float(self.x[[str(s) for s in self.state_labels].index(label)])

    def input(self, label: str) -> float:
        return float(self.u[list(self.input_labels).index(label)])

    def to_dict(self) -> dict:
        return {
            "states": {str(s): float(v) for s, v in zip(self.state_labels, self.x)},
            "inputs": {k: float(v) for k, v in zip(self.input_labels, self.u)},
            "residual_norm": float(self.residual_norm),
            "iterations": int(self.iterations),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# --- phasor initial guess -----------------------------------------------------

def _machine_steady_state(v_t: complex, i_t: complex, cfg):
    """Rotor angle and flux states of the machine for a terminal phasor pair."""
    c = cm.sm_circuit(cfg.sm, cfg.base.omega_b)
    e = v_t + complex(c.Ra, cfg.sm.Xq) * i_t
    delta = cmath.phase(e) - math.pi / 2
    rot = cmath.exp(-1j * delta)
    vr, ir = v_t * rot, i_t * rot
    i_d, i_q = ir.real, ir.imag
    psi_d = vr.imag + c.Ra * i_q
    psi_q = -(vr.real + c.Ra * i_d)
    i_fd = (psi_d + (c.Lad + c.Ll) * i_d) / c.Lad
    vf = c.Lad * i_fd
    states = (
        delta, 1.0, psi_d, psi_q,
        (c.Lad + c.Lfd) * i_fd - c.Lad * i_d,
        c.Lad * i_fd - c.Lad * i_d,
        -c.Laq * i_q,
    )
    return states, vf


def _phasor_solution(model, u):
    """Steady network in phasors; returns node voltages and machine current.

    Node voltages follow linearly from the injected currents through the bus
    impedance matrix (grid node as reference), so the unknowns are the
    inverter voltage and the machine current and all residuals are voltages
    or powers.
    """
    cfg = model.cfg
    P_inv, Q_inv, P_sm, vg_ref, V, _ = (float(v) for v in u)
    zb = {b[0]: complex(b[3], b[4]) for b in model.branches}
    nodes = (["inv"] if model.has_inv else []) + ["sm"] + (["n"] if "n" in model.c_nodes else [])
    pos = {nd: k for k, nd in enumerate(nodes)}
    y = np.zeros((len(nodes), len(nodes)), complex)
    y_grid = np.zeros(len(nodes), complex)
    for name, frm, to, _, _ in model.branches:
        adm = 1.0 / zb[name]
        for a_, b_ in ((frm, to), (to, frm)):
            if a_ in pos:
                y[pos[a_], pos[a_]] += adm
                if b_ in pos:
                    y[pos[a_], pos[b_]] -= adm
                else:
                    y_grid[pos[a_]] -= adm
    z_bus = np.linalg.inv(y)
    v_open = -z_bus @ y_grid * V

    def voltages(v_inv, i_sm):
        inj = np.zeros(len(nodes), complex)
        inj[pos["sm"]] = i_sm
        if model.has_inv:
            i_s = (complex(P_inv, Q_inv) / v_inv).conjugate()
            inj[pos["inv"]] = i_s - 1j * cfg.gfl.Cf * v_inv
        vs = {nd: complex(v) for nd, v in zip(nodes, v_open + z_bus @ inj)}
        vs["grid"] = complex(V, 0.0)
        return vs

    def unpack(z):
        v_inv = complex(z[0], z[1]) if model.has_inv else None
        return v_inv, complex(z[-2], z[-1])

    def equations(z):
        v_inv, i_sm = unpack(z)
        vs = voltages(v_inv, i_sm)
        res = []
        if model.has_inv:
            m = vs["inv"] - v_inv
            res += [m.real, m.imag]
        v_sm = vs["sm"]
        p_e = (v_sm * i_sm.conjugate()).real + cfg.sm.Ra * abs(i_sm) ** 2
        _, vf = _machine_steady_state(v_sm, i_sm, cfg)
        res += [p_e - P_sm, abs(v_sm) - (vg_ref - vf / cfg.avr.Ke)]
        return res

    z0 = ([V, 0.0] if model.has_inv else []) + [P_sm / V, 0.0]
    sol, _, ier, msg = fsolve(equations, z0, full_output=True, xtol=1e-13)
    if ier != 1 or max(abs(r) for r in equations(sol)) > 1e-9:
        raise InfeasibleOperatingPoint(f"phasor load flow did not converge: {msg}")
    v_inv, i_sm = unpack(sol)
    return voltages(v_inv, i_sm), i_sm


def initial_guess(target, u=None, method: str = "loadflow") -> np.ndarray:
    """Starting state for the Newton solve.

    ``target`` is a DynamicSystem or a BenchmarkConfig. With
    ``method="loadflow"`` the network is first solved in phasors; at steady
    state the EMT model reduces exactly to that problem, so the guess is
    already an equilibrium up to the load-flow tolerance. If the load flow
    fails, or with ``method="flat"``, a flat start is returned (nominal
    voltages, zero angles, zero currents). Integrators are back-computed from
    the setpoints in both cases.
    """
    sys = target if isinstance(target, DynamicSystem) else assemble_benchmark(target)
    u = sys.u0 if u is None else np.asarray(u, float)
    if method not in ("loadflow", "flat"):
        raise ValueError(f"initial_guess: unknown method {method!r}")
    if method == "loadflow":
        try:
            vs, i_sm = _phasor_solution(sys.model, u)
            return _state_from_phasors(sys, u, vs, i_sm)
        except InfeasibleOperatingPoint as exc:
            log.warning("load flow failed (%s); using a flat start", exc)
    V = float(u[sys.input_index("V")])
    vs = {nd: complex(V, 0.0) for nd in ("inv", "sm", "n", "grid")}
    return _state_from_phasors(sys, u, vs, 0j)


def _state_from_phasors(sys, u, vs, i_sm):
    model = sys.model
    cfg = model.cfg
    P_inv, Q_inv, P_sm, vg_ref, V, _ = (float(v) for v in u)
    x = np.zeros(sys.n)
    sm_states, vf = _machine_steady_state(vs["sm"], i_sm, cfg)
    x[0:7] = sm_states
    x[7] = vg_ref - vf / cfg.avr.Ke
    x[8] = x[9] = P_sm
    if model.has_inv:
        g = cfg.gfl
        v = vs["inv"]
        i_s = (complex(P_inv, Q_inv) / v).conjugate()
        th = cmath.phase(v)
        rot = cmath.exp(-1j * th)
        vm = v + complex(g.Rf, g.Lf) * i_s
        ip, vmp = i_s * rot, vm * rot
        vfd = abs(v)
        x[10:18] = [i_s.real, i_s.imag, v.real, v.imag,
                    vmp.real + g.Lf * ip.imag - vfd,
                    vmp.imag - g.Lf * ip.real,
                    vfd, 0.0]
        x[18:20] = [0.0, th]
        x[20] = 0.0
        if model.tau_p:
            x[21] = P_inv
    zb = {b[0]: complex(b[3], b[4]) for b in model.branches}
    off = model.line_offset
    for j, b in enumerate(model.indep):
        name, frm, to, _, _ = model.branches[b]
        i = (vs[frm] - vs[to]) / zb[name]
        x[off + 2 * j] = i.real
        x[off + 2 * j + 1] = i.imag
    x[-2] = 1.0
    x[-1] = 0.0
    return x


def slack_from_guess(sys: DynamicSystem, x, u):
    """Net load that balances the equivalent grid's swing at ``x``."""
    _, y = sys.model.evaluate(x, u, want_outputs=True)
    return y["P_G"] - sys.config.grid.Du * (x[-2] - 1.0)


# --- Newton ------------------------------------------------------------------

def _fd_jacobian(fun, z, h):
    n = z.size
    f0 = fun(z)
    jac = np.empty((f0.size, n))
    for j in range(n):
        step = h * max(1.0, abs(z[j]))
        zp = z.copy()
        zm = z.copy()
        zp[j] += step
        zm[j] -= step
        jac[:, j] = (fun(zp) - fun(zm)) / (2 * step)
    return jac


def newton_solve(fun, z0, settings: NewtonSettings = NewtonSettings(), labels=None):
    """Damped Newton with central-difference Jacobian reused over several steps.

    Returns ``(z, residual_inf_norm, iterations)``.
    """
    z = np.array(z0, float)
    r = fun(z)
    norm = np.max(np.abs(r))
    jac = None
    age = 0
    it = 0
    while norm >= settings.tol:
        if it >= settings.max_iter:
            worst = int(np.argmax(np.abs(r)))
            name = labels[worst] if labels is not None else worst
            raise EquilibriumError(
                f"Newton did not converge in {settings.max_iter} iterations; "
                f"largest residual {norm:.3e} in equation for '{name}'", z)
        if jac is None or age >= settings.jacobian_reuse:
            jac = _fd_jacobian(fun, z, settings.fd_step)
            age = 0
        try:
            dz = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            dz = np.linalg.lstsq(jac, -r, rcond=None)[0]
        lam = 1.0
        while True:
            z_new = z + lam * dz
            r_new = fun(z_new)
            n_new = np.max(np.abs(r_new))
            if np.isfinite(n_new) and n_new < norm:
                break
            lam *= 0.5
            if lam < settings.min_damping:
                if age > 0:
                    break
                z_new, r_new, n_new = z + lam * dz, fun(z + lam * dz), np.inf
                break
        if not np.isfinite(n_new) or n_new >= norm:
            if age > 0:
                # stale Jacobian: refresh and retry from the same point
                jac = None
                it += 1
                continue
            worst = int(np.argmax(np.abs(r)))
            name = labels[worst] if labels is not None else worst
            raise EquilibriumError(
                f"Newton stalled at residual {norm:.3e}; largest residual in equation for '{name}'", z)
        z, r, norm = z_new, r_new, n_new
        age += 1
        it += 1
    return z, float(norm), it


def _angles_beyond_90(sys, x):
    """Machine load angle or PLL angle more than 90 degrees from the grid source."""
    angles = [x[0] + math.pi / 2]
    if sys.model.has_inv:
        angles.append(x[19])
    return any(abs(math.remainder(a, 2 * math.pi)) > math.pi / 2 for a in angles)


def solve_operating_point(sys: DynamicSystem, P_inv=None, P_sm=None, vg_ref=None,
                          settings: NewtonSettings = NewtonSettings(), x0=None,
                          continuation: bool | None = None, continuation_step=0.1) -> OperatingPoint:
    """Damped Newton on ``f(x, u) = 0`` with the grid angle as reference and
    the grid net load as slack.

    ``continuation=None`` tries a direct solve first and falls back to
    stepping the power setpoints up from 0.2 pu; ``True`` forces the
    continuation path and ``False`` disables it.
    """
    u = np.array(sys.u0, float)
    for name, val in (("P_inv", P_inv), ("P_sm", P_sm), ("vg_ref", vg_ref)):
        if val is not None:
            u[sys.input_index(name)] = val
    first = None
    if continuation is not True:
        try:
            return _solve_direct(sys, u, settings, x0)
        except EquilibriumError as exc:
            if continuation is False:
                raise
            first = exc
            log.info("direct solve failed (%s); trying continuation", exc)
    ip, ism = sys.input_index("P_inv"), sys.input_index("P_sm")
    target = u.copy()
    start = u.copy()
    start[ip] = min(target[ip], 0.2)
    start[ism] = min(target[ism], 0.2)
    try:
        op = _solve_direct(sys, start, settings, None)
    except EquilibriumError:
        if first is not None:
            raise first
        raise
    span = max(abs(target[ip] - start[ip]), abs(target[ism] - start[ism]))
    steps = max(1, int(math.ceil(span / continuation_step - 1e-12)))
    for k in range(1, steps + 1):
        uk = start + (target - start) * k / steps
        try:
            op = _solve_direct(sys, uk, settings, op.x)
        except EquilibriumError as exc:
            raise InfeasibleOperatingPoint(
                f"continuation failed at P_inv={uk[ip]:.3f}, P_sm={uk[ism]:.3f}: {exc}") from None
    op.info["continuation_steps"] = steps
    return op


def _solve_direct(sys, u, settings, x0):
    ref = sys.index(sys.reference_state)
    slack = sys.input_index(sys.slack_input)
    u = np.array(u, float)
    if x0 is None:
        x0 = initial_guess(sys, u)
    x0 = np.array(x0, float)
    u[slack] = slack_from_guess(sys, x0, u)
    free = [i for i in range(sys.n) if i != ref]

    def unpack(z):
        x = x0.copy()
        x[free] = z[:-1]
        uu = u.copy()
        uu[slack] = z[-1]
        return x, uu

    def fun(z):
        x, uu = unpack(z)
        return sys.f(x, uu)

    # equations are indexed by state; the reference state's equation is kept
    labels = [str(s) for s in sys.state_labels]
    z0 = np.concatenate([x0[free], [u[slack]]])
    try:
        z, norm, it = newton_solve(fun, z0, settings, labels)
    except EquilibriumError as exc:
        if exc.last is not None and _angles_beyond_90(sys, unpack(exc.last)[0]):
            raise InfeasibleOperatingPoint(
                f"transfer not feasible: Newton diverged with an angle beyond 90 degrees ({exc})") from None
        raise
    x, u = unpack(z)
    log.debug("operating point converged in %d iterations (|f|=%.2e)", it, norm)
    return OperatingPoint(x, u, sys.state_labels, sys.input_labels, norm, it)
