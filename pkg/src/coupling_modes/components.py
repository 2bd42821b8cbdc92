"""Per-unit dq-frame EMT models of the benchmark devices.

Every function here is pure and works on plain floats so the assembled
right-hand side stays cheap enough for fixed-step EMT integration.

Frame conventions
-----------------
Network quantities live in a common dq frame rotating at the equivalent
grid's speed ``omega_f`` (pu). Complex notation ``x = x_d + j x_q`` is used in
the comments. A quantity expressed in a frame at angle ``a`` relative to the
network frame is ``x_a = x_net * exp(-j a)``.

Inductive branches follow ``v = R i + (L/omega_b) di/dt + omega L J i`` with
``J (d, q) = (-q, d)``; generator convention is used for the machine (stator
current positive out of the terminal).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

from .params import (
    AvrParams,
    EquGridParams,
    GflParams,
    GovTurbineParams,
    ParameterError,
    PerUnitBase,
    SmParams,
)

SM_STATES = ("theta_sm", "omega_sm", "psi_d", "psi_q", "psi_fd", "psi_1d", "psi_1q")
AVR_GOV_STATES = ("gamma_avr", "x_gov", "x_turb")
GFL_STATES = ("isd", "isq", "vcd", "vcq", "gamma_currd", "gamma_currq", "vsdfilt", "vsqfilt")
PLL_STATES = ("x_pll_int", "theta_pll")
GRID_STATES = ("omega_f", "theta_f")


@dataclass(frozen=True)
class DqPair:
    d: float
    q: float

    @property
    def magnitude(self) -> float:
        return math.hypot(self.d, self.q)

    def rotate(self, angle: float) -> "DqPair":
        """Express the pair in a frame lagging the current one by ``angle``."""
        c, s = math.cos(angle), math.sin(angle)
        return DqPair(c * self.d + s * self.q, -s * self.d + c * self.q)


def rotate(d, q, angle):
    """Rotate (d, q) by +angle, i.e. multiply by exp(j*angle)."""
    c, s = math.cos(angle), math.sin(angle)
    return c * d - s * q, s * d + c * q


def _check_finite(values, labels, where):
    if math.isfinite(math.fsum(values)):
        return
    for v, name in zip(values, labels):
        if not math.isfinite(v):
            raise ValueError(f"{where}: non-finite value {v!r} for '{name}'")
    raise ValueError(f"{where}: non-finite input")


# --- synchronous machine -----------------------------------------------------

@dataclass(frozen=True)
class SmCircuit:
    """Equivalent-circuit inductances and resistances of the flux model (pu)."""

    Ll: float
    Lad: float
    Laq: float
    Lfd: float
    L1d: float
    L1q: float
    Ra: float
    Rfd: float
    R1d: float
    R1q: float
    d_inv: tuple  # 3x3 inverse of the d-axis flux/current matrix, rows (d, fd, 1d)
    q_inv: tuple  # 2x2 inverse of the q-axis flux/current matrix, rows (q, 1q)


def _inv3(m):
    (a, b, c), (d, e, f), (g, h, i) = m
    det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
    return (
        ((e * i - f * h) / det, (c * h - b * i) / det, (b * f - c * e) / det),
        ((f * g - d * i) / det, (a * i - c * g) / det, (c * d - a * f) / det),
        ((d * h - e * g) / det, (b * g - a * h) / det, (a * e - b * d) / det),
    )


@lru_cache(maxsize=64)
def sm_circuit(p: SmParams, omega_b: float) -> SmCircuit:
    """Classical conversion from reactances/open-circuit time constants to the
    field + one d damper + one q damper equivalent circuit."""
    Ll = p.Xl
    Lad = p.Xd - Ll
    Laq = p.Xq - Ll
    Lfd = Lad * (p.Xd_p - Ll) / (p.Xd - p.Xd_p)
    inv_1d = 1.0 / (p.Xd_pp - Ll) - 1.0 / Lad - 1.0 / Lfd
    if inv_1d <= 0:
        raise ParameterError("sm: Xd_pp too close to Xd_p to place a d-axis damper")
    L1d = 1.0 / inv_1d
    L1q = Laq * (p.Xq_pp - Ll) / (p.Xq - p.Xq_pp)
    Rfd = (Lad + Lfd) / (omega_b * p.Td0_p)
    R1d = (L1d + Lad * Lfd / (Lad + Lfd)) / (omega_b * p.Td0_pp)
    R1q = (Laq + L1q) / (omega_b * p.Tq0_pp)
    md = (
        (-(Lad + Ll), Lad, Lad),
        (-Lad, Lad + Lfd, Lad),
        (-Lad, Lad, Lad + L1d),
    )
    mq00, mq01, mq10, mq11 = -(Laq + Ll), Laq, -Laq, Laq + L1q
    det_q = mq00 * mq11 - mq01 * mq10
    q_inv = ((mq11 / det_q, -mq01 / det_q), (-mq10 / det_q, mq00 / det_q))
    return SmCircuit(Ll, Lad, Laq, Lfd, L1d, L1q, p.Ra, Rfd, R1d, R1q, _inv3(md), q_inv)


def sm_currents(state, c: SmCircuit):
    """Rotor-frame currents (i_d, i_q, i_fd, i_1d, i_1q) from the flux states."""
    _, _, psi_d, psi_q, psi_fd, psi_1d, psi_1q = state
    (a0, a1, a2), (b0, b1, b2), (c0, c1, c2) = c.d_inv
    i_d = a0 * psi_d + a1 * psi_fd + a2 * psi_1d
    i_fd = b0 * psi_d + b1 * psi_fd + b2 * psi_1d
    i_1d = c0 * psi_d + c1 * psi_fd + c2 * psi_1d
    (q0, q1), (r0, r1) = c.q_inv
    i_q = q0 * psi_q + q1 * psi_1q
    i_1q = r0 * psi_q + r1 * psi_1q
    return i_d, i_q, i_fd, i_1d, i_1q


def sm_derivatives(state, v_dq, vf, pm, params: SmParams, base: PerUnitBase, omega_f=1.0):
    """Flux-linkage machine with swing equation.

    ``v_dq`` is the terminal voltage in the network frame, ``vf`` the field
    voltage on the non-reciprocal (Xadu) base so that vf = 1 gives 1 pu open
    circuit voltage. Returns ``(derivatives, (i_d_net, i_q_net), te)``.
    """
    _check_finite(tuple(state) + tuple(v_dq) + (vf, pm), SM_STATES + ("v_d", "v_q", "vf", "pm"),
                  "sm_derivatives")
    wb = base.omega_b
    c = sm_circuit(params, wb)
    theta, omega, psi_d, psi_q = state[0], state[1], state[2], state[3]
    i_d, i_q, i_fd, i_1d, i_1q = sm_currents(state, c)
    vrd, vrq = rotate(v_dq[0], v_dq[1], -theta)
    te = psi_d * i_q - psi_q * i_d
    deriv = (
        wb * (omega - omega_f),
        (pm - te - params.Kd * (omega - omega_f)) / (2.0 * params.H),
        wb * (vrd + c.Ra * i_d + omega * psi_q),
        wb * (vrq + c.Ra * i_q - omega * psi_d),
        wb * c.Rfd * (vf / c.Lad - i_fd),
        -wb * c.R1d * i_1d,
        -wb * c.R1q * i_1q,
    )
    return deriv, rotate(i_d, i_q, theta), te


def sm_current_rate(state, deriv, c: SmCircuit):
    """Time derivative of the network-frame stator current given the state
    derivatives returned by :func:`sm_derivatives`."""
    theta = state[0]
    i_d, i_q, _, _, _ = sm_currents(state, c)
    (a0, a1, a2), _, _ = c.d_inv
    (q0, q1), _ = c.q_inv
    di_d = a0 * deriv[2] + a1 * deriv[4] + a2 * deriv[5]
    di_q = q0 * deriv[3] + q1 * deriv[6]
    # d/dt [exp(j theta) i_rot] = j theta' exp(j theta) i_rot + exp(j theta) di_rot/dt
    rd, rq = rotate(di_d - deriv[0] * i_q, di_q + deriv[0] * i_d, theta)
    return rd, rq


def sm_voltage_gain(state, c: SmCircuit, omega_b):
    """2x2 matrix K with d(i_net)/dt = K v_net + (terms without v)."""
    theta = state[0]
    gd = omega_b * c.d_inv[0][0]
    gq = omega_b * c.q_inv[0][0]
    co, si = math.cos(theta), math.sin(theta)
    # R(theta) diag(gd, gq) R(-theta)
    return (
        (gd * co * co + gq * si * si, (gd - gq) * co * si),
        ((gd - gq) * co * si, gd * si * si + gq * co * co),
    )


def avr_governor_derivatives(state, v_mag, d_omega, avr: AvrParams, gov: GovTurbineParams,
                             p_ref, vg_ref=None):
    """First-order AVR, droop + governor lag + single-state reheat turbine.

    Returns ``(derivatives, vf, pm)`` for the states (gamma_avr, x_gov, x_turb).
    """
    if v_mag < 0:
        raise ValueError("avr_governor_derivatives: voltage magnitude must be >= 0")
    _check_finite(tuple(state) + (v_mag, d_omega, p_ref), AVR_GOV_STATES + ("v_mag", "d_omega", "p_ref"),
                  "avr_governor_derivatives")
    gamma, x_gov, x_turb = state
    ref = avr.vg_ref if vg_ref is None else vg_ref
    vf = avr.Ke * (ref - gamma)
    gov_in = p_ref - d_omega / gov.Rg
    pm = gov.Fh * x_gov + (1.0 - gov.Fh) * x_turb
    deriv = (
        (v_mag - gamma) / avr.Te,
        (gov_in - x_gov) / gov.Tg,
        (x_gov - x_turb) / gov.Tr,
    )
    return deriv, vf, pm


# --- grid-following inverter -------------------------------------------------

def pll_derivatives(state, vq_norm, params: GflParams, base: PerUnitBase, omega_f=1.0):
    """PI phase-locked loop on the normalised q-axis voltage.

    Returns ``(derivatives, d_omega_est)`` where ``d_omega_est`` is the
    estimated frequency deviation from nominal (pu).
    """
    x_int = state[0]
    d_omega = params.Kp_pll * vq_norm + x_int
    deriv = (
        params.Ki_pll * vq_norm,
        base.omega_b * (1.0 + d_omega - omega_f),
    )
    return deriv, d_omega


def droop_derivatives(x_w, x_p, d_omega_est, p_set, params: GflParams):
    """Frequency droop with tau_w filter and optional tau_p setpoint lag.

    Returns ``(d x_w/dt, d x_p/dt or None, p_ref)``.
    """
    dx_w = (d_omega_est - x_w) / params.tau_w
    p_raw = p_set - x_w / params.Rp
    if params.tau_p > 0:
        return dx_w, (p_raw - x_p) / params.tau_p, x_p
    return dx_w, None, p_raw


def gfl_derivatives(state, theta_pll, omega_pll, p_ref, q_ref, i_g, params: GflParams,
                    base: PerUnitBase, omega_f=1.0):
    """LC filter plus PI current control with filtered voltage feed-forward.

    ``state`` is (isd, isq, vcd, vcq, gamma_currd, gamma_currq, vsdfilt,
    vsqfilt) with the filter quantities in the network frame and the
    controller quantities in the PLL frame. ``i_g`` is the grid-side current
    leaving the capacitor node. Returns ``(derivatives, (v_md, v_mq))`` with
    the modulation voltage in the network frame.
    """
    isd, isq, vcd, vcq, gd, gq, vfd, vfq = state
    wb = base.omega_b
    co, si = math.cos(theta_pll), math.sin(theta_pll)
    # network -> PLL frame
    i_pd = co * isd + si * isq
    i_pq = -si * isd + co * isq
    v_pd = co * vcd + si * vcq
    v_pq = -si * vcd + co * vcq
    vden = vfd if abs(vfd) > 1e-6 else 1e-6
    e_d = p_ref / vden - i_pd
    e_q = -q_ref / vden - i_pq
    lw = omega_pll * params.Lf
    vm_pd = params.Kp * e_d + gd - lw * i_pq + vfd
    vm_pq = params.Kp * e_q + gq + lw * i_pd + vfq
    vmd = co * vm_pd - si * vm_pq
    vmq = si * vm_pd + co * vm_pq
    kl = wb / params.Lf
    kc = wb / params.Cf
    deriv = (
        kl * (vmd - vcd - params.Rf * isd) + wb * omega_f * isq,
        kl * (vmq - vcq - params.Rf * isq) - wb * omega_f * isd,
        kc * (isd - i_g[0]) + wb * omega_f * vcq,
        kc * (isq - i_g[1]) - wb * omega_f * vcd,
        params.Ki * e_d,
        params.Ki * e_q,
        (v_pd - vfd) / params.tau_f,
        (v_pq - vfq) / params.tau_f,
    )
    return deriv, (vmd, vmq)


# --- passive elements and equivalent grid -------------------------------------

def line_derivatives(i, v_from, v_to, R, L, omega, base: PerUnitBase):
    """RL branch current derivative in a frame rotating at ``omega`` (pu)."""
    if L <= 0:
        raise ParameterError("line_derivatives: L must be > 0; lump zero-inductance branches "
                             "into a neighbouring impedance")
    wb = base.omega_b
    k = wb / L
    return (
        k * (v_from[0] - v_to[0] - R * i[0]) + wb * omega * i[1],
        k * (v_from[1] - v_to[1] - R * i[1]) - wb * omega * i[0],
    )


def equgrid_derivatives(omega_f, theta_f, p_g, params: EquGridParams, base: PerUnitBase, p_l=None):
    """Swing of the equivalent grid; ``p_g`` is the power it receives from the
    benchmark network, ``p_l`` its net load (defaults to ``params.Pl``)."""
    load = params.Pl if p_l is None else p_l
    d_omega = omega_f - 1.0
    return (
        (p_g - load - params.Du * d_omega) / (2.0 * params.He),
        base.omega_b * d_omega,
    )


def equgrid_voltage(params: EquGridParams, v=None):
    """Source voltage in the network frame, which is locked to the source."""
    return (params.V if v is None else v), 0.0
