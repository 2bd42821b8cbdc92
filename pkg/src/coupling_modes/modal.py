"""Eigenanalysis and the modal quantities built on it.

Conventions
-----------
Right eigenvectors ``phi`` are columns, left eigenvectors ``psi`` are rows
scaled so that ``psi_i . phi_j = delta_ij``. Damping is ``-Re(l)/|l|``.

``eigenvalue_sensitivity`` returns the residue ``S = d(lambda)/dp``. The
quadrant rule (I or IV: stabilizing, II or III: destabilizing) is applied to
``S`` as is. :meth:`Sensitivity.damping_rate` gives the first-order change of
the damping ratio, which is the physical check on that rule.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .linearization import LinearModel

GROUPS = ("SM", "inverter", "grid")
_DEVICE_GROUP = {"sm": "SM", "avr": "SM", "gov": "SM", "gfl": "inverter", "pll": "inverter",
                 "droop": "inverter", "grid": "grid"}
# magnitude name -> (d output, q output)
CURRENT_MAGNITUDES = {
    "I_s": ("i_s_d", "i_s_q"),
    "I_L2": ("i_sm_d", "i_sm_q"),
    "I_g2": ("i_g2_d", "i_g2_q"),
}


class ModalError(ArithmeticError):
    pass


class DefectiveMatrixError(ModalError):
    pass


class NearDefectiveWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class Mode:
    index: int
    lam: complex
    phi: np.ndarray
    psi: np.ndarray
    labels: tuple = ()
    pair: bool = False  # True when the conjugate partner is implied

    @property
    def freq_hz(self) -> float:
        return mode_frequency_damping(self.lam)[0]

    @property
    def damping(self) -> float:
        return mode_frequency_damping(self.lam)[1]

    @property
    def sigma(self) -> float:
        return self.lam.real

    @property
    def omega(self) -> float:
        return self.lam.imag


def mode_frequency_damping(lam: complex) -> tuple[float, float]:
    lam = complex(lam)
    mag = abs(lam)
    if mag == 0.0:
        return 0.0, 1.0
    return abs(lam.imag) / (2 * math.pi), -lam.real / mag


def _as_matrix(m):
    if isinstance(m, LinearModel):
        return m.A, tuple(str(s) for s in m.state_labels)
    a = np.asarray(m, float)
    return a, tuple(f"x{i}" for i in range(a.shape[0]))


def eigen_decompose(m, pairs: str = "once", cond_limit: float = 1e12) -> list[Mode]:
    """All eigenvalues with bi-orthonormal left/right eigenvectors.

    ``pairs="once"`` keeps one member (Im > 0) of every conjugate pair and
    flags it; ``pairs="all"`` keeps every eigenvalue.
    """
    A, labels = _as_matrix(m)
    if not np.all(np.isfinite(A)):
        raise ModalError("state matrix has non-finite entries")
    try:
        lam, V = np.linalg.eig(A)
    except np.linalg.LinAlgError as exc:
        raise ModalError(f"eigensolver failed (cond(A) ~ {np.linalg.cond(A):.3e}): {exc}") from None
    V = V / np.linalg.norm(V, axis=0)
    cond = np.linalg.cond(V)
    if not np.isfinite(cond) or cond > cond_limit:
        raise DefectiveMatrixError(
            f"eigenvector matrix is numerically singular (cond = {cond:.3e}); the state matrix is "
            "(nearly) defective. Perturb a parameter slightly and retry.")
    W = np.linalg.inv(V)
    scale = max(np.linalg.norm(A, np.inf), 1e-300)
    # least damped first, then by frequency
    order = sorted(range(len(lam)), key=lambda k: (-lam[k].real, abs(lam[k].imag), -lam[k].imag))
    modes = []
    for k in order:
        l, phi, psi = lam[k], V[:, k], W[k, :]
        res = np.linalg.norm(A @ phi - l * phi)
        if res > 1e-8 * scale:
            raise ModalError(f"eigenpair residual {res:.3e} too large for lambda = {l:.6g}")
        if pairs == "once":
            if l.imag < 0:
                continue
            modes.append(Mode(len(modes), complex(l), phi, psi, labels, pair=l.imag > 0))
        elif pairs == "all":
            modes.append(Mode(len(modes), complex(l), phi, psi, labels, pair=False))
        else:
            raise ValueError(f"pairs must be 'once' or 'all', got {pairs!r}")
    return modes


def participation_factors(modes, norm: str = "sum") -> np.ndarray:
    """Matrix ``P[i, k]`` = participation of state k in mode i.

    ``norm="sum"`` scales each row to sum to one, ``"max"`` scales the
    largest entry to one.
    """
    rows = []
    for md in modes:
        p = np.abs(md.phi * md.psi)
        if norm == "sum":
            tot = p.sum()
        elif norm == "max":
            tot = p.max()
        else:
            raise ValueError(f"norm must be 'sum' or 'max', got {norm!r}")
        if not tot > 0:
            raise DefectiveMatrixError(f"mode {md.index}: zero participation vector")
        rows.append(p / tot)
    return np.array(rows)


def group_of_label(label: str) -> str:
    dev = label.split(".", 1)[0]
    if dev.startswith("line_"):
        return "grid"
    return _DEVICE_GROUP.get(dev, dev)


def group_participation(p_row, labels) -> dict:
    out = {g: 0.0 for g in GROUPS}
    for v, lab in zip(p_row, labels):
        g = group_of_label(str(lab))
        out[g] = out.get(g, 0.0) + float(v)
    return out


def flux_participation(p_row, labels) -> tuple[float, float]:
    """Participation of the machine's stator fluxes (psi_d, psi_q)."""
    labs = [str(s) for s in labels]
    return float(p_row[labs.index("sm.psi_d")]), float(p_row[labs.index("sm.psi_q")])


def classify_coupling(participations, labels=None, threshold: float = 0.05) -> str:
    """``coupling`` when at least two of the SM / inverter / grid groups exceed
    ``threshold``; otherwise ``local-SM``, ``local-inverter`` or ``grid`` after
    the dominant group. ``participations`` is either a per-state vector (with
    ``labels``) or a dict of group totals."""
    if isinstance(participations, dict):
        groups = {g: float(participations.get(g, 0.0)) for g in GROUPS}
    else:
        groups = group_participation(participations, labels)
    above = [g for g in GROUPS if groups[g] > threshold]
    if len(above) >= 2:
        return "coupling"
    dominant = max(GROUPS, key=lambda g: groups[g])
    return {"SM": "local-SM", "inverter": "local-inverter", "grid": "grid"}[dominant]


def extended_mode_shape(gamma_d: complex, gamma_q: complex, Id0: float, Iq0: float) -> complex:
    """Mode shape of a magnitude ``sqrt(Id^2 + Iq^2)`` from its d/q shapes."""
    im0 = math.hypot(Id0, Iq0)
    if im0 == 0.0:
        raise ValueError("extended_mode_shape: operating magnitude is zero, shape undefined")
    return (Id0 / im0) * complex(gamma_d) + (Iq0 / im0) * complex(gamma_q)


def magnitude_shapes(lin: LinearModel, mode: Mode, names=tuple(CURRENT_MAGNITUDES)) -> dict:
    """Extended shapes of current magnitudes, using the linearised outputs."""
    if lin.C is None:
        raise ModalError("linear model carries no output matrix")
    out = {}
    for name in names:
        d, q = CURRENT_MAGNITUDES[name]
        gd = complex(lin.output_row(d) @ mode.phi)
        gq = complex(lin.output_row(q) @ mode.phi)
        out[name] = extended_mode_shape(gd, gq, lin.output_value(d), lin.output_value(q))
    return out


def eigenvalue_sensitivity(m, dA_dp, mode: Mode) -> complex:
    """First-order eigenvalue derivative ``psi (dA/dp) phi / (psi phi)``."""
    dA = np.asarray(dA_dp)
    den = complex(mode.psi @ mode.phi)
    if abs(den) < 1e-10 * np.linalg.norm(mode.psi) * np.linalg.norm(mode.phi):
        warnings.warn(f"mode {mode.index}: psi.phi ~ 0, eigenvalue is nearly defective",
                      NearDefectiveWarning, stacklevel=2)
        if den == 0:
            return complex(math.nan, math.nan)
    return complex(mode.psi @ dA @ mode.phi) / den


def quadrant(z: complex, tol_deg: float = 1e-9) -> str:
    """``I``..``IV`` or ``boundary`` for angles on an axis, ``zero`` for 0."""
    z = complex(z)
    if z == 0:
        return "zero"
    ang = math.degrees(math.atan2(z.imag, z.real))
    for axis in (-180.0, -90.0, 0.0, 90.0, 180.0):
        if abs(ang - axis) <= tol_deg:
            return "boundary"
    if 0 < ang < 90:
        return "I"
    if 90 < ang < 180:
        return "II"
    if -180 < ang < -90:
        return "III"
    return "IV"


def quadrant_classification(S: complex, tol_deg: float = 1e-9) -> str:
    """Quadrant I or IV: ``stabilizing``; II or III: ``destabilizing``;
    on an axis or zero: ``indeterminate``."""
    q = quadrant(S, tol_deg)
    if q in ("I", "IV"):
        return "stabilizing"
    if q in ("II", "III"):
        return "destabilizing"
    return "indeterminate"


@dataclass(frozen=True)
class Sensitivity:
    parameter: str
    S: complex  # d(lambda)/dp

    @property
    def angle_deg(self) -> float:
        return math.degrees(math.atan2(self.S.imag, self.S.real))

    @property
    def magnitude(self) -> float:
        return abs(self.S)

    @property
    def quadrant(self) -> str:
        return quadrant(self.S)

    @property
    def effect(self) -> str:
        return quadrant_classification(self.S)

    def damping_rate(self, lam: complex) -> float:
        """First-order d(zeta)/dp of a mode at ``lam`` implied by ``S``."""
        s, w = lam.real, lam.imag
        mag = abs(lam)
        if mag == 0:
            return 0.0
        # zeta = -s/|l|; d zeta = -(w^2 ds - s w dw)/|l|^3
        return -(w * w * self.S.real - s * w * self.S.imag) / mag ** 3


@dataclass
class ModeReport:
    mode: Mode
    participations: dict
    groups: dict
    coupling_class: str
    extended_shapes: dict = field(default_factory=dict)
    sensitivities: dict = field(default_factory=dict)

    @property
    def flux(self) -> tuple[float, float]:
        return self.participations.get("sm.psi_d", 0.0), self.participations.get("sm.psi_q", 0.0)


def mode_reports(lin: LinearModel, modes=None, threshold: float = 0.05, shapes: bool = True,
                 dA: dict | None = None) -> list[ModeReport]:
    """Participation, grouping, coupling class and (optionally) extended
    current shapes and sensitivities for every mode. ``dA`` maps parameter
    names to ``dA/dp`` matrices."""
    if modes is None:
        modes = eigen_decompose(lin)
    labels = [str(s) for s in lin.state_labels]
    P = participation_factors(modes)
    out = []
    for md, row in zip(modes, P):
        groups = group_participation(row, labels)
        rep = ModeReport(md, dict(zip(labels, map(float, row))), groups,
                         classify_coupling(groups, threshold=threshold))
        if shapes and lin.C is not None and md.lam.imag > 0:
            try:
                rep.extended_shapes = magnitude_shapes(lin, md)
            except ValueError:
                pass
        for name, mat in (dA or {}).items():
            rep.sensitivities[name] = Sensitivity(name, eigenvalue_sensitivity(lin, mat, md))
        out.append(rep)
    return out


def select_modes(reports, min_freq_hz: float = 0.0, max_damping: float = 1.0,
                 coupling_only: bool = False):
    sel = []
    for r in reports:
        if r.mode.freq_hz < min_freq_hz or r.mode.damping > max_damping:
            continue
        if coupling_only and r.coupling_class != "coupling":
            continue
        sel.append(r)
    return sel


def fmt(v: float) -> str:
    """Fixed 9-significant-digit formatting used by every CSV writer."""
    v = float(v)
    if v == 0.0:
        return "0"
    return f"{v:.9g}"


def write_mode_table(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "re", "im", "freq_hz", "damping", "coupling_class",
                    "p_SM", "p_inverter", "p_grid", "p_psi_d", "p_psi_q"])
        for r in reports:
            f, z = mode_frequency_damping(r.mode.lam)
            w.writerow([r.mode.index, fmt(r.mode.lam.real), fmt(r.mode.lam.imag), fmt(f), fmt(z),
                        r.coupling_class, fmt(r.groups["SM"]), fmt(r.groups["inverter"]),
                        fmt(r.groups["grid"]), fmt(r.flux[0]), fmt(r.flux[1])])


def write_participations(reports, path) -> None:
    if not reports:
        return
    labels = list(reports[0].participations)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "re", "im"] + labels)
        for r in reports:
            w.writerow([r.mode.index, fmt(r.mode.lam.real), fmt(r.mode.lam.imag)]
                       + [fmt(r.participations[k]) for k in labels])


def write_sensitivities(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "re", "im", "parameter", "S_re", "S_im", "magnitude", "angle_deg",
                    "quadrant", "effect", "dzeta_dp"])
        for r in reports:
            for name, s in r.sensitivities.items():
                w.writerow([r.mode.index, fmt(r.mode.lam.real), fmt(r.mode.lam.imag), name,
                            fmt(s.S.real), fmt(s.S.imag), fmt(s.magnitude), fmt(s.angle_deg),
                            s.quadrant, s.effect, fmt(s.damping_rate(r.mode.lam))])
