"""Parameter sweeps, mode tracking and structural-tendency classification."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .config import BenchmarkConfig, with_param
from .equilibrium import EquilibriumError, solve_operating_point
from .linearization import LinearizationError, config_factory, linearize, parameter_jacobian
from .modal import ModalError, eigen_decompose, fmt, mode_reports
from .network import assemble_benchmark
from .params import ParameterError

log = logging.getLogger(__name__)

MAC_THRESHOLD = 0.7
SLOPE_TOL = 1e-4

# named fixed-context overrides
CONTEXTS = {
    "op1": {"setpoints.P_inv": 0.2, "setpoints.P_sm": 0.2},
    # vg_ref raised so the machine is not under-excited at high loading
    "op2": {"setpoints.P_inv": 0.9, "setpoints.P_sm": 0.9, "avr.vg_ref": 1.1},
    "strong": {"lines.lcc": 5.0},
    "weak": {"lines.lcc": 20.0},
}


def context_overrides(names) -> dict:
    """Resolve a list of context names into ``{name: overrides}``."""
    if isinstance(names, str):
        names = [n for n in names.split(",") if n]
    out = {}
    for n in names:
        if n not in CONTEXTS:
            raise ParameterError(f"unknown context {n!r} (known: {', '.join(CONTEXTS)})")
        out[n] = dict(CONTEXTS[n])
    return out


@dataclass(frozen=True)
class SweepSpec:
    path: str
    grid: tuple
    overrides: dict = field(default_factory=dict)
    conservation: str = "none"  # or "total-generation-constant"
    P_total: float | None = None

    def __post_init__(self):
        g = tuple(float(v) for v in self.grid)
        object.__setattr__(self, "grid", g)
        if not g:
            raise ParameterError("sweep grid is empty")
        d = np.diff(g)
        if len(g) > 1 and not (np.all(d > 0) or np.all(d < 0)):
            raise ParameterError(f"sweep grid for {self.path} must be strictly monotone")
        if self.conservation not in ("none", "total-generation-constant"):
            raise ParameterError(f"unknown conservation rule {self.conservation!r}")
        if self.conservation != "none":
            if self.path != "setpoints.P_inv":
                raise ParameterError("total-generation-constant applies to setpoints.P_inv sweeps")
            if self.P_total is None:
                raise ParameterError("total-generation-constant needs P_total")
            bad = [v for v in g if self.P_total - v < 0]
            if bad:
                raise ParameterError(f"P_sm = P_total - P_inv < 0 at P_inv = {bad[0]}")

    def reversed(self) -> "SweepSpec":
        return replace(self, grid=self.grid[::-1])


@dataclass
class SweepPoint:
    value: float
    modes: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    op: object = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class Trajectory:
    """Chain of linked modes: ``members`` holds (point index, mode position, MAC to previous)."""

    ident: int
    members: list = field(default_factory=list)

    def reports(self, result: "SweepResult"):
        return [result.points[p].reports[k] for p, k, _ in self.members]

    def values(self, result):
        return np.array([result.points[p].value for p, _, _ in self.members])

    def lambdas(self, result):
        return np.array([result.points[p].modes[k].lam for p, k, _ in self.members])

    def damping(self, result):
        return np.array([r.mode.damping for r in self.reports(result)])

    def freq(self, result):
        return np.array([r.mode.freq_hz for r in self.reports(result)])

    def flux(self, result):
        """psi_d + psi_q participation along the trajectory."""
        return np.array([sum(r.flux) for r in self.reports(result)])

    def is_coupling(self, result) -> bool:
        return any(r.coupling_class == "coupling" for r in self.reports(result))


@dataclass
class SweepResult:
    spec: SweepSpec
    points: list
    trajectories: list
    context: str = ""

    @property
    def failures(self):
        return [(p.value, p.error) for p in self.points if not p.ok]

    def coupling_trajectories(self, min_freq_hz: float = 0.0, full: bool = True):
        n_ok = sum(p.ok for p in self.points)
        out = []
        for t in self.trajectories:
            if full and len(t.members) != n_ok:
                continue
            if t.is_coupling(self) and min(t.freq(self)) >= min_freq_hz:
                out.append(t)
        return out


def mac(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    return float(abs(np.vdot(a, b)) ** 2 / (np.vdot(a, a).real * np.vdot(b, b).real))


def track_modes(prev, nxt, threshold: float = MAC_THRESHOLD):
    """Greedy MAC assignment between two mode sets.

    Returns ``[(i, j, mac)]``; candidates are taken by decreasing MAC, ties
    by eigenvalue distance. Pairs below ``threshold`` are left unlinked.
    """
    cands = []
    for i, a in enumerate(prev):
        for j, b in enumerate(nxt):
            m = mac(a.phi, b.phi)
            if m >= threshold:
                cands.append((-round(m, 12), abs(a.lam - b.lam), i, j, m))
    cands.sort()
    used_i, used_j, links = set(), set(), []
    for _, _, i, j, m in cands:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        links.append((i, j, m))
    return sorted(links)


def point_config(cfg: BenchmarkConfig, spec: SweepSpec, value: float) -> BenchmarkConfig:
    for path, v in spec.overrides.items():
        cfg = with_param(cfg, path, v)
    cfg = with_param(cfg, spec.path, value)
    if spec.conservation == "total-generation-constant":
        cfg = with_param(cfg, "setpoints.P_sm", spec.P_total - value)
    return cfg


def _run_point(cfg, spec, value, threshold, sensitivity, rel_dp):
    pt = SweepPoint(value)
    try:
        pcfg = point_config(cfg, spec, value)
        sys = assemble_benchmark(pcfg)
        op = solve_operating_point(sys)
        lin = linearize(sys, op, richardson=False)
        modes = eigen_decompose(lin)
        dA = None
        if sensitivity:
            dp = rel_dp * abs(value) if value else rel_dp
            dA = {spec.path: parameter_jacobian(config_factory(pcfg, spec.path), value, dp)}
        pt.modes = modes
        pt.reports = mode_reports(lin, modes, threshold=threshold, dA=dA)
        pt.op = op
    except (EquilibriumError, LinearizationError, ModalError, ParameterError, ArithmeticError) as exc:
        pt.error = f"{type(exc).__name__}: {exc}"
        log.warning("sweep %s = %g failed: %s", spec.path, value, pt.error)
    return pt


def link_points(points, threshold: float = MAC_THRESHOLD):
    """Chain modes of consecutive successful points into trajectories."""
    trajs = []
    open_at = {}  # mode position at last ok point -> trajectory
    last = None
    for p_idx, pt in enumerate(points):
        if not pt.ok:
            continue
        if last is None:
            for k in range(len(pt.modes)):
                t = Trajectory(len(trajs), [(p_idx, k, 1.0)])
                trajs.append(t)
                open_at[k] = t
        else:
            links = track_modes(points[last].modes, pt.modes, threshold)
            nxt = {}
            linked = set()
            for i, j, m in links:
                if i in open_at:
                    t = open_at[i]
                    t.members.append((p_idx, j, m))
                    nxt[j] = t
                    linked.add(j)
            for k in range(len(pt.modes)):
                if k not in linked:
                    t = Trajectory(len(trajs), [(p_idx, k, 1.0)])
                    trajs.append(t)
                    nxt[k] = t
            open_at = nxt
        last = p_idx
    return trajs


def run_sweep(cfg: BenchmarkConfig, spec: SweepSpec, threshold: float = 0.05,
              mac_threshold: float = MAC_THRESHOLD, sensitivity: bool = False,
              rel_dp: float = 1e-3, workers: int | None = None, context: str = "") -> SweepResult:
    """Equilibrium, linearisation and modal analysis at every grid value.

    A point whose operating point cannot be found is recorded as failed and
    the sweep carries on. ``workers > 1`` evaluates points in processes.
    """
    args = [(cfg, spec, v, threshold, sensitivity, rel_dp) for v in spec.grid]
    if workers and workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            points = list(ex.map(_run_point, *zip(*args)))
    else:
        points = [_run_point(*a) for a in args]
    return SweepResult(spec, points, link_points(points, mac_threshold), context)


def penetration_sweep(cfg: BenchmarkConfig, p_inv_grid, P_total: float = 1.0,
                      overrides: dict | None = None, **kw) -> SweepResult:
    """Sweep the inverter share at constant total generation (``P_sm = P_total - P_inv``)."""
    spec = SweepSpec("setpoints.P_inv", tuple(p_inv_grid), dict(overrides or {}),
                     "total-generation-constant", P_total)
    return run_sweep(cfg, spec, **kw)


def run_contexts(cfg, path, grid, contexts, **kw) -> dict:
    """One sweep per named context; returns ``{context: SweepResult}``."""
    out = {}
    for name, ov in context_overrides(contexts).items():
        out[name] = run_sweep(cfg, SweepSpec(path, tuple(grid), ov), context=name, **kw)
    return out


# ---------------------------------------------------------------- tendencies

def damping_slope(values, damping) -> float:
    """Least-squares slope of damping against the parameter mapped onto [0, 1],
    i.e. the fitted damping change across the swept range."""
    values = np.asarray(values, float)
    damping = np.asarray(damping, float)
    if len(values) < 2 or np.ptp(values) == 0:
        return 0.0
    x = (values - values.min()) / np.ptp(values)
    return float(np.polyfit(x, damping, 1)[0])


def trend_sign(slope: float, tol: float = SLOPE_TOL) -> int:
    return 0 if abs(slope) < tol else (1 if slope > 0 else -1)


@dataclass(frozen=True)
class Tendency:
    key: str
    slopes: dict  # context -> slope (None when the mode is absent)
    verdict: str  # structural | non-structural | neutral
    direction: int  # +1 damping rises with the parameter, -1 falls, 0 mixed/flat
    weak: bool

    def to_dict(self):
        return {"mode": self.key, "slopes": {k: (None if v is None else float(fmt(v)))
                                             for k, v in self.slopes.items()},
                "verdict": self.verdict, "direction": self.direction, "weak": self.weak}


def verdict_from_slopes(slopes: dict, tol: float = SLOPE_TOL) -> tuple[str, int, bool]:
    """Structural iff every non-flat context has the same trend sign."""
    signs = {k: trend_sign(s, tol) for k, s in slopes.items() if s is not None}
    live = [s for s in signs.values() if s != 0]
    weak = len(live) < len(slopes)
    if not live:
        return "neutral", 0, weak
    if all(s == live[0] for s in live):
        return "structural", live[0], weak
    return "non-structural", 0, False


def _match_contexts(ref: SweepResult, other: SweepResult, threshold: float):
    """Map trajectories of ``other`` onto those of ``ref`` by MAC of their first mode."""
    def firsts(res):
        ts = [t for t in res.trajectories if len(t.members) > 1 or len(res.spec.grid) == 1]
        return ts, [res.points[t.members[0][0]].modes[t.members[0][1]] for t in ts]

    rt, rm = firsts(ref)
    ot, om = firsts(other)
    links = track_modes(rm, om, threshold)
    return {rt[i].ident: ot[j] for i, j, _ in links}


def classify_tendency(results: dict, tol: float = SLOPE_TOL, match_threshold: float = 0.5,
                      min_freq_hz: float = 1.0) -> list[Tendency]:
    """Structural / non-structural verdict per tracked oscillatory mode.

    ``results`` maps context names to sweeps over the same parameter. Modes
    are matched across contexts by MAC of their first tracked eigenvector;
    a context where the match fails contributes no slope.
    """
    if len(results) < 2:
        raise ParameterError("classify_tendency needs at least two contexts")
    names = list(results)
    ref = results[names[0]]
    maps = {n: _match_contexts(ref, results[n], match_threshold) for n in names[1:]}
    out = []
    for t in ref.trajectories:
        if len(t.members) < 2 and len(ref.spec.grid) > 1:
            continue
        f0 = t.freq(ref)[0]
        if f0 < min_freq_hz:
            continue
        slopes = {names[0]: damping_slope(t.values(ref), t.damping(ref))}
        for n in names[1:]:
            o = maps[n].get(t.ident)
            slopes[n] = None if o is None else damping_slope(o.values(results[n]), o.damping(results[n]))
        verdict, direction, weak = verdict_from_slopes(slopes, tol)
        key = f"{f0:.0f}Hz#{t.ident}"
        out.append(Tendency(key, slopes, verdict, direction, weak))
    return out


# ------------------------------------------------------------------- exports

def write_points_csv(res: SweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "mode", "re", "im", "freq_hz", "damping", "coupling_class",
                    "p_psi_d", "p_psi_q", "error"])
        for pt in res.points:
            if not pt.ok:
                w.writerow([fmt(pt.value), "", "", "", "", "", "", "", "", pt.error])
                continue
            for r in pt.reports:
                w.writerow([fmt(pt.value), r.mode.index, fmt(r.mode.lam.real), fmt(r.mode.lam.imag),
                            fmt(r.mode.freq_hz), fmt(r.mode.damping), r.coupling_class,
                            fmt(r.flux[0]), fmt(r.flux[1]), ""])


def write_trajectories_csv(res: SweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "value", "mode", "mac", "re", "im", "freq_hz", "damping",
                    "coupling_class", "p_psi_d", "p_psi_q", "S_re", "S_im", "angle_deg",
                    "quadrant", "effect"])
        for t in res.trajectories:
            for (p, k, m), r in zip(t.members, t.reports(res)):
                s = r.sensitivities.get(res.spec.path)
                sens = ["", "", "", "", ""] if s is None else [
                    fmt(s.S.real), fmt(s.S.imag), fmt(s.angle_deg), s.quadrant, s.effect]
                w.writerow([t.ident, fmt(res.points[p].value), r.mode.index, fmt(m),
                            fmt(r.mode.lam.real), fmt(r.mode.lam.imag), fmt(r.mode.freq_hz),
                            fmt(r.mode.damping), r.coupling_class, fmt(r.flux[0]), fmt(r.flux[1])]
                           + sens)


def write_flux_table(res: SweepResult, path, min_freq_hz: float = 100.0) -> None:
    """Table of flux participations (percent): one row per grid value, a
    psi_d / psi_q column pair per tracked coupling mode."""
    trajs = res.coupling_trajectories(min_freq_hz)
    trajs.sort(key=lambda t: t.freq(res)[-1])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = [res.spec.path]
        for t in trajs:
            head += [f"mode{t.ident}_psi_d_pct", f"mode{t.ident}_psi_q_pct"]
        w.writerow(head)
        rows = {}
        for t in trajs:
            for (p, _, _), r in zip(t.members, t.reports(res)):
                rows.setdefault(p, {})[t.ident] = r.flux
        for p, pt in enumerate(res.points):
            if p not in rows:
                continue
            row = [fmt(pt.value)]
            for t in trajs:
                fl = rows[p].get(t.ident)
                row += ["", ""] if fl is None else [fmt(100 * fl[0]), fmt(100 * fl[1])]
            w.writerow(row)


def write_tendencies_json(tendencies, path) -> None:
    with open(path, "w") as fh:
        json.dump([t.to_dict() for t in tendencies], fh, indent=2, sort_keys=True)
        fh.write("\n")
