"""Nonlinear time-domain simulation and ringdown mode estimation.

The integrator is the implicit trapezoidal rule with a simplified Newton
corrector (Jacobian frozen, refreshed on slow convergence). Steps that still
fail are halved down to a floor before the run is aborted.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import least_squares

from .linearization import jacobian_fd
from .modal import fmt
from .network import DynamicSystem


class SimulationError(ArithmeticError):
    def __init__(self, msg, t=None):
        super().__init__(msg)
        self.t = t


class NoOscillationError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    time: float
    target: str  # input label
    value: float
    relative: bool = False  # add to the current value instead of replacing it


@dataclass(frozen=True)
class Scenario:
    t_end: float
    events: tuple = ()
    max_step: float = 1e-5
    channels: tuple = ()
    x0: np.ndarray | None = None
    u0: np.ndarray | None = None
    sample_dt: float | None = None

    def __post_init__(self):
        if not self.t_end > 0:
            raise ValueError("scenario t_end must be > 0")
        if not self.max_step > 0:
            raise ValueError("scenario max_step must be > 0")
        evs = tuple(e if isinstance(e, Event) else Event(*e) for e in self.events)
        times = [e.time for e in evs]
        if times != sorted(times):
            raise ValueError("scenario events must be time-ordered")
        if any(t < 0 or t > self.t_end for t in times):
            raise ValueError("scenario event outside [0, t_end]")
        object.__setattr__(self, "events", evs)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        d["events"] = tuple(Event(**e) if isinstance(e, dict) else Event(*e) for e in d.get("events", ()))
        d["channels"] = tuple(d.get("channels", ()))
        return cls(**{k: v for k, v in d.items() if not k.startswith("_")})

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Trace:
    t: np.ndarray
    data: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.data[name]

    @property
    def channels(self):
        return tuple(self.data)

    def window(self, t0: float, t1: float) -> "Trace":
        m = (self.t >= t0 - 1e-12) & (self.t <= t1 + 1e-12)
        return Trace(self.t[m], {k: v[m] for k, v in self.data.items()}, dict(self.info))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + list(self.data))
            cols = list(self.data.values())
            for i, t in enumerate(self.t):
                w.writerow([fmt(t)] + [fmt(c[i]) for c in cols])


def channel_magnitude(d, q) -> np.ndarray:
    """Pointwise sqrt(d^2 + q^2)."""
    return np.hypot(np.asarray(d, float), np.asarray(q, float))


def _resolve_channels(sys: DynamicSystem, channels):
    states = [str(s) for s in sys.state_labels]
    outs = list(sys.output_labels or ())
    plan = []
    for c in channels:
        if c in states:
            plan.append((c, "x", states.index(c)))
        elif c in outs:
            plan.append((c, "y", outs.index(c)))
        elif c in sys.input_labels:
            plan.append((c, "u", sys.input_labels.index(c)))
        else:
            raise KeyError(f"unknown channel {c!r}")
    return plan


class _Stepper:
    """Trapezoidal steps with a frozen-Jacobian Newton corrector."""

    def __init__(self, fun, x, tol, max_iter, jac_step):
        self.fun = fun
        self.tol = tol
        self.max_iter = max_iter
        self.jac_step = jac_step
        self.J = None
        self.h = None
        self.lu = None
        self.refresh(x)

    def refresh(self, x):
        steps = np.maximum(self.jac_step, self.jac_step * np.abs(x))
        self.J = jacobian_fd(self.fun, x, steps)
        self.lu = None

    def _factor(self, h):
        if self.lu is None or h != self.h:
            self.h = h
            self.lu = sla.lu_factor(np.eye(len(self.J)) - 0.5 * h * self.J, check_finite=False)

    def step(self, x, fx, h, pred):
        """Return (x_new, f(x_new)) or None when the corrector does not converge."""
        self._factor(h)
        z = pred
        scale = 1.0 + np.abs(x)
        for _ in range(self.max_iter):
            fz = self.fun(z)
            res = z - x - 0.5 * h * (fx + fz)
            dz = -sla.lu_solve(self.lu, res, check_finite=False)
            if not np.all(np.isfinite(dz)):
                return None
            z = z + dz
            if np.max(np.abs(dz) / scale) <= self.tol:
                # first-order update instead of a fresh evaluation at z
                return z, fz + self.J @ dz
        return None


def simulate(sys: DynamicSystem, scenario: Scenario, op=None, newton_tol: float = 1e-11,
             max_iter: int = 8, min_step: float | None = None, jac_step: float = 1e-6) -> Trace:
    """Integrate ``sys`` through ``scenario`` and sample the requested channels.

    The initial state is ``scenario.x0``, else ``op.x``. Inputs start from
    ``scenario.u0``, else ``op.u``, else ``sys.u0``. Every event is hit
    exactly by the step grid. Samples are taken on a uniform grid of
    ``sample_dt`` (default ``max_step``) using cubic Hermite dense output.
    """
    if scenario.x0 is not None:
        x = np.array(scenario.x0, float)
    elif op is not None:
        x = np.array(op.x, float)
    else:
        raise ValueError("simulate needs an initial state (scenario.x0 or op)")
    if not np.all(np.isfinite(x)):
        raise ValueError("initial state is not finite")
    if scenario.u0 is not None:
        u = np.array(scenario.u0, float)
    elif op is not None:
        u = np.array(op.u, float)
    else:
        u = np.array(sys.u0, float)
    H = scenario.max_step
    h_floor = min_step if min_step is not None else H / 1024.0
    plan = _resolve_channels(sys, scenario.channels or [str(s) for s in sys.state_labels])

    ts, xs, fs, us = [0.0], [x.copy()], [], []
    u_cur = u.copy()

    def fun(z):
        return sys.f(z, u_cur)

    fx = fun(x)
    fs.append(fx)
    us.append(u_cur.copy())
    stepper = _Stepper(fun, x, newton_tol, max_iter, jac_step)

    bounds = [e.time for e in scenario.events] + [scenario.t_end]
    t = 0.0
    ev_iter = iter(scenario.events)
    pending = next(ev_iter, None)
    f_prev = None
    for seg_end in bounds:
        while pending is not None and pending.time <= t + 1e-15:
            k = sys.input_index(pending.target)
            u_cur[k] = u_cur[k] + pending.value if pending.relative else pending.value
            fx = fun(x)
            f_prev = None
            # input jump: duplicate the sample so the dense output stays piecewise
            ts.append(t)
            xs.append(x.copy())
            fs.append(fx)
            us.append(u_cur.copy())
            pending = next(ev_iter, None)
        span = seg_end - t
        if span <= 1e-15:
            continue
        n = max(1, math.ceil(span / H - 1e-9))
        h = span / n
        for i in range(n):
            t_target = t + h if i < n - 1 else seg_end
            sub = t_target - t
            while t < t_target - 1e-15:
                hh = min(sub, t_target - t)
                pred = x + hh * fx if f_prev is None else x + 0.5 * hh * (3 * fx - f_prev)
                out = stepper.step(x, fx, hh, pred)
                if out is None:
                    stepper.refresh(x)
                    out = stepper.step(x, fx, hh, x + hh * fx)
                if out is None:
                    sub = hh / 2
                    f_prev = None
                    if sub < h_floor:
                        raise SimulationError(
                            f"Newton corrector failed at t = {t:.9g} s with step {hh:.3e} s "
                            f"(floor {h_floor:.3e} s)", t)
                    continue
                x_new, f_new = out
                if not np.all(np.isfinite(x_new)):
                    raise SimulationError(f"non-finite state at t = {t + hh:.9g} s", t + hh)
                f_prev = fx if abs(hh - h) < 1e-15 else None
                x, fx = x_new, f_new
                t = t + hh
                ts.append(t)
                xs.append(x.copy())
                fs.append(fx)
                us.append(u_cur.copy())
            t = t_target
    return _sample(sys, plan, np.array(ts), np.array(xs), np.array(fs), np.array(us),
                   scenario.sample_dt or H, scenario.t_end)


def _sample(sys, plan, ts, xs, fs, us, dt, t_end):
    n = int(round(t_end / dt))
    grid = np.linspace(0.0, n * dt, n + 1)
    grid = grid[grid <= t_end + 1e-12]
    X = np.empty((len(grid), xs.shape[1]))
    U = np.empty((len(grid), us.shape[1]))
    # split at duplicated times (input jumps) and interpolate piecewise
    cuts = [0] + [i for i in range(1, len(ts)) if ts[i] == ts[i - 1]] + [len(ts)]
    for a, b in zip(cuts[:-1], cuts[1:]):
        seg_t = ts[a:b]
        lo, hi = seg_t[0], seg_t[-1]
        last = b == len(ts)
        m = (grid >= lo) & ((grid < hi) if not last else (grid <= hi + 1e-12))
        if not m.any():
            continue
        if len(seg_t) == 1:
            X[m] = xs[a]
        else:
            X[m] = CubicHermiteSpline(seg_t, xs[a:b], fs[a:b], axis=0)(np.clip(grid[m], lo, hi))
        U[m] = us[a]
    data = {}
    need_y = any(kind == "y" for _, kind, _ in plan)
    Y = np.array([sys.outputs(X[i], U[i]) for i in range(len(grid))]) if need_y else None
    for name, kind, idx in plan:
        src = X if kind == "x" else (Y if kind == "y" else U)
        data[name] = src[:, idx].copy()
    return Trace(grid, data, {"steps": len(ts) - 1})


# ------------------------------------------------------------ mode estimation

@dataclass(frozen=True)
class ModeEstimate:
    freq_hz: float
    damping: float
    amplitude: float
    sigma: float = float("nan")
    omega: float = float("nan")
    phase: float = float("nan")
    rms_residual: float = float("nan")

    def __iter__(self):
        return iter((self.freq_hz, self.damping, self.amplitude))


def _basis(t, sigma, omega, trend):
    e = np.exp(sigma * t)
    cols = [t ** k for k in range(trend + 1)] if trend >= 0 else []
    cols += [e * np.cos(omega * t), e * np.sin(omega * t)]
    return np.column_stack(cols)


def _spectral_peak(t, y, f_min=0.0):
    dt = t[1] - t[0]
    w = np.hanning(len(y))
    nfft = 1 << int(math.ceil(math.log2(len(y) * 8)))
    spec = np.abs(np.fft.rfft(y * w, nfft))
    freqs = np.fft.rfftfreq(nfft, dt)
    lo = max(1, int(math.ceil(nfft * dt * 1.5 / (t[-1] - t[0]))))  # skip the DC lobe
    lo = max(lo, int(math.ceil(nfft * dt * f_min)))
    if lo >= len(spec) - 1:
        return None, 0.0, 0.0
    k = lo + int(np.argmax(spec[lo:]))
    peak_amp = 2 * spec[k] / w.sum()
    floor = float(np.median(spec[lo:])) * 2 / w.sum()
    return freqs[k], peak_amp, floor


def estimate_mode_from_trace(trace, channel: str | None = None, window=None, trend: int = 1,
                             min_cycles: float = 5.0, snr: float = 5.0) -> ModeEstimate:
    """Fit ``poly(t) + A exp(sigma t) cos(omega t + phi)`` to one channel.

    ``trace`` is a :class:`Trace` (``channel`` names the column) or a pair
    ``(t, y)``. ``trend`` is the polynomial degree of the detrending part
    (-1 for none). The nonlinear search over (sigma, omega) is seeded at
    the largest spectral peak; the polynomial and cosine amplitudes are
    solved linearly at each iterate.
    """
    if isinstance(trace, Trace):
        t, y = trace.t, trace[channel]
    else:
        t, y = (np.asarray(a, float) for a in trace)
    if window is not None:
        m = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
        t, y = t[m], y[m]
    if len(t) < 8:
        raise NoOscillationError("too few samples in the fit window")
    t0 = t[0]
    tt = t - t0
    # linear detrend only for the spectral seed
    yd = y - np.polyval(np.polyfit(tt, y, min(max(trend, 0), 2)), tt) if trend >= 0 else y
    scale = max(float(np.max(np.abs(y))), 1e-300)

    def weak(f0, peak, floor):
        return f0 is None or peak <= 1e-9 * scale or peak <= 1e-13 or peak < snr * floor

    # slower components cannot be resolved in the window and are left to the trend
    f0, peak, floor = _spectral_peak(tt, yd, min_cycles / tt[-1])
    if weak(f0, peak, floor):
        f0, peak, floor = _spectral_peak(tt, yd)
    if weak(f0, peak, floor):
        raise NoOscillationError("no oscillation detected")
    if f0 * tt[-1] < min_cycles:
        warnings.warn(f"fit window holds only {f0 * tt[-1]:.1f} cycles of {f0:.4g} Hz", RuntimeWarning,
                      stacklevel=2)
    tn = tt / tt[-1]  # normalised time keeps the polynomial columns well scaled

    def fit(p):
        sigma, omega = p
        Bm = _basis(tn, sigma * tt[-1], omega * tt[-1], trend)
        coef, *_ = np.linalg.lstsq(Bm, y, rcond=None)
        return coef, Bm @ coef - y

    best = None
    w0 = 2 * math.pi * f0
    for z0 in (0.01, 0.05, 0.15, 0.3, 0.5):
        s0 = -z0 * w0 / math.sqrt(1 - z0 * z0)
        sol = least_squares(lambda p: fit(p)[1], [s0, w0], x_scale=[w0, w0], method="lm",
                            xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
        if best is None or sol.cost < best.cost:
            best = sol
    sigma, omega = best.x
    omega = abs(omega)
    if omega * tt[-1] < 2 * math.pi:
        raise NoOscillationError(f"fit converged to a non-oscillatory component ({omega / (2 * math.pi):.3g} Hz)")
    coef, r = fit((sigma, omega))
    a, b = coef[-2], coef[-1]
    amp = math.hypot(a, b)  # at the window start
    phase = math.atan2(-b, a)
    mag = math.hypot(sigma, omega)
    return ModeEstimate(omega / (2 * math.pi), -sigma / mag if mag else 1.0, amp, sigma, omega, phase,
                        float(np.sqrt(np.mean(r ** 2))))


def oscillatory_component(t, y, degree: int = 2) -> np.ndarray:
    """Signal minus its least-squares polynomial trend."""
    t = np.asarray(t, float)
    tn = (t - t[0]) / max(t[-1] - t[0], 1e-300)
    return np.asarray(y, float) - np.polyval(np.polyfit(tn, y, degree), tn)


def correlation(a, b) -> float:
    a = np.asarray(a, float) - np.mean(a)
    b = np.asarray(b, float) - np.mean(b)
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else 0.0


def mode_excitation(op, mode, amplitude: float = 1e-3, angle: float = 0.0) -> np.ndarray:
    """Initial state ``x* + a Re(phi e^{j angle}) / max|phi|`` that excites one mode."""
    phi = np.asarray(mode.phi) * np.exp(1j * angle)
    return np.asarray(op.x, float) + amplitude * phi.real / np.max(np.abs(phi))


def rank_ringdown_channels(lin, lam: complex, du, starts, span: float, channels=None,
                           trend: int = 2, samples: int = 400):
    """Rank (channel, window start) pairs for fitting the mode at ``lam`` in
    the response to an input step ``du``.

    For every channel the linear step response is split into the target
    mode's term and everything else; the score is the rms of the other
    terms left after removing a degree-``trend`` polynomial, divided by the
    rms of the target term. Lower is cleaner. Returns ``[(score, start, channel)]``.
    """
    lamv, V = np.linalg.eig(lin.A)
    W = np.linalg.inv(V)
    drive = W @ (lin.B @ np.asarray(du, float))
    names = [str(s) for s in lin.state_labels] + list(lin.output_labels)
    rows = np.vstack([np.eye(lin.n)] + ([lin.C] if lin.C is not None else []))
    keep = range(len(names)) if channels is None else [names.index(c) for c in channels]
    live = np.abs(lamv) > 1e-9
    tgt = np.isclose(lamv, lam, rtol=1e-6) | np.isclose(lamv, np.conj(lam), rtol=1e-6)
    out = []
    for t0 in starts:
        tt = np.linspace(t0, t0 + span, samples)
        tn = (tt - t0) / span
        E = np.exp(np.outer(lamv[live], tt))
        for ci in keep:
            g = (rows[ci] @ V)[live] * drive[live] / lamv[live]
            terms = (g[:, None] * E).real
            y_t = terms[tgt[live]].sum(axis=0)
            y_o = terms[~tgt[live]].sum(axis=0)
            y_o = y_o - np.polyval(np.polyfit(tn, y_o, trend), tn)
            den = np.std(y_t)
            if den > 0:
                out.append((float(np.std(y_o) / den), float(t0), names[ci]))
    out.sort()
    return out


@dataclass
class RingdownCheck:
    lam: complex
    channel: str
    window: tuple
    estimate: ModeEstimate
    trace: Trace
    score: float
    lam_final: complex | None = None  # same mode at the post-step equilibrium

    @staticmethod
    def _fz(lam):
        return abs(lam.imag) / (2 * math.pi), -lam.real / abs(lam)

    @property
    def predicted(self) -> tuple[float, float]:
        return self._fz(self.lam)

    def errors(self, final: bool = False) -> tuple[float, float]:
        """Relative (frequency, damping) errors of the fit against the
        eigenvalue before the step, or after it with ``final``."""
        lam = self.lam_final if final else self.lam
        f, z = self._fz(lam)
        return abs(self.estimate.freq_hz / f - 1), abs(self.estimate.damping / z - 1)


def step_ringdown(sys: DynamicSystem, op, target: str = "P_inv", amount: float = 0.05, lam=None,
                  cycles: float = 5.5, min_freq_hz: float = 100.0, trend: int = 2,
                  max_step: float = 1e-5) -> RingdownCheck:
    """Step an input, then fit the ringdown of one mode in the cleanest channel.

    Without ``lam`` the least-damped coupling mode above ``min_freq_hz`` is
    used. The channel and window start are chosen by
    :func:`rank_ringdown_channels`; the fit itself only sees the simulated
    samples.
    """
    from .equilibrium import solve_operating_point
    from .linearization import linearize
    from .modal import eigen_decompose, mode_reports

    lin = linearize(sys, op, richardson=False)
    reps = mode_reports(lin, shapes=False)
    if lam is None:
        cands = [r for r in reps if r.coupling_class == "coupling" and r.mode.freq_hz >= min_freq_hz]
        if not cands:
            raise NoOscillationError(f"no coupling mode above {min_freq_hz} Hz")
        lam = min(cands, key=lambda r: r.mode.damping).mode.lam
    lam_final = None
    if target in ("P_inv", "P_sm", "vg_ref"):
        u1 = np.array(op.u, float)
        u1[sys.input_index(target)] += amount
        op1 = solve_operating_point(sys, **{target: u1[sys.input_index(target)]}, x0=op.x)
        modes1 = eigen_decompose(linearize(sys, op1, richardson=False, outputs=False))
        lam_final = min(modes1, key=lambda m: abs(m.lam - lam)).lam
    f0 = abs(lam.imag) / (2 * math.pi)
    du = np.zeros(len(sys.input_labels))
    du[sys.input_index(target)] = amount
    span = cycles / f0
    starts = [k / (2 * f0) for k in range(2, 11)]
    score, t0, channel = rank_ringdown_channels(lin, lam, du, starts, span, trend=trend)[0]
    scen = Scenario(t0 + span, (Event(0.0, target, amount, relative=True),), max_step, (channel,))
    tr = simulate(sys, scen, op)
    est = estimate_mode_from_trace(tr, channel, (t0, t0 + span), trend=trend)
    return RingdownCheck(complex(lam), channel, (t0, t0 + span), est, tr, score, lam_final)
