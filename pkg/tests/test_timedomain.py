import csv
import math

import numpy as np
import pytest
import scipy.linalg as sla

from coupling_modes.modal import eigen_decompose
from coupling_modes.timedomain import (
    Event,
    NoOscillationError,
    Scenario,
    channel_magnitude,
    correlation,
    estimate_mode_from_trace,
    mode_excitation,
    oscillatory_component,
    simulate,
)


def test_equilibrium_stays_put(nominal_sys, nominal_op):
    tr = simulate(nominal_sys, Scenario(0.02, max_step=1e-4), nominal_op)
    drift = max(np.max(np.abs(tr[c] - tr[c][0])) for c in tr.channels)
    assert drift < 1e-9


def test_exponential_decay(make_system):
    sys = make_system(["x"], lambda x, u: -100.0 * x)
    tr = simulate(sys, Scenario(0.1, max_step=1e-5, x0=np.array([1.0])))
    assert np.max(np.abs(tr["x"] - np.exp(-100.0 * tr.t))) < 1e-6


def _oscillator_error(sys, h):
    tr = simulate(sys, Scenario(0.05, max_step=h, sample_dt=1e-3, x0=np.array([1.0, 0.0])))
    w = 2 * math.pi * 100
    exact = np.exp(-20 * tr.t) * np.cos(w * tr.t)
    return np.max(np.abs(tr["a"] - exact))


def test_second_order_convergence(make_system):
    w = 2 * math.pi * 100
    A = np.array([[-20.0, -w], [w, -20.0]])
    sys = make_system(["a", "b"], lambda x, u: A @ x)
    e1 = _oscillator_error(sys, 1e-4)
    e2 = _oscillator_error(sys, 5e-5)
    assert e1 / e2 == pytest.approx(4.0, rel=0.05)


def test_input_step_event(make_system):
    sys = make_system(["x"], lambda x, u: -x + u, ["u"], [0.0])
    scen = Scenario(3.0, (Event(1.0, "u", 1.0),), max_step=1e-3, x0=np.array([0.0]), channels=("x", "u"))
    tr = simulate(sys, scen)
    expected = np.where(tr.t < 1.0, 0.0, 1.0 - np.exp(-(tr.t - 1.0)))
    assert np.max(np.abs(tr["x"] - expected)) < 1e-6
    assert tr["u"][-1] == 1.0 and tr["u"][0] == 0.0


def test_relative_event_adds(make_system):
    sys = make_system(["x"], lambda x, u: np.zeros(1), ["u"], [0.5])
    scen = Scenario(0.1, (Event(0.05, "u", 0.25, relative=True),), max_step=1e-2,
                    x0=np.zeros(1), channels=("u",))
    assert simulate(sys, scen)["u"][-1] == 0.75


def test_scenario_validation():
    with pytest.raises(ValueError, match="ordered"):
        Scenario(1.0, (Event(0.5, "u", 1.0), Event(0.2, "u", 0.0)))
    with pytest.raises(ValueError):
        Scenario(1.0, (Event(2.0, "u", 1.0),))
    with pytest.raises(ValueError):
        Scenario(0.0)
    s = Scenario.from_dict({"t_end": 0.5, "events": [{"time": 0.1, "target": "P_inv", "value": 0.05}]})
    assert s.events[0] == Event(0.1, "P_inv", 0.05)


def test_needs_initial_state(make_system):
    sys = make_system(["x"], lambda x, u: -x)
    with pytest.raises(ValueError):
        simulate(sys, Scenario(0.1))


def test_unknown_channel(make_system):
    sys = make_system(["x"], lambda x, u: -x)
    with pytest.raises(KeyError, match="nope"):
        simulate(sys, Scenario(0.1, channels=("nope",), x0=np.ones(1)))


def test_trace_csv_and_window(make_system, tmp_path):
    sys = make_system(["x"], lambda x, u: -x)
    tr = simulate(sys, Scenario(0.01, max_step=1e-3, x0=np.ones(1)))
    tr.to_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["t", "x"] and len(rows) == 12
    assert len(tr.window(0.002, 0.004).t) == 3


def test_synthetic_ringdown_fit():
    t = np.arange(0.0, 0.05, 1e-5)
    y = 0.3 + 0.1 * t + np.exp(-50 * t) * np.cos(2 * math.pi * 415 * t + 0.4)
    est = estimate_mode_from_trace((t, y))
    assert est.freq_hz == pytest.approx(415.0, rel=1e-3)
    zeta = 50 / math.hypot(50, 2 * math.pi * 415)
    assert est.damping == pytest.approx(zeta, rel=1e-3)


def test_constant_signal_has_no_oscillation():
    t = np.linspace(0, 0.1, 1000)
    with pytest.raises(NoOscillationError):
        estimate_mode_from_trace((t, np.full_like(t, 2.0)))
    with pytest.raises(NoOscillationError):
        estimate_mode_from_trace((t, 1.0 - np.exp(-30 * t)))


def test_magnitude_examples():
    assert channel_magnitude(3.0, 4.0) == 5.0
    assert np.array_equal(channel_magnitude([-2.0, 1.5], [0.0, 0.0]), [2.0, 1.5])


def test_oscillatory_component_and_correlation():
    t = np.linspace(0, 1, 500)
    s = np.sin(400 * t)
    osc = oscillatory_component(t, 1 + 2 * t - t ** 2 + s)
    assert correlation(osc, s) > 0.999
    assert correlation(s, -s) == pytest.approx(-1.0)
    assert correlation(s, np.ones_like(s)) == 0.0


def test_mode_excitation_amplitude(nominal_op, nominal_lin):
    m = max((m for m in eigen_decompose(nominal_lin) if m.freq_hz > 100), key=lambda m: m.sigma)
    x0 = mode_excitation(nominal_op, m, amplitude=1e-3)
    assert np.max(np.abs(x0 - nominal_op.x)) == pytest.approx(1e-3)


def _step_scenario(h, t_end, channels=()):
    return Scenario(t_end, (Event(0.0, "P_inv", 0.01, relative=True),), max_step=h, channels=channels,
                    sample_dt=1e-3)


def test_linear_regime_agreement(nominal_sys, nominal_op, nominal_lin):
    """Small setpoint step: nonlinear states stay within 5% of the step size of the linear response."""
    du = 0.01 * np.eye(len(nominal_sys.input_labels))[nominal_sys.input_index("P_inv")]
    tr = simulate(nominal_sys, _step_scenario(1e-5, 0.05), nominal_op)
    n = nominal_lin.n
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = nominal_lin.A
    M[:n, n] = nominal_lin.B @ du
    worst = 0.0
    for i, t in enumerate(tr.t):
        dx = sla.expm(M * t)[:n, n]
        x_nl = np.array([tr[str(s)][i] for s in nominal_sys.state_labels])
        worst = max(worst, np.max(np.abs(x_nl - nominal_op.x - dx)))
    assert worst < 0.05 * 0.01


def test_step_halving_on_benchmark(nominal_sys, nominal_op):
    """Second-order end-state convergence; below 1e-8 pu once the step is 5 us."""
    runs = [simulate(nominal_sys, _step_scenario(h, 0.01), nominal_op) for h in (1e-5, 5e-6, 2.5e-6)]
    d1, d2 = (max(abs(a[c][-1] - b[c][-1]) for c in a.channels) for a, b in zip(runs, runs[1:]))
    assert d1 / d2 == pytest.approx(4.0, rel=0.01)
    assert d2 < 1e-8


def test_mode_estimate_round_trip(nominal_reports):
    """A signal built from each lightly damped model mode is recovered within 0.5%."""
    checked = 0
    for r in nominal_reports:
        m = r.mode
        if m.freq_hz < 1.0 or m.damping > 0.5:
            continue
        span = 8.0 / m.freq_hz
        t = np.linspace(0.0, span, 4000)
        y = 0.1 + (0.3 * np.exp(0.7j) * np.exp(m.lam * t)).real
        est = estimate_mode_from_trace((t, y), trend=0)
        assert est.freq_hz == pytest.approx(m.freq_hz, rel=5e-3)
        assert est.damping == pytest.approx(m.damping, rel=5e-3)
        checked += 1
    assert checked >= 4
