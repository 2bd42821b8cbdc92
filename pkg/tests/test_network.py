import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coupling_modes import assemble_benchmark, nominal_config, solve_operating_point
from coupling_modes import components as cm
from coupling_modes.config import config_from_dict, config_to_dict, get_param, load_config, with_param
from coupling_modes.linearization import linearize
from coupling_modes.modal import eigen_decompose, participation_factors
from coupling_modes.network import (
    BRANCH_NODES,
    ComplexImpedance,
    NetworkError,
    StarTriple,
    TriangleTriple,
    branch_impedances,
    impedance_from_length,
    star_to_triangle,
    triangle_config,
    triangle_to_star,
)
from coupling_modes.params import ParameterError, PerUnitBase


def star(*zs, unit="pu"):
    return StarTriple(*(ComplexImpedance.from_complex(complex(z), unit) for z in zs))


def tri(*zs, unit="pu"):
    return TriangleTriple(*(ComplexImpedance.from_complex(complex(z), unit) for z in zs))


def values(t):
    return [z.z for z in (t.z1p, t.z2p, t.z3p)] if isinstance(t, TriangleTriple) else [t.z1.z, t.z2.z, t.zcc.z]


def external_admittance(branches, nodes, internal=()):
    """Nodal admittance seen at ``nodes`` after eliminating ``internal`` ones."""
    allnodes = list(nodes) + list(internal)
    idx = {n: i for i, n in enumerate(allnodes)}
    Y = np.zeros((len(allnodes), len(allnodes)), complex)
    for (a, b), z in branches:
        y = 1.0 / z
        Y[idx[a], idx[a]] += y
        Y[idx[b], idx[b]] += y
        Y[idx[a], idx[b]] -= y
        Y[idx[b], idx[a]] -= y
    k = len(nodes)
    if not internal:
        return Y
    return Y[:k, :k] - Y[:k, k:] @ np.linalg.solve(Y[k:, k:], Y[k:, :k])


def test_symmetric_star_to_triangle():
    assert values(star_to_triangle(star(1, 1, 1))) == [3, 3, 3]
    assert values(triangle_to_star(tri(3, 3, 3))) == [1, 1, 1]


def test_asymmetric_conversion_and_inverse():
    t = star_to_triangle(star(2, 1, 1))
    assert values(t) == pytest.approx([5, 2.5, 5], rel=1e-15)
    assert values(triangle_to_star(tri(5, 2.5, 5))) == pytest.approx([2, 1, 1], rel=1e-15)


def test_conversion_preserves_external_admittance():
    s = star(2 + 0.3j, 1 + 1j, 1 + 0.5j)
    t = star_to_triangle(s)
    ys = external_admittance([(BRANCH_NODES[n], getattr(s, n).z) for n in ("z1", "z2", "zcc")],
                             ("inv", "sm", "grid"), ("n",))
    yt = external_admittance([(BRANCH_NODES[n], getattr(t, n).z) for n in ("z1p", "z2p", "z3p")],
                             ("inv", "sm", "grid"))
    assert np.allclose(ys, yt, rtol=1e-12, atol=1e-14)


def test_reactive_closure():
    t = star_to_triangle(star(0.5j, 0.2j, 1.3j))
    assert all(z.real == pytest.approx(0.0, abs=1e-15) and z.imag > 0 for z in values(t))


def test_conversion_rejections():
    with pytest.raises(ValueError):
        star_to_triangle(star(0, 1, 1))
    with pytest.raises(ValueError):
        triangle_to_star(tri(1j, -1j, 0))
    mixed = StarTriple(ComplexImpedance(1, 1, "pu"), ComplexImpedance(1, 1, "physical"), ComplexImpedance(1, 1))
    with pytest.raises(ValueError):
        star_to_triangle(mixed)


component = st.floats(0.01, 100.0)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(component, component), min_size=3, max_size=3))
def test_round_trip_identity(parts):
    zs = [complex(r, x) for r, x in parts]
    back = values(triangle_to_star(star_to_triangle(star(*zs))))
    for a, b in zip(zs, back):
        assert abs(a - b) <= 1e-12 * abs(a)


def test_impedance_from_length_physical():
    base = PerUnitBase(s_base=(500e3) ** 2)  # unit impedance base
    per_km = ComplexImpedance(0.05, 0.05 * 1.04, "physical")
    z = impedance_from_length(20.0, per_km, base)
    assert base.z_base == 1.0
    assert z.r == pytest.approx(1.0, rel=1e-15)
    assert z.x == pytest.approx(1.04, rel=1e-15)
    z2 = impedance_from_length(40.0, per_km, base)
    assert z2.r == 2 * z.r and z2.x == 2 * z.x
    with pytest.raises(ValueError):
        impedance_from_length(0.0, per_km, base)


def test_nominal_branch_impedances():
    cfg = nominal_config()
    z = branch_impedances(cfg)
    zb = cfg.base.z_base
    assert z["zcc"].r * zb == pytest.approx(20 * 0.05)
    assert z["z1"].x / z["z1"].r == pytest.approx(1.04)


def test_nominal_state_layout(nominal_sys):
    labels = [str(s) for s in nominal_sys.state_labels]
    # SM 7 + AVR 1 + gov/turbine 2 + GFL 8 + PLL 2 + droop 1 + grid 2, plus one independent
    # branch current: the other two follow from current balance at the machine and star nodes
    assert nominal_sys.n == 7 + 1 + 2 + 8 + 2 + 1 + 2 + 2 == 25
    assert len(set(labels)) == len(labels)
    for name in ("gfl.gamma_currd", "gfl.gamma_currq", "gfl.vsdfilt", "gfl.vsqfilt", "sm.psi_d", "sm.psi_q"):
        assert name in labels
    assert {nominal_sys.group_of(i) for i in range(nominal_sys.n)} == {"SM", "inverter", "grid"}


def test_setpoint_lag_adds_one_state():
    sys = assemble_benchmark(nominal_config(**{"gfl.tau_p": 0.01}))
    assert sys.n == 26


def test_zero_impedance_branch_named():
    cfg = replace(nominal_config(), impedances={"zcc": (0.0, 0.0)})
    with pytest.raises(NetworkError, match="zcc"):
        assemble_benchmark(cfg)


def test_algebraic_residual_vanishes(nominal_sys, nominal_op):
    assert np.max(np.abs(nominal_sys.g(nominal_op.x, nominal_op.u))) < 1e-12


def test_star_and_triangle_spectra():
    """Same external network in both forms; the triangle loop adds one pure RL circulating pair."""
    cfg = nominal_config()
    eigs = []
    for c in (cfg, triangle_config(cfg)):
        sys = assemble_benchmark(c)
        eigs.append(np.linalg.eigvals(linearize(sys, solve_operating_point(sys)).A))
    s, t = eigs
    assert len(t) == len(s) + 2
    rest = list(t)
    for lam in s:
        k = int(np.argmin(np.abs(np.array(rest) - lam)))
        assert abs(rest[k] - lam) <= 1e-8 * max(abs(lam), 1.0)
        rest.pop(k)
    wb = cfg.base.omega_b
    ratio = cfg.line_data.x_over_r
    assert sorted(rest, key=lambda z: z.imag) == pytest.approx([complex(-wb / ratio, -wb),
                                                                complex(-wb / ratio, wb)], rel=1e-6)


def _two_reactance_ks(cfg, op):
    """Synchronizing torque coefficient of a field-flux-constant machine
    (d axis behind Xd', q axis behind Xq) on the static network."""
    c = cm.sm_circuit(cfg.sm, cfg.base.omega_b)
    theta0, psi_fd = op.x[0], op.x[4]
    e = c.Lad * psi_fd / (c.Lad + c.Lfd)
    xdp = c.Ll + c.Lad * c.Lfd / (c.Lad + c.Lfd)
    z = branch_impedances(cfg)
    ze = z["z2"].z + z["zcc"].z
    ra, xq, v = c.Ra, cfg.sm.Xq, cfg.grid.V

    def torque(theta):
        rot = np.exp(1j * theta)

        def mismatch(i_d, i_q):
            vd = -ra * i_d + xq * i_q
            vq = -ra * i_q + e - xdp * i_d
            return (complex(vd, vq) - ze * complex(i_d, i_q)) * rot - v

        r0 = mismatch(0.0, 0.0)
        cols = [mismatch(1.0, 0.0) - r0, mismatch(0.0, 1.0) - r0]
        M = np.array([[cols[0].real, cols[1].real], [cols[0].imag, cols[1].imag]])
        i_d, i_q = np.linalg.solve(M, [-r0.real, -r0.imag])
        return (e - xdp * i_d) * i_q + xq * i_q * i_d

    h = 1e-6
    return (torque(theta0 + h) - torque(theta0 - h)) / (2 * h), torque(theta0)


def _em_mode(cfg, p_sm):
    sys = assemble_benchmark(cfg)
    op = solve_operating_point(sys, P_sm=p_sm)
    lin = linearize(sys, op)
    modes = eigen_decompose(lin)
    P = participation_factors(modes)
    k = [str(s) for s in lin.state_labels].index("sm.theta_sm")
    best = max((m for m in modes if 0.5 < m.freq_hz < 20), key=lambda m: P[m.index, k])
    return best, op


@pytest.mark.parametrize("p_sm", [0.2, 0.5])
def test_machine_only_electromechanical_mode(p_sm):
    base = nominal_config()
    # slow voltage filter and field: the machine behaves like a classical two-axis source
    cfg = replace(base, include_inverter=False, P_sm=p_sm, avr=replace(base.avr, Te=100.0),
                  sm=replace(base.sm, Td0_p=100.0))
    mode, op = _em_mode(cfg, p_sm)
    ks, te = _two_reactance_ks(cfg, op)
    assert te == pytest.approx(p_sm, rel=1e-6)
    wb = cfg.base.omega_b
    f_two_mass = math.sqrt(wb * ks * (1 / (2 * cfg.sm.H) + 1 / (2 * cfg.grid.He))) / (2 * math.pi)
    assert mode.freq_hz == pytest.approx(f_two_mass, rel=0.10)


def test_machine_against_stiff_source():
    base = nominal_config()
    cfg = replace(base, include_inverter=False, P_sm=0.2, avr=replace(base.avr, Te=100.0),
                  sm=replace(base.sm, Td0_p=100.0), grid=replace(base.grid, He=1e6))
    mode, op = _em_mode(cfg, 0.2)
    ks, _ = _two_reactance_ks(cfg, op)
    f_smib = math.sqrt(cfg.base.omega_b * ks / (2 * cfg.sm.H)) / (2 * math.pi)
    assert mode.freq_hz == pytest.approx(f_smib, rel=0.10)


def test_config_round_trip(tmp_path):
    cfg = nominal_config()
    assert config_from_dict(config_to_dict(cfg)) == cfg
    path = tmp_path / "c.json"
    from coupling_modes.config import save_config
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_reference_parameters_in_nominal_config():
    cfg = nominal_config()
    assert (cfg.sm.H, cfg.grid.He, cfg.gfl.Ki, cfg.gfl.Ki_pll, cfg.gfl.Rp, cfg.gov.Rg) == (
        1.438, 1.438, 650.0, 9.82, 0.04, 0.02)
    assert cfg.line_data.r_per_km == 0.05 and cfg.line_data.x_over_r == 1.04


def test_with_param_paths():
    cfg = nominal_config()
    assert get_param(with_param(cfg, "lines.lcc_km", 5), "lines.lcc") == 5.0
    assert get_param(with_param(cfg, "gfl.Ki", 210), "gfl.Ki") == 210.0
    assert with_param(cfg, "setpoints.P_inv", 0.7).P_inv == 0.7
    for bad in ("gfl.nope", "nothing", "foo.bar", "setpoints.V"):
        with pytest.raises(ParameterError):
            with_param(cfg, bad, 1.0)
    with pytest.raises(ParameterError):
        with_param(cfg, "lines.lcc", -1.0)


def test_unknown_config_key_rejected():
    data = config_to_dict(nominal_config())
    data["bogus"] = 1
    with pytest.raises(ParameterError, match="bogus"):
        config_from_dict(data)
