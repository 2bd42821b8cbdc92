"""Acceptance criteria 1-12, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v`` (lines go to the terminal even
when output is captured) or directly with ``python3 tests/test_acceptance.py``.
"""

import math
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest

from coupling_modes import assemble_benchmark, nominal_config, solve_operating_point
from coupling_modes.equilibrium import OperatingPoint
from coupling_modes.linearization import config_factory, linearize, parameter_jacobian
from coupling_modes.modal import (
    Sensitivity,
    eigen_decompose,
    eigenvalue_sensitivity,
    mode_frequency_damping,
    mode_reports,
    participation_factors,
)
from coupling_modes.network import (
    ComplexImpedance,
    DynamicSystem,
    StarTriple,
    TriangleTriple,
    star_to_triangle,
    triangle_config,
    triangle_to_star,
)
from coupling_modes.reduction import (
    GeneratorRecord,
    ShortCircuitMeasurement,
    aggregate_inertia,
    impedance_from_short_circuit,
    reduce_to_benchmark,
    synthesize_measurement,
)
from coupling_modes.sweeps import SweepSpec, context_overrides, run_sweep
from coupling_modes.timedomain import (
    Scenario,
    correlation,
    mode_excitation,
    oscillatory_component,
    simulate,
    step_ringdown,
)


class Check:
    def __init__(self):
        self.ok = True
        self.notes = []

    def __call__(self, cond, note):
        cond = bool(cond)
        self.ok &= cond
        self.notes.append(("" if cond else "!") + note)
        return cond


@contextmanager
def criterion(n, title, limit_s, capsys=None):
    chk = Check()
    t0 = time.perf_counter()
    error = None
    try:
        yield chk
    except Exception as exc:  # reported as FAIL below, then re-raised
        error = exc
        chk.ok = False
        chk.notes.append(f"!{type(exc).__name__}: {exc}")
    dt = time.perf_counter() - t0
    chk(dt < limit_s, f"runtime {dt:.2f} s < {limit_s:g} s")
    line = f"{'PASS' if chk.ok else 'FAIL'} C{n:<2d} {title}: " + "; ".join(chk.notes)
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)
    if error is not None:
        raise error
    assert chk.ok, line


def test_c01_frequency_damping_formulas(capsys):
    with criterion(1, "reference mode rows 3-5 from eigenvalues", 1.0, capsys) as c:
        rows = [(complex(-1433, 99), 16, 99), (complex(-1345, 3927), 625, 32), (complex(-1712, 3462), 551, 44)]
        for lam, f_pub, z_pub in rows:
            f, z = mode_frequency_damping(lam)
            c(round(f) == f_pub and math.floor(100 * z) == z_pub, f"{lam}: {f:.2f} Hz {100 * z:.2f} %")
        for lam, z_pub in ((complex(-3082, 1395), 26), (complex(-632.57, 1450), 44)):
            z = mode_frequency_damping(lam)[1]
            c(abs(100 * z - z_pub) > 3, f"discrepancy flagged {lam}: {100 * z:.1f} % vs {z_pub} %")


def test_c02_star_triangle_round_trip(capsys):
    with criterion(2, "star/triangle round trip", 1.0, capsys) as c:
        rng = np.random.default_rng(20240)
        worst = 0.0
        for _ in range(1000):
            zs = rng.uniform(0.01, 100.0, 3) + 1j * rng.uniform(0.01, 100.0, 3)
            s = StarTriple(*(ComplexImpedance.from_complex(z) for z in zs))
            t = triangle_to_star(star_to_triangle(s))
            back = np.array([t.z1.z, t.z2.z, t.zcc.z])
            worst = max(worst, float(np.max(np.abs(back - zs) / np.abs(zs))))
        c(worst < 1e-12, f"max relative error {worst:.1e}")
        one = star_to_triangle(StarTriple(*(ComplexImpedance.from_complex(1.0) for _ in range(3))))
        c([v.z for v in (one.z1p, one.z2p, one.z3p)] == [3, 3, 3], "(1,1,1) -> (3,3,3) exact")
        back = triangle_to_star(TriangleTriple(*(ComplexImpedance.from_complex(3.0) for _ in range(3))))
        c([v.z for v in (back.z1, back.z2, back.zcc)] == [1, 1, 1], "(3,3,3) -> (1,1,1) exact")
        # complex Z: 3 Z^2 / Z is exact up to the last bits of complex rounding
        worst = 0.0
        for z in rng.uniform(0.01, 100.0, 50) + 1j * rng.uniform(0.01, 100.0, 50):
            tri = star_to_triangle(StarTriple(*(ComplexImpedance.from_complex(z) for _ in range(3))))
            worst = max(worst, max(abs(v.z - 3 * z) / abs(3 * z) for v in (tri.z1p, tri.z2p, tri.z3p)))
        c(worst < 4 * np.finfo(float).eps, f"(Z,Z,Z) -> (3Z,3Z,3Z) for complex Z within {worst:.1e}")


def test_c03_spectrum_invariance(capsys):
    with criterion(3, "star vs triangle spectrum", 10.0, capsys) as c:
        cfg = nominal_config()
        spectra = []
        for form in (cfg, triangle_config(cfg)):
            sys_ = assemble_benchmark(form)
            spectra.append(np.linalg.eigvals(linearize(sys_, solve_operating_point(sys_)).A))
        star, tri = spectra
        rest = list(tri)
        worst = 0.0
        for lam in star:
            k = int(np.argmin(np.abs(np.array(rest) - lam)))
            worst = max(worst, abs(rest[k] - lam) / max(abs(lam), 1.0))
            rest.pop(k)
        c(worst < 1e-8, f"{len(star)} shared eigenvalues, max relative mismatch {worst:.1e}")
        wb, ratio = cfg.base.omega_b, cfg.line_data.x_over_r
        loop = complex(-wb / ratio, wb)
        c(len(rest) == 2 and all(min(abs(r - loop), abs(r - loop.conjugate())) < 1e-6 * abs(loop) for r in rest),
          f"extra circulating pair {np.round(rest, 2).tolist()}")


def test_c04_linearization_accuracy(capsys):
    with criterion(4, "linearization accuracy", 30.0, capsys) as c:
        sys_ = assemble_benchmark(nominal_config())
        lin = linearize(sys_, solve_operating_point(sys_))
        c(lin.richardson_error < 1e-6, f"nominal Richardson consistency {lin.richardson_error:.1e}")
        A0 = np.array([[-3.0, 2.0, 0.0], [-2.0, -3.0, 1.0], [0.5, 0.0, -40.0]])
        toy = DynamicSystem(("a", "b", "c"), (), lambda x, u: A0 @ x, lambda x, u: np.zeros(0), u0=np.zeros(0))
        op = OperatingPoint(np.array([0.3, -1.2, 2.0]), np.zeros(0), toy.state_labels, (), 0.0)
        err = np.max(np.abs(linearize(toy, op, rel_step=1e-3, min_step=1e-3, outputs=False).A - A0))
        c(err < 1e-10, f"synthetic linear system max error {err:.1e}")


def test_c05_sensitivity_vs_resolve(capsys):
    with criterion(5, "Ki sensitivity vs re-solved eigenvalues", 60.0, capsys) as c:
        cfg = nominal_config()
        fac = config_factory(cfg, "gfl.Ki")
        ki = cfg.gfl.Ki
        sys_ = fac(ki)
        lin = linearize(sys_, solve_operating_point(sys_))
        reports = [r for r in mode_reports(lin) if r.coupling_class == "coupling" and r.mode.freq_hz > 10]
        dp = 1e-3 * ki
        dA = parameter_jacobian(fac, ki, dp)
        shifted = {}
        for step in (dp, dp / 2):
            s = fac(ki + step)
            shifted[step] = np.linalg.eigvals(linearize(s, solve_operating_point(s), outputs=False).A)
        worst, ratios = 0.0, []
        for r in reports:
            S = eigenvalue_sensitivity(lin, dA, r.mode)
            res = []
            for step, lam in shifted.items():
                d = lam[np.argmin(np.abs(lam - r.mode.lam))] - r.mode.lam
                res.append(abs(d - S * step))
                if step == dp:
                    worst = max(worst, res[-1] / abs(S * step))
            ratios.append(res[0] / res[1])
        c(worst < 1e-3, f"{len(reports)} coupling modes, max relative error {worst:.1e} at dp = 0.1 % Ki")
        c(all(3.0 < q < 5.0 for q in ratios), "residual ratio dp vs dp/2: " + ", ".join(f"{q:.2f}" for q in ratios))


def test_c06_quadrant_classification(capsys):
    with criterion(6, "sensitivity quadrant rule", 1.0, capsys) as c:
        for S, quad, angle, effect in ((complex(-0.07, 0.29), "II", 104, "destabilizing"),
                                       (complex(0.14, 0.2), "I", 55, "stabilizing")):
            s = Sensitivity("gfl.Ki", S)
            c(s.quadrant == quad and round(s.angle_deg) == angle and s.effect == effect,
              f"{S} -> quadrant {s.quadrant}, {s.angle_deg:.0f} deg, {s.effect}")


def test_c07_modal_vs_time_domain(capsys):
    with criterion(7, "step ringdown vs eigenvalue", 120.0, capsys) as c:
        sys_ = assemble_benchmark(nominal_config())
        op = solve_operating_point(sys_)
        chk = step_ringdown(sys_, op, "P_inv", 0.05)
        f_pred, z_pred = chk.predicted
        ef, ez = chk.errors()
        c(ef < 0.05 and ez < 0.05,
          f"{chk.channel} fit {chk.estimate.freq_hz:.1f} Hz / {100 * chk.estimate.damping:.2f} % vs "
          f"{f_pred:.1f} Hz / {100 * z_pred:.2f} % (errors {100 * ef:.2f} %, {100 * ez:.2f} %)")
        ef1, ez1 = chk.errors(final=True)
        c(ef1 < 0.05 and ez1 < 0.05, f"vs post-step eigenvalue: errors {100 * ef1:.2f} %, {100 * ez1:.2f} %")


def test_c08_coupling_strength_trend(capsys):
    with criterion(8, "SM flux participation vs lcc", 120.0, capsys) as c:
        spec = SweepSpec("lines.lcc", (1.0, 5.0, 10.0, 15.0, 20.0), context_overrides("op1")["op1"])
        res = run_sweep(nominal_config(), spec)
        c(not res.failures, "all grid points solved")
        trajs = res.coupling_trajectories(min_freq_hz=10.0)
        c(len(trajs) >= 4, f"{len(trajs)} tracked coupling modes")
        for t in trajs:
            flux = t.flux(res)
            mono = bool(np.all(np.diff(flux) >= -1e-12))
            near_zero = flux[0] <= 0.05 * flux[-1]
            c(mono and near_zero, f"{t.freq(res)[-1]:.0f} Hz: " + "/".join(f"{100 * v:.3f}" for v in flux) + " %")


def test_c09_phase_opposition(capsys):
    with criterion(9, "I_s and I_g2 against I_L2", 120.0, capsys) as c:
        sys_ = assemble_benchmark(nominal_config())
        op = solve_operating_point(sys_)
        lin = linearize(sys_, op)
        cands = [r for r in mode_reports(lin) if r.coupling_class == "coupling" and r.mode.freq_hz > 100]
        mode = min(cands, key=lambda r: r.mode.damping).mode
        for angle in (0.0, math.pi / 2):
            x0 = mode_excitation(op, mode, 1e-3, angle)
            tr = simulate(sys_, Scenario(3.0 / mode.freq_hz, max_step=1e-5, x0=x0,
                                         channels=("I_s", "I_L2", "I_g2")), op)
            o = {k: oscillatory_component(tr.t, tr[k]) for k in ("I_s", "I_L2", "I_g2")}
            r_sg = correlation(o["I_s"], o["I_g2"])
            r_sl = correlation(o["I_s"], o["I_L2"])
            r_gl = correlation(o["I_g2"], o["I_L2"])
            c(r_sg > 0 and r_sl < 0 and r_gl < 0,
              f"{mode.freq_hz:.0f} Hz phase {math.degrees(angle):.0f}: "
              f"r(Is,Ig2) {r_sg:+.2f}, r(Is,IL2) {r_sl:+.2f}, r(Ig2,IL2) {r_gl:+.2f}")


def test_c10_reduction(capsys):
    with criterion(10, "reduction formulas and round trip", 120.0, capsys) as c:
        z = impedance_from_short_circuit(ShortCircuitMeasurement("x", 500e3, 1000 / math.sqrt(3)))
        c(abs(z - 500.0) < 1e-9, f"Z = {z:.6f} ohm")
        ht = aggregate_inertia([GeneratorRecord("a", 2.0, 100.0), GeneratorRecord("b", 4.0, 300.0)])
        c(ht == 3.5, f"H_t = {ht}")
        cfg = triangle_config(nominal_config())
        ms = {loc: synthesize_measurement(cfg, loc) for loc in ("inv", "sm", "path")}
        red = reduce_to_benchmark(ms["inv"], ms["sm"], [GeneratorRecord("g", 1.438, 1e9)], template=cfg,
                                  sc3=ms["path"], x_over_r=cfg.line_data.x_over_r)
        from coupling_modes.network import branch_impedances
        orig, back = branch_impedances(cfg), branch_impedances(red)
        errs = {k: abs(abs(back[k].z) / abs(orig[k].z) - 1) for k in ("z1p", "z2p", "z3p")}
        c(max(errs.values()) < 0.02, "round trip " + ", ".join(f"{k} {100 * v:.3f} %" for k, v in errs.items()))


def test_c11_participation_properties(capsys):
    with criterion(11, "participation factor properties", 10.0, capsys) as c:
        P = participation_factors(eigen_decompose(np.diag([-1.0, -2.0, -5.0]), pairs="all"))
        c(np.allclose(np.sort(P, axis=0)[::-1][0], 1.0) and np.allclose(P.sum(axis=0), 1.0)
          and np.count_nonzero(P) == 3, "diagonal system gives identity")
        rng = np.random.default_rng(7)
        worst_sum, worst_sim = 0.0, 0.0
        for _ in range(50):
            A = rng.uniform(-3, 3, (6, 6)) - 8 * np.eye(6)
            modes = eigen_decompose(A, pairs="all")
            P = participation_factors(modes)
            worst_sum = max(worst_sum, float(np.max(np.abs(P.sum(axis=1) - 1))))
            D = np.diag(rng.uniform(0.1, 10.0, 6))
            modes2 = eigen_decompose(D @ A @ np.linalg.inv(D), pairs="all")
            P2 = participation_factors(modes2)
            for m, row in zip(modes, P):
                k = int(np.argmin([abs(m2.lam - m.lam) for m2 in modes2]))
                worst_sim = max(worst_sim, float(np.max(np.abs(row - P2[k]))))
        sys_ = assemble_benchmark(nominal_config())
        Pn = participation_factors(eigen_decompose(linearize(sys_, solve_operating_point(sys_))))
        worst_sum = max(worst_sum, float(np.max(np.abs(Pn.sum(axis=1) - 1))))
        c(worst_sum < 1e-10, f"sum to one, max deviation {worst_sum:.1e}")
        c(worst_sim < 1e-8, f"diagonal similarity invariance, max change {worst_sim:.1e}")


def test_c12_equilibrium_fidelity(capsys):
    with criterion(12, "equilibrium residual and 1 s drift", 60.0, capsys) as c:
        base = nominal_config()
        for name, ov in context_overrides("op1,op2").items():
            cfg = base
            from coupling_modes.config import with_param
            for path, v in ov.items():
                cfg = with_param(cfg, path, v)
            sys_ = assemble_benchmark(cfg)
            op = solve_operating_point(sys_)
            res = float(np.max(np.abs(sys_.f(op.x, op.u))))
            c(res < 1e-10, f"{name} residual {res:.1e}")
            tr = simulate(sys_, Scenario(1.0, max_step=1e-5, sample_dt=1e-3), op)
            drift = max(float(np.max(np.abs(tr[k] - tr[k][0]))) for k in tr.channels)
            c(drift < 1e-6, f"{name} 1 s drift {drift:.1e}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
