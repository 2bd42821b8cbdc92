"""Command-line interface: ``coupling-modes <subcommand> ...``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure. Failures print
one JSON line on stderr of the form ``{"error": {"code": ..., ...}}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import config_from_dict, get_param, nominal_config, save_config, with_param
from .equilibrium import EquilibriumError, solve_operating_point
from .linearization import (LinearizationError, config_factory, linear_model_from_matrix, linearize,
                            parameter_jacobian)
from .modal import (ModalError, fmt, mode_reports, select_modes, write_mode_table,
                    write_participations, write_sensitivities)
from .network import assemble_benchmark
from .params import ParameterError
from .sweeps import (CONTEXTS, SweepSpec, classify_tendency, context_overrides, penetration_sweep,
                     run_sweep, write_flux_table, write_points_csv, write_tendencies_json,
                     write_trajectories_csv)
from .timedomain import (Event, NoOscillationError, Scenario, SimulationError,
                         estimate_mode_from_trace, simulate)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2
FORMATS = ("csv", "json", "svg")
log = logging.getLogger("coupling_modes")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ----------------------------------------------------------------- helpers

def parse_grid(text: str) -> tuple:
    """``1,5,10`` or ``start:stop:count`` (inclusive, evenly spaced)."""
    text = text.strip()
    try:
        if ":" in text:
            a, b, n = text.split(":")
            n = int(n)
            if n < 1:
                raise ValueError
            return tuple(float(v) for v in np.linspace(float(a), float(b), n))
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ParameterError(f"bad grid {text!r}: use 'a,b,c' or 'start:stop:count'") from None


def parse_param(text: str) -> tuple[str, tuple]:
    path, sep, grid = text.partition("=")
    if not sep or not path:
        raise ParameterError(f"--param expects path=grid, got {text!r}")
    return path.strip(), parse_grid(grid)


def parse_set(items) -> dict:
    out = {}
    for text in items or ():
        path, sep, val = text.partition("=")
        if not sep:
            raise ParameterError(f"--set expects path=value, got {text!r}")
        try:
            out[path.strip()] = float(val)
        except ValueError:
            raise ParameterError(f"--set {path}: value {val!r} is not a number") from None
    return out


def load_study_config(args):
    """Benchmark config (or a bare state matrix for ``modes``) plus ``--set`` overrides."""
    if args.config:
        p = Path(args.config)
        try:
            data = json.loads(p.read_text())
        except FileNotFoundError:
            raise ParameterError(f"config file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise ParameterError(f"{p}: invalid JSON ({exc})") from None
        if "state_matrix" in data:
            return data
        try:
            cfg = config_from_dict(data)
        except ParameterError as exc:
            raise ParameterError(f"{p}: {exc}") from None
    else:
        cfg = nominal_config()
    for path, val in parse_set(getattr(args, "set", None)).items():
        cfg = with_param(cfg, path, val)
    return cfg


def _formats(args):
    fm = {f.strip() for f in args.format.split(",") if f.strip()}
    bad = fm - set(FORMATS)
    if bad:
        raise ParameterError(f"--format: unknown format(s) {', '.join(sorted(bad))}")
    return fm


def _out(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ParameterError(f"--out {out}: not writable ({exc})") from None
    return out


def _dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _lam_pair(lam):
    return [float(fmt(lam.real)), float(fmt(lam.imag))]


# --------------------------------------------------------------- commands

def cmd_modes(args) -> int:
    cfg = load_study_config(args)
    out = _out(args)
    fm = _formats(args)
    if isinstance(cfg, dict):
        A = np.asarray(cfg["state_matrix"], float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ParameterError("state_matrix must be a square matrix")
        lin = linear_model_from_matrix(A, cfg.get("state_labels"))
        op = None
    else:
        sys_ = assemble_benchmark(cfg)
        op = solve_operating_point(sys_)
        lin = linearize(sys_, op)
    dA = {}
    for path in args.sensitivity or ():
        if op is None:
            raise ParameterError("--sensitivity needs a benchmark config")
        p0 = get_param(cfg, path)
        dA[path] = parameter_jacobian(config_factory(cfg, path), p0, 1e-3 * abs(p0) if p0 else 1e-6)
    reports = mode_reports(lin, threshold=args.threshold / 100.0, dA=dA)
    reports = select_modes(reports, args.min_freq, args.max_damping, args.coupling_only)
    if "csv" in fm:
        write_mode_table(reports, out / "modes.csv")
        write_participations(reports, out / "participations.csv")
        if dA:
            write_sensitivities(reports, out / "sensitivities.csv")
        if op is not None:
            lin.to_csv(out / "state_space.csv")
            with open(out / "mode_shapes.csv", "w") as fh:
                fh.write("mode,magnitude,re,im,abs,angle_deg\n")
                for r in reports:
                    for name, v in r.extended_shapes.items():
                        fh.write(f"{r.mode.index},{name},{fmt(v.real)},{fmt(v.imag)},{fmt(abs(v))},"
                                 f"{fmt(np.degrees(np.angle(v)))}\n")
    if "json" in fm:
        doc = {"modes": [{"index": r.mode.index, "lambda": _lam_pair(r.mode.lam),
                          "freq_hz": float(fmt(r.mode.freq_hz)), "damping": float(fmt(r.mode.damping)),
                          "coupling_class": r.coupling_class,
                          "groups": {k: float(fmt(v)) for k, v in r.groups.items()}} for r in reports]}
        if op is not None:
            doc["operating_point"] = op.to_dict()
            doc["richardson_error"] = float(fmt(lin.richardson_error))
        _dump(doc, out / "modes.json")
    if "svg" in fm:
        from .plotting import compass_svg, participation_svg
        for r in reports:
            if r.mode.lam.imag <= 0:
                continue
            participation_svg(r, out / f"participation_mode{r.mode.index}.svg")
            if r.extended_shapes:
                compass_svg(r.extended_shapes, out / f"shapes_mode{r.mode.index}.svg",
                            f"mode {r.mode.index}: {r.mode.freq_hz:.0f} Hz")
    print(f"{len(reports)} mode(s) written to {out}")
    return EXIT_OK


def _write_sweep(res, out: Path, fm, prefix=""):
    if "csv" in fm:
        write_points_csv(res, out / f"{prefix}sweep_points.csv")
        write_trajectories_csv(res, out / f"{prefix}trajectories.csv")
        write_flux_table(res, out / f"{prefix}flux_participation.csv")
    if "svg" in fm:
        from .plotting import root_locus_svg
        root_locus_svg(res, out / f"{prefix}root_locus.svg", min_freq_hz=1.0)
    for value, err in res.failures:
        print(f"warning: {res.spec.path} = {value:g} failed: {err}", file=sys.stderr)


def _sweep_common(args, runner):
    out = _out(args)
    fm = _formats(args)
    kw = {"threshold": args.threshold / 100.0, "workers": args.workers}
    if args.contexts:
        results = {}
        for name, ov in context_overrides(args.contexts).items():
            res = runner(name, ov, kw)
            results[name] = res
            _write_sweep(res, out, fm, f"{name}_")
        if len(results) >= 2:
            tend = classify_tendency(results)
            if "json" in fm or args.command == "classify":
                write_tendencies_json(tend, out / "tendencies.json")
            for t in tend:
                print(f"{t.key}: {t.verdict}{' (weak)' if t.weak else ''}")
        ok = all(len(r.failures) < len(r.points) for r in results.values())
    else:
        res = runner("", {}, kw)
        _write_sweep(res, out, fm)
        ok = len(res.failures) < len(res.points)
    if not ok:
        raise EquilibriumError("every grid point of a sweep failed")
    print(f"sweep results written to {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_study_config(args)
    if not args.param:
        raise ParameterError("sweep needs --param path=grid")
    path, grid = parse_param(args.param)

    def runner(name, ov, kw):
        return run_sweep(cfg, SweepSpec(path, grid, ov), sensitivity=args.sensitivity, context=name, **kw)

    return _sweep_common(args, runner)


def cmd_classify(args) -> int:
    if not args.contexts or len(context_overrides(args.contexts)) < 2:
        raise ParameterError("classify needs --contexts with at least two entries, e.g. op1,op2")
    return cmd_sweep(args)


def cmd_penetration(args) -> int:
    cfg = load_study_config(args)
    grid = parse_grid(args.grid)

    def runner(name, ov, kw):
        res = penetration_sweep(cfg, grid, args.p_total, overrides=ov, **kw)
        res.context = name
        return res

    return _sweep_common(args, runner)


def cmd_simulate(args) -> int:
    cfg = load_study_config(args)
    out = _out(args)
    fm = _formats(args)
    if args.scenario:
        try:
            scen = Scenario.load(args.scenario)
        except FileNotFoundError:
            raise ParameterError(f"scenario file not found: {args.scenario}") from None
        except (TypeError, json.JSONDecodeError) as exc:
            raise ParameterError(f"{args.scenario}: {exc}") from None
    else:
        events = []
        for text in args.step or ():
            target, sep, amount = text.partition("=")
            if not sep:
                raise ParameterError(f"--step expects INPUT=AMOUNT, got {text!r}")
            events.append(Event(args.at, target.strip(), float(amount), relative=True))
        scen = Scenario(args.t_end, tuple(events), args.max_step, tuple(args.channels.split(",")),
                        sample_dt=args.sample_dt)
    sys_ = assemble_benchmark(cfg)
    for e in scen.events:
        if e.target not in sys_.input_labels:
            raise ParameterError(f"event target {e.target!r} is not an input ({', '.join(sys_.input_labels)})")
    op = solve_operating_point(sys_)
    if args.fit == "auto":
        return _simulate_ringdown(args, sys_, op, scen, out, fm)
    try:
        tr = simulate(sys_, scen, op)
    except KeyError as exc:
        raise ParameterError(f"unknown channel {exc}") from None
    if "csv" in fm:
        tr.to_csv(out / "trace.csv")
    if "svg" in fm:
        from .plotting import trace_svg
        trace_svg(tr, out / "trace.svg")
    if args.fit:
        t0, t1 = (float(v) for v in args.window.split(","))
        est = estimate_mode_from_trace(tr, args.fit, (t0, t1), trend=2)
        _dump({"channel": args.fit, "window": [t0, t1], "freq_hz": float(fmt(est.freq_hz)),
               "damping": float(fmt(est.damping)), "amplitude": float(fmt(est.amplitude))},
              out / "fit.json")
        print(f"{args.fit}: {est.freq_hz:.2f} Hz, damping {100 * est.damping:.2f} %")
    print(f"trace written to {out}")
    return EXIT_OK


def _simulate_ringdown(args, sys_, op, scen, out, fm) -> int:
    """Single input step; fit the least-damped coupling mode in the cleanest channel."""
    from .timedomain import step_ringdown

    if len(scen.events) != 1 or not scen.events[0].relative:
        raise ParameterError("--fit auto needs exactly one --step")
    ev = scen.events[0]
    chk = step_ringdown(sys_, op, ev.target, ev.value, max_step=scen.max_step)
    tr = chk.trace
    if "csv" in fm:
        tr.to_csv(out / "trace.csv")
    if "svg" in fm:
        from .plotting import trace_svg
        trace_svg(tr, out / "trace.svg")
    f_pred, z_pred = chk.predicted
    doc = {"channel": chk.channel, "window": [float(fmt(v)) for v in chk.window],
           "freq_hz": float(fmt(chk.estimate.freq_hz)), "damping": float(fmt(chk.estimate.damping)),
           "amplitude": float(fmt(chk.estimate.amplitude)),
           "predicted": {"lambda": _lam_pair(chk.lam), "freq_hz": float(fmt(f_pred)),
                         "damping": float(fmt(z_pred))}}
    if chk.lam_final is not None:
        doc["predicted_after_step"] = {"lambda": _lam_pair(chk.lam_final)}
    _dump(doc, out / "fit.json")
    print(f"{chk.channel}: {chk.estimate.freq_hz:.2f} Hz, damping {100 * chk.estimate.damping:.2f} % "
          f"(eigenvalue: {f_pred:.2f} Hz, {100 * z_pred:.2f} %)")
    print(f"trace written to {out}")
    return EXIT_OK


def cmd_reduce(args) -> int:
    from .reduction import load_generators, load_measurements, reduce_to_benchmark, sample_data_path

    out = _out(args)
    meas_path = args.measurements or (sample_data_path("sample_measurements.csv") if args.sample else None)
    gen_path = args.generators or (sample_data_path("sample_generators.csv") if args.sample else None)
    if meas_path is None or gen_path is None:
        raise ParameterError("reduce needs --measurements and --generators (or --sample)")
    for p in (meas_path, gen_path):
        if not Path(p).exists():
            raise ParameterError(f"file not found: {p}")
    meas = load_measurements(meas_path)
    for loc in ("inv", "sm"):
        if loc not in meas:
            raise ParameterError(f"{meas_path}: no measurement at location {loc!r}")
    template = load_study_config(args) if args.config else None
    cfg = reduce_to_benchmark(meas["inv"], meas["sm"], load_generators(gen_path), template=template,
                              z3=args.z3, sc3=meas.get("path"), x_over_r=args.x_over_r)
    save_config(cfg, out / "reduced_config.json")
    print(f"reduced configuration written to {out / 'reduced_config.json'}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coupling-modes", description="Small-signal coupling-mode studies of an "
                "inverter, a synchronous machine and an equivalent grid.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, filters=False):
        sp.add_argument("--config", help="benchmark config JSON (default: shipped nominal)")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--format", default="csv,json,svg", help="comma list of csv, json, svg")
        sp.add_argument("--set", action="append", metavar="PATH=VALUE", help="override one parameter")
        sp.add_argument("--threshold", type=float, default=5.0,
                        help="coupling threshold, percent of participation (default 5)")
        if filters:
            sp.add_argument("--min-freq", type=float, default=0.0, help="minimum frequency (Hz)")
            sp.add_argument("--max-damping", type=float, default=1.0, help="maximum damping ratio")
            sp.add_argument("--coupling-only", action="store_true", help="only coupling modes")

    m = sub.add_parser("modes", help="eigenvalues, participations and mode shapes")
    common(m, filters=True)
    m.add_argument("--sensitivity", action="append", metavar="PATH",
                   help="eigenvalue sensitivity to this parameter (repeatable)")
    m.set_defaults(func=cmd_modes)

    for name, helptext in (("sweep", "parameter sweep with mode tracking"),
                           ("classify", "structural-tendency verdicts across contexts")):
        s = sub.add_parser(name, help=helptext)
        common(s)
        s.add_argument("--param", required=True, metavar="PATH=GRID",
                       help="e.g. lines.lcc=1,5,10,15,20 or gfl.Ki=200:300:11")
        s.add_argument("--contexts", help=f"comma list of {', '.join(CONTEXTS)}")
        s.add_argument("--sensitivity", action="store_true",
                       help="annotate trajectories with sensitivity quadrants")
        s.add_argument("--workers", type=int, default=None)
        s.set_defaults(func=cmd_sweep if name == "sweep" else cmd_classify)

    pe = sub.add_parser("penetration", help="inverter share at constant total generation")
    common(pe)
    pe.add_argument("--grid", default="0.1:0.9:9", help="P_inv grid")
    pe.add_argument("--p-total", type=float, default=1.0)
    pe.add_argument("--contexts", default="strong,weak")
    pe.add_argument("--workers", type=int, default=None)
    pe.set_defaults(func=cmd_penetration)

    si = sub.add_parser("simulate", help="nonlinear time-domain run")
    common(si)
    si.add_argument("--scenario", help="scenario JSON (overrides the step options)")
    si.add_argument("--step", action="append", metavar="INPUT=AMOUNT", help="relative input step")
    si.add_argument("--at", type=float, default=0.0, help="step time (s)")
    si.add_argument("--t-end", type=float, default=0.1)
    si.add_argument("--max-step", type=float, default=1e-5)
    si.add_argument("--sample-dt", type=float, default=None)
    si.add_argument("--channels", default="I_s,I_L2,I_g2,P_inv_meas")
    si.add_argument("--fit", metavar="CHANNEL", help="fit a damped cosine to this channel; 'auto' picks the "
                    "least-damped coupling mode and its cleanest channel")
    si.add_argument("--window", default="0.01,0.035", help="fit window t0,t1 (s)")
    si.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reduce", help="reduce measurements and a generator table to a benchmark")
    common(r)
    r.add_argument("--measurements", help="CSV: location,U_V,Icc_A (locations inv, sm, path)")
    r.add_argument("--generators", help="CSV: name,H_s,S_VA[,Rg]")
    r.add_argument("--sample", action="store_true", help="use the shipped sample tables")
    r.add_argument("--z3", type=float, default=None, help="inverter-to-machine impedance (ohm)")
    r.add_argument("--x-over-r", type=float, default=10.0)
    r.set_defaults(func=cmd_reduce)
    return p


def _fail(code: str, exit_code: int, exc: BaseException, command: str | None) -> int:
    err = {"code": code, "exit": exit_code, "type": type(exc).__name__, "message": str(exc)}
    if command:
        err["command"] = command
    print(json.dumps({"error": err}, sort_keys=True), file=sys.stderr)
    return exit_code


def main(argv=None) -> int:
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        if command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (EquilibriumError, LinearizationError, ModalError, SimulationError, NoOscillationError,
            ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail("numerical", EXIT_NUMERIC, exc, command)
    except (UsageError, ParameterError, KeyError, ValueError, OSError) as exc:
        return _fail("validation", EXIT_INPUT, exc, command)


if __name__ == "__main__":
    sys.exit(main())
