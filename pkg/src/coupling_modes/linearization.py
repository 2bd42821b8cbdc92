"""Numerical linearisation of a DynamicSystem around an operating point."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .equilibrium import OperatingPoint, solve_operating_point
from .network import DynamicSystem


class LinearizationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LinearModel:
    A: np.ndarray
    B: np.ndarray
    state_labels: tuple
    input_labels: tuple
    op: OperatingPoint | None = None
    C: np.ndarray | None = None
    output_labels: tuple = ()
    y0: np.ndarray | None = None
    richardson_error: float = float("nan")
    info: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def output_row(self, label: str) -> np.ndarray:
        return self.C[self.output_labels.index(label)]

    def output_value(self, label: str) -> float:
        return float(self.y0[self.output_labels.index(label)])

    def to_csv(self, path) -> None:
        """Write ``A`` and ``B`` side by side with a header row of labels."""
        states = [str(s) for s in self.state_labels]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state"] + [f"A:{s}" for s in states] + [f"B:{u}" for u in self.input_labels])
            for i, s in enumerate(states):
                w.writerow([s] + [f"{v:.9g}" for v in self.A[i]] + [f"{v:.9g}" for v in self.B[i]])


def _steps(x, rel, floor):
    return np.maximum(floor, rel * np.abs(x))


def jacobian_fd(fun: Callable, x0, steps) -> np.ndarray:
    """Central-difference Jacobian of ``fun`` with a per-coordinate step."""
    x0 = np.asarray(x0, float)
    f0 = np.asarray(fun(x0))
    jac = np.empty((f0.size, x0.size))
    for j, h in enumerate(steps):
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += h
        xm[j] -= h
        jac[:, j] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * h)
    return jac


def _check_finite(mat, name, rows, cols):
    bad = np.argwhere(~np.isfinite(mat))
    if bad.size:
        i, j = bad[0]
        raise LinearizationError(f"non-finite {name}[{i}, {j}] (d {rows[i]} / d {cols[j]})")


def linearize(sys: DynamicSystem, op: OperatingPoint, rel_step: float = 1e-6,
              min_step: float = 1e-6, richardson: bool = True, outputs: bool = True) -> LinearModel:
    """State-space matrices by central differences.

    Step for coordinate j is ``max(min_step, rel_step*|x_j|)``. With
    ``richardson`` the state Jacobian is recomputed at half the step and
    ``||A_h - A_h/2||_inf / ||A||_inf`` is stored as ``richardson_error``.
    """
    x0 = np.asarray(op.x, float)
    u0 = np.asarray(op.u, float)
    hx = _steps(x0, rel_step, min_step)
    hu = _steps(u0, rel_step, min_step)
    A = jacobian_fd(lambda x: sys.f(x, u0), x0, hx)
    B = jacobian_fd(lambda u: sys.f(x0, u), u0, hu)
    states = [str(s) for s in sys.state_labels]
    _check_finite(A, "A", states, states)
    _check_finite(B, "B", states, list(sys.input_labels))
    err = float("nan")
    if richardson:
        A2 = jacobian_fd(lambda x: sys.f(x, u0), x0, hx / 2)
        err = float(np.linalg.norm(A - A2, np.inf) / max(np.linalg.norm(A, np.inf), 1e-300))
    C = y0 = None
    out_labels = ()
    if outputs and sys.outputs is not None:
        out_labels = tuple(sys.output_labels)
        y0 = np.asarray(sys.outputs(x0, u0), float)
        C = jacobian_fd(lambda x: sys.outputs(x, u0), x0, hx)
        _check_finite(C, "C", list(out_labels), states)
    return LinearModel(A, B, tuple(sys.state_labels), tuple(sys.input_labels), op,
                       C, out_labels, y0, err)


def linear_model_from_matrix(A, state_labels=None) -> LinearModel:
    """Wrap a bare state matrix (no inputs) so the modal tools accept it."""
    A = np.asarray(A, float)
    labels = tuple(state_labels) if state_labels is not None else tuple(f"x{i}" for i in range(A.shape[0]))
    return LinearModel(A, np.zeros((A.shape[0], 0)), labels, ())


def parameter_jacobian(factory: Callable[[float], DynamicSystem], p0: float, dp: float,
                       resolve: bool = True, op0: OperatingPoint | None = None,
                       solve_kwargs: dict | None = None, **lin_kwargs) -> np.ndarray:
    """Central difference ``(A(p0+dp) - A(p0-dp)) / (2 dp)``.

    ``factory`` maps a parameter value to a DynamicSystem. With ``resolve``
    the operating point is recomputed at each perturbed value; otherwise the
    operating point ``op0`` (solved at ``p0`` if not given) is held fixed.
    """
    if dp == 0:
        raise ValueError("parameter_jacobian: dp must be nonzero")
    solve_kwargs = solve_kwargs or {}
    lin_kwargs.setdefault("richardson", False)
    lin_kwargs.setdefault("outputs", False)
    if not resolve and op0 is None:
        op0 = solve_operating_point(factory(p0), **solve_kwargs)
    mats = []
    for p in (p0 + dp, p0 - dp):
        sys = factory(p)
        if resolve:
            try:
                op = solve_operating_point(sys, **solve_kwargs)
            except Exception as exc:
                raise LinearizationError(f"operating point re-solve failed at p = {p!r}: {exc}") from exc
        else:
            op = op0
        mats.append(linearize(sys, op, **lin_kwargs).A)
    return (mats[0] - mats[1]) / (2.0 * dp)


def config_factory(cfg, path: str) -> Callable[[float], DynamicSystem]:
    """Factory for :func:`parameter_jacobian` varying one dotted config path."""
    from .config import with_param
    from .network import assemble_benchmark

    return lambda p: assemble_benchmark(with_param(cfg, path, p))


def export_matrices(lin: LinearModel, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "state_space.csv"
    lin.to_csv(path)
    return path
