import numpy as np
import pytest

from coupling_modes import assemble_benchmark, nominal_config, solve_operating_point
from coupling_modes.linearization import linearize
from coupling_modes.modal import mode_reports
from coupling_modes.network import DynamicSystem


@pytest.fixture(scope="session")
def nominal_cfg():
    return nominal_config()


@pytest.fixture(scope="session")
def nominal_sys(nominal_cfg):
    return assemble_benchmark(nominal_cfg)


@pytest.fixture(scope="session")
def nominal_op(nominal_sys):
    return solve_operating_point(nominal_sys, P_inv=0.2, P_sm=0.2)


@pytest.fixture(scope="session")
def nominal_lin(nominal_sys, nominal_op):
    return linearize(nominal_sys, nominal_op)


@pytest.fixture(scope="session")
def nominal_reports(nominal_lin):
    return mode_reports(nominal_lin)


@pytest.fixture
def make_system():
    """Factory for small labelled systems ``dx/dt = f(x, u)``."""
    def build(labels, f, inputs=(), u0=()):
        return DynamicSystem(tuple(labels), tuple(inputs), lambda x, u: np.asarray(f(x, u), float),
                             lambda x, u: np.zeros(0), u0=np.asarray(u0, float))

    return build
