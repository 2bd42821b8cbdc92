"""Small-signal coupling-mode toolkit for a synchronous machine, a grid-following
inverter and an equivalent grid."""

from .config import BenchmarkConfig, load_config, nominal_config, with_param
from .network import assemble_benchmark, star_to_triangle, triangle_to_star
from .equilibrium import solve_operating_point

__all__ = [
    "BenchmarkConfig",
    "assemble_benchmark",
    "load_config",
    "nominal_config",
    "solve_operating_point",
    "star_to_triangle",
    "triangle_to_star",
    "with_param",
]
__version__ = "0.1.0"
