"""Octree AMR hydrodynamics with FMM gravity."""

from ._core import (
    CapacityError,
    ConfigError,
    Error,
    IoError,
    MetricsReport,
    MetricsRow,
    NumericalError,
    RunConfig,
    StructuralError,
    Totals,
    dynamical_time,
    parse_config,
    run,
    sedov_analytic,
    sedov_shock_radius,
    sedov_xi0,
)

__all__ = [
    "CapacityError",
    "ConfigError",
    "Error",
    "IoError",
    "MetricsReport",
    "MetricsRow",
    "NumericalError",
    "RunConfig",
    "StructuralError",
    "Totals",
    "dynamical_time",
    "parse_config",
    "run",
    "sedov_analytic",
    "sedov_shock_radius",
    "sedov_xi0",
]
