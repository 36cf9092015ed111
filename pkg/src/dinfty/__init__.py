"""Certified upper and lower bounds on the infinity-transport distance
between a density and its empirical measure."""

from .bounds import LowerBoundCertificate, TailBound, bernstein, chernoff, lower_bound_certificate
from .core import (
    Box,
    BoxUnionDomain,
    Density,
    DensityError,
    DomainError,
    EmpiricalMeasure,
    MassLedger,
    pushforward_check,
    sample,
)
from .domains import WPDecomposition, build_gate, build_wp, gate_homeomorphism, rebalance_and_recurse
from .experiment import ExperimentConfig, RateFit, fit_rate, run_experiment
from .matching import bottleneck_match, grid_discrepancy_diagnostic, hall_matching_2d
from .multiscale import ComposedTransport, density_to_density, empirical_coupling_highd, uniform_to_density
from .partition import dyadic_lebesgue, dyadic_nu, rectangle_partition_n
from .transport1d import MonotoneMap1D, PiecewiseConstantDensity1D, cdf_transport

__version__ = "0.1.0"
