"""Quadratic vector equations and translation-invariant Gaussian random
matrices on the discrete torus."""

from .torus_kernel import (
    CorrelationPair,
    FourierSymbol,
    build_kernel,
    check_ab_compatibility,
    check_bochner,
    check_decay,
    check_nonresonance_r1,
    check_nonresonance_r2,
    find_block_fid_certificate,
    fourier_symbol,
    is_fully_indecomposable,
)
from .qve import QveSolution, SolverOptions, density, q_decay_fit, q_profile, solve_qve_grid, support_and_edge
from .ensemble import SampleBatch, StreamBatch, gaussian_component_split, sample_goe_gue, sample_invariant_gaussian
from .spectral_lab import gap_statistics, local_law_report, resolvent, scaling_fit, universality_compare

__version__ = "0.1.0"
