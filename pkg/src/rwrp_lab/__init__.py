"""Numerical lab for random walks in random potentials: exact recursions,
free energies, variational formulas and disorder diagnostics."""

__version__ = "0.1.0"

from .env import (Bernoulli, Box, LogGamma, Model, PeriodicEnvironment, PeriodicModel, Potential, StepSet,
                  TruncatedGaussian, directed_polymer, linear_potential, make_periodic_environment, make_step_set,
                  rwre_to_potential, sample_iid_environment, step_potential, table_potential, zero_potential)
from .transfer import (bridge_log_H, endpoint_stats, enumerate_oracle, level_recursion, martingale_W,
                       partition_function, torus_log_partition)
from .spectral import build_operator, log_spectral_radius, rate_function, tilted_free_energy, velocity
from .variational import (CocycleField, PositiveField, fixed_point_residual, g_lambda_truncated, k_functional,
                          log_gradient, minimize_kprime, verify_cocycle)
from .freeenergy import annealed_free_energy, annealing_bound_check, quenched_free_energy_mc
from .disorder import h_event_diagnostics, kpz_probe, overlap_series, simulate_martingale

__all__ = [name for name in dir() if not name.startswith("_")]
