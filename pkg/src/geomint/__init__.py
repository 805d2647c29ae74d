"""Symplectic linearly implicit integrators for stiff and penalty-constrained mechanics."""

__version__ = "0.1.0"

from .core import (ConfigurationError, ConstraintSet, MassMatrix, MechanicalSystem, PhaseState,
                   Potential, StiffSplitSystem, Trajectory, build_penalty_system, total_energy)
from .integrators import (IntegratorConfig, LangevinConfig, Step, StepError, Stepper,
                          gla_step, linearized_newmark_step, newmark_step,
                          pushforward_newmark_step, run_trajectory, shake_step,
                          sylipn_step, velocity_verlet_step)
from .solvers import SolverError, newton_solve, solve_symmetric
from .stochastic import RngStream, gaussian_vector

__all__ = [
    "ConfigurationError", "ConstraintSet", "MassMatrix", "MechanicalSystem", "PhaseState",
    "Potential", "StiffSplitSystem", "Trajectory", "build_penalty_system", "total_energy",
    "IntegratorConfig", "LangevinConfig", "Step", "StepError", "Stepper", "gla_step",
    "linearized_newmark_step", "newmark_step", "pushforward_newmark_step", "run_trajectory",
    "shake_step", "sylipn_step", "velocity_verlet_step", "SolverError", "newton_solve",
    "solve_symmetric", "RngStream", "gaussian_vector",
]
