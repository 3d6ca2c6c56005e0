"""Quasi-Monte Carlo uncertainty quantification for 2D Navier-Stokes with log-normal initial data."""

from .errors import ConfigError, FieldMagnitudeError, NonConvergence, NumericalError, SampleFailure
from .experiment import ErrorReport, ExperimentConfig, estimate_rate, run_mc, run_qmc, standard_error
from .initial_data import InitialFieldSpec, eval_u0, project_initial
from .mesh_fem import TaylorHoodSpace, TriMesh, VelocityState, build_mesh, build_space
from .ns_solver import Functional, SolverConfig, Trajectory, backward_euler, evaluate_G, picard_step
from .qmc import LatticeRule, PODWeights, cbc_construct, pod_weights, theta
from .random_field import KLBasis, MaternParams, b_sequence, build_kl, estimate_p, matern_cov

__version__ = "0.1.0"
