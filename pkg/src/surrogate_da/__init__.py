"""3DVar data assimilation with surrogate dynamics.

Structured convolutional background covariance with a diagonal innovation
matrix, grid-thinning observations, smoothing-stabilised surrogate models and
a numerical harness for the long-time accuracy bound.
"""

from .conv import GaussianKernel, build_kernel, convolve, convolve_adjoint, smooth
from .covariance import BackgroundCovariance, GainApplicator, apply_C, apply_gain, build_gain, default_q, verify_diagonal
from .dynamics import Advection2DConfig, LinearDynamics, Lorenz96Config, SurrogatePerturbation
from .filter import FilterConfig, FilterTrajectory, assimilate_step, divergence_detect, operational_filter, run_filter
from .grid import FeatureStats, GridGeometry, GridState, latitude_weights, read_snapshot, write_snapshot
from .metrics import acc, crps, rmse
from .obs import ObservationBatch, ThinningOperator, apply_H, interpolate_baseline, observe, percent_observed

__version__ = "0.1.0"
