"""Plug-and-play ADMM with a mean renoise-denoise flow prior (FlowADMM).

Submodules
----------
tensor      seeded RNG, tensor checks, F64 and PGM/PPM file formats
operators   diagonalizable forward operators and the data prox
flow_prior  Gaussian, Gaussian-mixture and MLP velocity priors; flow-matching training
renoise     mean renoise-denoise operator, schedules, Jacobian probes
solvers     FlowADMM, the PnP-Flow baseline, affine convergence oracles
metrics     PSNR and SSIM
bench       tasks, synthetic corpus, paired benchmark harness
config      flat JSON run configs and presets
cli         the ``flowadmm`` command
"""

from .errors import (
    AssumptionError,
    ConfigError,
    ConvergenceError,
    DivergenceError,
    FlowAdmmError,
    ParameterError,
    ShapeError,
    TrainingDivergedError,
    UnsupportedError,
)
from .flow_prior import GaussianPrior, GmmPrior, MlpVelocity, train_flow_matching
from .metrics import psnr, ssim
from .operators import TaskOpSpec, make_op, prox_data_cg, prox_data_closed_form
from .renoise import MeanDenoiser, SampleSchedule, TimeSchedule, jacobian_spectral_norm
from .solvers import PnpFlowConfig, SolverConfig, flow_admm_run, pnp_flow_run
from .tensor import SeededRng

__version__ = "0.1.0"
