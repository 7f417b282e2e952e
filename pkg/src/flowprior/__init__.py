"""Image inverse problems with an invertible-flow prior.

Two reconstruction formulations share one trained flow: *synthesis*
optimises a latent code and decodes it, *analysis* optimises the image and
penalises the norm of its encoding.
"""

__version__ = "0.1.0"

from .flow import FlowModel, decode, decode_vjp, encode, encode_vjp, load_checkpoint, save_checkpoint
from .metrics import psnr, ssim
from .operators import LinearOperator, ProblemSpec, blur, degrade, downsample, identity
from .solvers import (
    SolveReport,
    SolverConfig,
    analysis_objective,
    solve_analysis,
    solve_synthesis,
    synthesis_objective,
)
from .training import TrainConfig, nll, train

__all__ = [
    "FlowModel", "LinearOperator", "ProblemSpec", "SolveReport", "SolverConfig", "TrainConfig",
    "analysis_objective", "blur", "decode", "decode_vjp", "degrade", "downsample", "encode", "encode_vjp",
    "identity", "load_checkpoint", "nll", "psnr", "save_checkpoint", "solve_analysis", "solve_synthesis",
    "ssim", "synthesis_objective", "train",
]
