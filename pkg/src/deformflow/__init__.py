"""Sampling from unnormalized Boltzmann densities with continuous
normalizing flows trained to satisfy the deformation equation along an
interpolation of energy functions."""

from ._kernels import BACKEND
from .energies import (
    GaussianMixtureSpec,
    GenGaussianBaseSpec,
    NormalBaseSpec,
    Phi4Spec,
)
from .engine import FDConfig, ParamStore, Tape
from .flow import IntegratorConfig
from .interp import Interpolant
from .nets import FlowModel, MlpSpec, RbfTimeEnsemble, TimeScalarHead
from .trainkit import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "FDConfig",
    "FlowModel",
    "GaussianMixtureSpec",
    "GenGaussianBaseSpec",
    "IntegratorConfig",
    "Interpolant",
    "MlpSpec",
    "NormalBaseSpec",
    "ParamStore",
    "Phi4Spec",
    "RbfTimeEnsemble",
    "Tape",
    "TimeScalarHead",
    "TrainConfig",
    "__version__",
]
