"""Spectral-complexity generalization bounds and structured Gaussian noise.

Submodules: :mod:`tensor` (norms, RNG), :mod:`structured` (conv / banded
operators and their spectral norms), :mod:`bounds` (closed-form bounds),
:mod:`network` (ReLU nets, perturbation harness), :mod:`trainer` (SGD),
:mod:`augment` (dataset variants), :mod:`io` and :mod:`cli`.
"""

from .bounds import (
    BoundReport,
    LayerSpec,
    NetworkSpec,
    bandeira_bound,
    baseline_psi,
    conv_noise_bound,
    fc_noise_bound,
    gaussian_matrix_bound,
    ge_bound,
    kl_term,
    lc_noise_bound,
    psi_f,
    sigma_choice,
    spectral_complexity,
)
from .data import LabeledDataset
from .errors import (
    ConvergenceError,
    DegenerateInputError,
    FormatError,
    InputError,
    SpecboundError,
    TrainingError,
    UsageError,
)
from .structured import ConvShape, build_conv_operator, conv_spectral_norm_exact, monte_carlo_spectral
from .tensor import Rng, matrix_norm, spectral_norm, stable_rank

__all__ = [
    "BoundReport",
    "ConvShape",
    "ConvergenceError",
    "DegenerateInputError",
    "FormatError",
    "InputError",
    "LabeledDataset",
    "LayerSpec",
    "NetworkSpec",
    "Rng",
    "SpecboundError",
    "TrainingError",
    "UsageError",
    "bandeira_bound",
    "baseline_psi",
    "build_conv_operator",
    "conv_noise_bound",
    "conv_spectral_norm_exact",
    "fc_noise_bound",
    "gaussian_matrix_bound",
    "ge_bound",
    "kl_term",
    "lc_noise_bound",
    "matrix_norm",
    "monte_carlo_spectral",
    "psi_f",
    "sigma_choice",
    "spectral_complexity",
    "spectral_norm",
    "stable_rank",
]

__version__ = "0.1.0"
