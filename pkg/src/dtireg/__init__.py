"""Nonrigid registration of diffusion tensor images with a multicomponent Jensen-Tsallis similarity."""
from .errors import (
    ConfigurationError, DataError, DegenerateError, DomainError, DtiRegError, FormatError,
    OptimizationError, SingularJacobianError, TruncationError, ValidationError,
)
from .evaluation import EvaluationReport, evaluate, paired_ttest
from .ffd import FfdTransform, make_ffd, refine_grid, render_field
from .registration import RegistrationConfig, RegistrationMode, RegistrationResult, register, register_affine_mi
from .tensor_model import fit_tensor, scalar_indices, synthesize_signals
from .volume_io import (
    DwiSet, GridGeometry, ScalarVolume, TensorVolume, VectorField, export_slice_ppm, load_volume, save_volume,
)

__version__ = "0.1.0"
