"""Rank-1 trajectory SVD extrapolation of model checkpoint series."""

from .errors import NumericalError, RelexError, ValidationError
from .store import (
    CheckpointManifest,
    CheckpointSeries,
    TensorSpec,
    open_series,
    read_tensor,
    write_checkpoint,
    write_index,
)
from .trajectory import TrajectoryMatrix, build_trajectory, delta_norms
from .spectral import (
    GramCache,
    SpectralDecomposition,
    gram_matrix,
    linear_fit,
    pls1_fit,
    poly_fit,
    sym_eigendecomp,
    truncated_svd,
)
from .extrapolate import (
    ExtrapolationConfig,
    Rank1Model,
    alpharl_extrapolate,
    expo,
    extrapolate_raw,
    fit_rank1,
    fit_subspace,
    predict,
    reconstruct_rank_r,
    weight_extrapolate,
)
from .diagnostics import (
    AlignmentRecord,
    TensorDiagnostics,
    alignment_report,
    coefficient_dump,
    explained_variance,
    linearity_report,
)
from .synth import GroundTruth, PlantConfig, jacobi_svd_oracle, plant_series

__version__ = "0.1.0"
