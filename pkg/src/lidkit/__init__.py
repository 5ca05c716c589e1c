"""Local intrinsic dimension estimation toolkit.

Estimators driven by denoising score fields (denoising loss, implicit score
matching, FLIPD, normal/error bundle spectra), analytic score oracles, a
trainable MLP score model, classical k-NN baselines, and synthetic manifold
benchmarks of known local dimension.
"""

from .errors import (
    CapabilityError,
    ConfigError,
    DegenerateNeighborhoodError,
    DimensionError,
    EvaluationError,
    FormatError,
    InsufficientPointsError,
    LidkitError,
    ParameterizationError,
    ShapeError,
    TrainingDivergedError,
    UnsupportedFamilyError,
)
from .numerics import (
    RngStream,
    Spectrum,
    gaussian_vector,
    knn,
    knn_distances,
    random_orthogonal,
    sym_eig,
)

__version__ = "0.1.0"
