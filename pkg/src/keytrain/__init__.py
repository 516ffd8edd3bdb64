"""Secret-key capacity and downlink training design for reciprocity-based key generation in massive MIMO."""

__version__ = "0.1.0"

from .capacity import (  # noqa: E402
    CapacityReport,
    Criterion,
    TrainingSequence,
    capacity_determinant,
    capacity_monte_carlo,
    capacity_parallel,
    capacity_woodbury,
    evaluate,
)
from .channel import (  # noqa: E402
    ArrayGeometry,
    Cluster,
    SpatialModeBasis,
    UserStatistics,
    compact_eig,
    cross_user_coherence,
    make_clustered_covariance,
    make_exp_correlation,
)
from .designer import (  # noqa: E402
    DesignRequest,
    PowerAllocation,
    design_multi_user_large_antenna,
    design_single_user,
    design_uniform,
    water_fill,
)
from .errors import ConfigError, InvalidInput, InvalidParameter, KeytrainError  # noqa: E402
from .optimizer import (  # noqa: E402
    OptimizerOptions,
    OptimizerResult,
    extract_training_sequence,
    maximize,
    reduce_subspace,
)

__all__ = [
    "ArrayGeometry", "CapacityReport", "Cluster", "ConfigError", "Criterion", "DesignRequest",
    "InvalidInput", "InvalidParameter", "KeytrainError", "OptimizerOptions", "OptimizerResult",
    "PowerAllocation", "SpatialModeBasis", "TrainingSequence", "UserStatistics",
    "capacity_determinant", "capacity_monte_carlo", "capacity_parallel", "capacity_woodbury",
    "compact_eig", "cross_user_coherence", "design_multi_user_large_antenna",
    "design_single_user", "design_uniform", "evaluate", "extract_training_sequence",
    "make_clustered_covariance", "make_exp_correlation", "maximize", "reduce_subspace",
    "water_fill",
]
