"""KAN layers, 3-D KAN convolution and a KAN-DenseNet hyperspectral classifier."""

from ._core import (
    ConfigError,
    DimensionError,
    DomainError,
    FormatError,
    GeometryError,
    KanLinear,
    Mode,
    Model,
    NetworkConfig,
    NumericError,
    basis_matrix,
    compute_metrics,
    cross_entropy,
    gradcheck,
    grid_demo,
    growth_rate,
    metrics_from_confusion,
    read_cube,
    synth_cube,
    uniform_grid,
    write_cube,
)

__all__ = [
    "ConfigError",
    "DimensionError",
    "DomainError",
    "FormatError",
    "GeometryError",
    "KanLinear",
    "Mode",
    "Model",
    "NetworkConfig",
    "NumericError",
    "basis_matrix",
    "compute_metrics",
    "cross_entropy",
    "gradcheck",
    "grid_demo",
    "growth_rate",
    "metrics_from_confusion",
    "read_cube",
    "synth_cube",
    "uniform_grid",
    "write_cube",
]
