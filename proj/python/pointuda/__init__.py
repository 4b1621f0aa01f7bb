"""Point-cloud domain adaptation with a learnable destruction-reconstruction task."""

from ._core import (
    ConfigError,
    DimensionError,
    EmptyCloudError,
    FormatError,
    IntegrityError,
    Model,
    NumericError,
    RangeError,
    chamfer_distance,
    generate_domains,
    knn,
    load_dataset,
    normalize,
    plane_crop,
    select_region,
    selfcheck,
    train,
)

__all__ = [
    "ConfigError",
    "DimensionError",
    "EmptyCloudError",
    "FormatError",
    "IntegrityError",
    "Model",
    "NumericError",
    "RangeError",
    "chamfer_distance",
    "generate_domains",
    "knn",
    "load_dataset",
    "normalize",
    "plane_crop",
    "select_region",
    "selfcheck",
    "train",
]
