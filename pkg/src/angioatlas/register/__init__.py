from .engine import (
    RegistrationConfig,
    RegistrationError,
    StageResult,
    bspline_schedule,
    centroid_init,
    effective_levels,
    estimate_scales,
    gaussian_pyramid,
    load_config,
    moment_init,
    register,
    register_affine,
    register_bspline,
)
from .optimizer import lbfgs
from .similarity import mi_cost, mutual_information
from .transforms import (
    Affine2,
    BSplineField2,
    SingularTransformError,
    TransformPair,
    apply_transform,
    bspline_weights,
    dumps_pair,
    identity_pair,
    load_pair,
    pair_from_dict,
    pair_to_dict,
    sample_bilinear,
    save_pair,
)

__all__ = [
    "Affine2", "BSplineField2", "RegistrationConfig", "RegistrationError", "SingularTransformError",
    "StageResult", "TransformPair", "apply_transform", "bspline_schedule", "bspline_weights",
    "centroid_init", "dumps_pair", "effective_levels", "estimate_scales", "gaussian_pyramid",
    "identity_pair", "lbfgs", "load_config", "load_pair", "mi_cost", "moment_init", "mutual_information",
    "pair_from_dict", "pair_to_dict", "register", "register_affine", "register_bspline",
    "sample_bilinear", "save_pair",
]
