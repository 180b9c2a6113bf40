"""FD-CAM: class activation maps weighted by gradients and channel-switch scores."""
__version__ = "0.1.0"

from .backend import (ActivationStack, GradientStack, ModelHandle, TinyCNN, load_model,
                      make_tiny_test_cnn)
from .cam import SaliencyMap, compose_cam, fd_cam, fd_cam_traced, grad_cam
from .errors import ConfigError, FDCamError, InputError, NumericError
from .grouping import all_groups, cosine_similarity, similarity_group, similarity_matrix
from .metrics import (deletion_curve, evaluate_faithfulness, insertion_curve, pointing_accuracy,
                      pointing_game)
from .weighting import CombineConfig, WeightVector, fd_weights, grad_weights

__all__ = [
    "ActivationStack", "GradientStack", "ModelHandle", "TinyCNN", "load_model", "make_tiny_test_cnn",
    "SaliencyMap", "compose_cam", "fd_cam", "fd_cam_traced", "grad_cam",
    "ConfigError", "FDCamError", "InputError", "NumericError",
    "all_groups", "cosine_similarity", "similarity_group", "similarity_matrix",
    "deletion_curve", "evaluate_faithfulness", "insertion_curve", "pointing_accuracy", "pointing_game",
    "CombineConfig", "WeightVector", "fd_weights", "grad_weights",
]
