"""Camera localization with volumetric pose features.

A desk-scale pipeline: procedural synthetic scenes with an exact ray-casting
renderer, a pose-feature radiance field, a convolutional absolute-pose
regressor trained with rendered-view augmentation, and a self-supervised
alignment stage for unlabelled images.
"""

from .se3 import (
    PerturbationBounds,
    Pose,
    compose,
    invert,
    orthonormalize,
    perturb,
    recenter,
    rotation_error,
    translation_error,
)

__all__ = [
    "Pose",
    "PerturbationBounds",
    "compose",
    "invert",
    "perturb",
    "orthonormalize",
    "recenter",
    "rotation_error",
    "translation_error",
]
