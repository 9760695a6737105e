"""Marginal and exclusion losses for training one multi-class segmentation
model on a union of fully and partially labeled datasets."""

from partialseg.label_space import (
    ExclusionMap,
    LabelSpace,
    MergePartition,
    exclusion_vector,
    identity_partition,
    project_labels,
    single_organ_partition,
)
from partialseg.losses import (
    LossReport,
    LossWeights,
    combined_loss,
    exclusion_ce,
    exclusion_dice,
    marginal_ce,
    marginal_dice,
    marginal_prob,
    regular_ce,
    regular_dice,
    softmax,
)

__version__ = "0.1.0"

__all__ = [
    "ExclusionMap",
    "LabelSpace",
    "LossReport",
    "LossWeights",
    "MergePartition",
    "combined_loss",
    "exclusion_ce",
    "exclusion_dice",
    "exclusion_vector",
    "identity_partition",
    "marginal_ce",
    "marginal_dice",
    "marginal_prob",
    "project_labels",
    "regular_ce",
    "regular_dice",
    "single_organ_partition",
    "softmax",
]
