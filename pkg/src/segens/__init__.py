"""Streaming aggregation, uncertainty and evaluation of segmentation ensembles."""

from .aggregate import aggregate_stream, greedy_match, hungarian_match, mask_distance_matrix
from .align import EnsembleConfig, build_aligned_ensemble
from .fuse import panoptic_inference, pixel_class_distribution, semantic_inference
from .types import FlowField, SampleTensor, Transform, UncertaintyMap
from .uncertainty import MEASURES, compute_measures, default_accumulators

__version__ = "0.1.0"

__all__ = [
    "EnsembleConfig",
    "FlowField",
    "MEASURES",
    "SampleTensor",
    "Transform",
    "UncertaintyMap",
    "aggregate_stream",
    "build_aligned_ensemble",
    "compute_measures",
    "default_accumulators",
    "greedy_match",
    "hungarian_match",
    "mask_distance_matrix",
    "panoptic_inference",
    "pixel_class_distribution",
    "semantic_inference",
]
