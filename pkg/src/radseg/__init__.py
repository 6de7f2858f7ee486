"""radseg: detect-then-segment semantic segmentation for radar RAD cubes.

A small, fully deterministic numpy implementation of the whole pipeline:
scene simulation, dataset persistence, a center-point detector, seeded
region growing, submanifold sparse-convolution segmentation, evaluation
metrics, and batch-norm channel pruning.
"""

from .geometry import RadarGeometry, bin_to_cartesian, cartesian_to_bin

__version__ = "0.1.0"

__all__ = ["RadarGeometry", "bin_to_cartesian", "cartesian_to_bin", "__version__"]
