"""Dual-pathway open-vocabulary 3D instance segmentation.

Combines class-agnostic 3D proposals with 2D detections lifted into the point
cloud, then labels and scores the result against text features.
"""
from .errors import DualPathError
from .integration import IntegrationConfig, conditional_integrate, simple_integrate
from .masks import InstanceMask
from .scene import PointCloud, Proposal, ProposalSet, Scene

__version__ = "0.1.0"

__all__ = [
    "DualPathError", "InstanceMask", "IntegrationConfig", "PointCloud", "Proposal", "ProposalSet",
    "Scene", "conditional_integrate", "simple_integrate", "__version__",
]
