"""Shared vision-transformer backbone with segmentation, identification and defect heads."""

from .backbone import Backbone, BackboneConfig, FeatureMap, count_parameters, prune_experts
from .errors import ToteVisionError
from .pyramid import SimplePyramid, build_pyramid

__version__ = "0.1.0"
