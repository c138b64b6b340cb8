"""Segmentation and TH optical-density quantification for SNr/SNCD histology."""

from snseg.core import (
    AnnotatedSample,
    ClassCatalog,
    LabelMask,
    ProbabilityMap,
    RasterImage,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotatedSample",
    "ClassCatalog",
    "LabelMask",
    "ProbabilityMap",
    "RasterImage",
    "__version__",
]
