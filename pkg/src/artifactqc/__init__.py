"""Tissue-artifact quality control for whole-slide-image tiles.

Segment tissue folds and air bubbles, grade artifact severity with a stacked
transfer-learning ensemble, and decide which regions to keep.
"""

from .core import (
    ArtifactKind,
    Architecture,
    DatasetManifest,
    Loss,
    ManifestEntry,
    MaskSample,
    Optimizer,
    PlateauConfig,
    RunConfig,
    Severity,
    SeveritySample,
    TileSample,
    validate_config,
)
from .pipeline import Decision, DecisionReport, Policy, run_pipeline
from .segmentation import ArtifactSegmenter
from .severity import SeverityClassifier
from .stacking import StackedSeverityClassifier

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "ArtifactKind",
    "ArtifactSegmenter",
    "DatasetManifest",
    "Decision",
    "DecisionReport",
    "Loss",
    "ManifestEntry",
    "MaskSample",
    "Optimizer",
    "PlateauConfig",
    "Policy",
    "RunConfig",
    "Severity",
    "SeverityClassifier",
    "SeveritySample",
    "StackedSeverityClassifier",
    "TileSample",
    "run_pipeline",
    "validate_config",
]
