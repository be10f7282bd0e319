"""Interpretability metric suites for part-prototype image classifiers.

The package evaluates trained part-prototype models from their exported
artifacts alone: a JSON manifest plus binary tensor files describing the
model head, per-sample similarity maps, scores and outputs.  Six metric
suites (completeness, continuity, contrastivity, complexity, compactness,
performance) reduce those artifacts to a comparable report, which the
``protoscope`` CLI can render as JSON, CSV or an SVG radar chart.
"""

__version__ = "0.1.0"

from protoscope.errors import (
    DegenerateOutputError,
    DegenerateSaliencyError,
    DegenerateSeriesError,
    EmptyMaskError,
    EngineError,
    FormatError,
    IoError,
    ManifestError,
    ShapeError,
    SuiteError,
    UsageError,
    ValidationError,
)
from protoscope.interchange import (
    DatasetBundle,
    ModelBundle,
    PartPoint,
    PerturbedArtifacts,
    SampleBundle,
    load_bundle,
    read_tensor,
    validate_bundle,
    write_tensor,
)
from protoscope.pipeline import SUITES, SuiteConfig, generate_perturbations, run_suite
from protoscope.report import MetricReport, load_report, write_report

__all__ = [
    "__version__",
    "DatasetBundle",
    "DegenerateOutputError",
    "DegenerateSaliencyError",
    "DegenerateSeriesError",
    "EmptyMaskError",
    "EngineError",
    "FormatError",
    "IoError",
    "ManifestError",
    "MetricReport",
    "ModelBundle",
    "PartPoint",
    "PerturbedArtifacts",
    "SampleBundle",
    "ShapeError",
    "SuiteError",
    "SUITES",
    "SuiteConfig",
    "UsageError",
    "ValidationError",
    "generate_perturbations",
    "load_bundle",
    "load_report",
    "read_tensor",
    "run_suite",
    "validate_bundle",
    "write_report",
    "write_tensor",
]
