"""Semantic annotation and verification toolkit for additive-manufacturing builds.

Meshes carry machine-checkable annotations (material fields, constraints,
bounds on derived quantities); a small FEM core verifies them, an inverse
solver picks material fields that satisfy them, and a print simulator closes
the loop when the process drifts.
"""

from .errors import (
    AnnotationParseError,
    BasePointError,
    BindError,
    CalibrationError,
    MeshFormatError,
    ModelInvalidError,
    PrintCompleteError,
    SemfabError,
    SolverFailure,
    WellPosednessError,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotationParseError",
    "BasePointError",
    "BindError",
    "CalibrationError",
    "MeshFormatError",
    "ModelInvalidError",
    "PrintCompleteError",
    "SemfabError",
    "SolverFailure",
    "WellPosednessError",
    "__version__",
]
