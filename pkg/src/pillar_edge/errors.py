"""Exception hierarchy. Every error carries a short machine-readable ``kind``."""

from __future__ import annotations


class PillarEdgeError(Exception):
    kind = "error"


class FormatError(PillarEdgeError):
    kind = "format"


class TruncationError(FormatError):
    kind = "truncated"


class ShapeError(PillarEdgeError, ValueError):
    kind = "shape"


class ConfigError(PillarEdgeError, ValueError):
    kind = "config"


class FingerprintError(PillarEdgeError):
    kind = "fingerprint"


class CalibrationError(PillarEdgeError):
    kind = "calibration"


class PlacementError(PillarEdgeError):
    kind = "placement"


class EvaluationError(PillarEdgeError):
    kind = "evaluation"


class PipelineError(PillarEdgeError):
    kind = "pipeline"

    def __init__(self, message: str, frame_id: int | None = None) -> None:
        super().__init__(message)
        self.frame_id = frame_id
