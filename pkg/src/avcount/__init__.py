"""Audiovisual repetitive-activity counting.

Two modality streams share a two-branch counting head; a cross-modal scorer
picks the frame-sampling stride per video, and a reliability gate fuses the
per-modality counts. Includes dataset tooling and a synthetic audiovisual
generator for desk-scale training and verification.
"""

from .metrics import CountLabel, CountPrediction, EvalReport, Modality, evaluate_report, mae, obo

__all__ = [
    "CountLabel",
    "CountPrediction",
    "EvalReport",
    "Modality",
    "evaluate_report",
    "mae",
    "obo",
]

__version__ = "0.1.0"
