"""Input coercion helpers in the spirit of ``sklearn.utils.validation``.

Public entry points accept either model objects, decoded JSON, or raw JSON
text; these helpers turn all three into validated model objects.
"""

from __future__ import annotations

import numpy as np

from .model import (
    PatientSequence,
    StructuredReport,
    parse_report,
    parse_sequence,
    report_from_dict,
    sequence_from_dict,
    validate_report,
    validate_sequence,
)


def check_report(x) -> StructuredReport:
    if isinstance(x, StructuredReport):
        return validate_report(x)
    if isinstance(x, dict):
        return report_from_dict(x)
    if isinstance(x, (str, bytes, bytearray)):
        return parse_report(x)
    raise TypeError(f"expected a StructuredReport, dict or JSON text, got {type(x).__name__}")


def check_sequence(x) -> PatientSequence:
    if isinstance(x, PatientSequence):
        return validate_sequence(x)
    if isinstance(x, dict):
        return sequence_from_dict(x)
    if isinstance(x, (str, bytes, bytearray)):
        return parse_sequence(x)
    raise TypeError(f"expected a PatientSequence, dict or JSON text, got {type(x).__name__}")


def check_score_matrix(scores, name: str = "scores") -> np.ndarray:
    """Return ``scores`` as a finite, non-negative 2-D float array."""
    arr = np.asarray(scores, dtype=float)
    if arr.ndim != 2:
        if arr.size == 0:
            return arr.reshape(0, 0)
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    if np.any(arr < 0):
        raise ValueError(f"{name} contains negative values")
    return arr
