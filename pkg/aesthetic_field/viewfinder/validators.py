import math
from typing import Optional

import numpy as np
from django.core.exceptions import ValidationError


def _where(offset: Optional[int]) -> str:
    return f" (byte offset {offset})" if offset is not None else ""


def validate_finite(values, name: str, offset: Optional[int] = None):
    """Reject NaN and infinities"""
    if not np.all(np.isfinite(values)):
        raise ValidationError(
            f"Field '{name}' contains non-finite values{_where(offset)}",
            code='non_finite',
            params={'field': name, 'offset': offset},
        )


def validate_opacity(value: float, offset: Optional[int] = None):
    """Opacity must lie in [0, 1]"""
    if not (0.0 <= value <= 1.0):
        raise ValidationError(
            f"Opacity {value} outside [0, 1]{_where(offset)}",
            code='invalid_opacity',
            params={'value': value, 'offset': offset},
        )


def validate_scale(values, offset: Optional[int] = None):
    """Scales are standard deviations and must be strictly positive"""
    if np.any(np.asarray(values) <= 0.0):
        raise ValidationError(
            f"Non-positive scale {list(np.asarray(values, dtype=float))}{_where(offset)}",
            code='invalid_scale',
            params={'offset': offset},
        )


def validate_unit_quaternion(q, tolerance: float, offset: Optional[int] = None):
    """Quaternion norm must be 1 within tolerance"""
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > tolerance:
        raise ValidationError(
            f"Quaternion norm {norm} differs from 1 by more than {tolerance}{_where(offset)}",
            code='invalid_quaternion',
            params={'norm': norm, 'offset': offset},
        )


def validate_color(values, offset: Optional[int] = None):
    """Colors live in [0, 1]"""
    values = np.asarray(values)
    if np.any(values < 0.0) or np.any(values > 1.0):
        raise ValidationError(
            f"Color {list(values.astype(float))} outside [0, 1]{_where(offset)}",
            code='invalid_color',
            params={'offset': offset},
        )


def validate_score(value: Optional[float]):
    """Teacher scores are in [0, 1]; None means absent"""
    if value is None:
        return
    if not math.isfinite(value) or not (0.0 <= value <= 1.0):
        raise ValidationError(
            f"Score {value} outside [0, 1]",
            code='invalid_score',
            params={'value': value},
        )
