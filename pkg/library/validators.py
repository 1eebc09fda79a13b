from __future__ import annotations

import logging
import math
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


class ParameterDomainError(ValueError):
    """Raised when a physical parameter lies outside its valid domain."""


def ensure_positive(values: Mapping[str, float], context: str) -> None:
    for name, value in values.items():
        if value is None or not math.isfinite(value) or value <= 0:
            raise ParameterDomainError(
                f"{context}: '{name}' must be a finite positive number, got {value!r}"
            )


def ensure_non_negative(values: Mapping[str, float], context: str) -> None:
    for name, value in values.items():
        if value is None or not math.isfinite(value) or value < 0:
            raise ParameterDomainError(
                f"{context}: '{name}' must be a finite non-negative number, got {value!r}"
            )


def ensure_unit_interval(values: Mapping[str, float], context: str) -> None:
    """Check that every value lies in the half-open interval (0, 1]."""

    for name, value in values.items():
        if value is None or not math.isfinite(value) or not 0 < value <= 1:
            raise ParameterDomainError(
                f"{context}: '{name}' must lie in (0, 1], got {value!r}"
            )


def assert_columns(df: pd.DataFrame, expected: Sequence[str]) -> None:
    missing = [column for column in expected if column not in df.columns]
    if missing:
        raise ValueError(f"Missing columns: {missing}")


def ensure_not_null(df: pd.DataFrame, columns: Iterable[str], context: str) -> None:
    for column in columns:
        if column not in df.columns:
            continue
        if df[column].isna().any():
            raise ValueError(f"Null values found in column '{column}' for {context}")


def ensure_sorted(values: np.ndarray, context: str, *, strict: bool = False) -> None:
    if values.size < 2:
        return
    steps = np.diff(values)
    bad = steps <= 0 if strict else steps < 0
    if bad.any():
        index = int(np.argmax(bad)) + 1
        raise ValueError(f"{context} is not sorted at index {index}")


__all__ = [
    "ParameterDomainError",
    "assert_columns",
    "ensure_non_negative",
    "ensure_not_null",
    "ensure_positive",
    "ensure_sorted",
    "ensure_unit_interval",
]
