"""Small argument checkers used across the estimators and functional API."""

import math

from .exceptions import ConfigurationError, PreconditionError


def check_positive(name, value, *, integer=False, error=ConfigurationError):
    if integer and (isinstance(value, bool) or not isinstance(value, int)):
        raise error(f"{name} must be an integer, got {value!r}")
    if not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0:
        raise error(f"{name} must be > 0, got {value!r}")
    return value


def check_non_negative(name, value, *, integer=False, error=ConfigurationError):
    if integer and (isinstance(value, bool) or not isinstance(value, int)):
        raise error(f"{name} must be an integer, got {value!r}")
    if not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
        raise error(f"{name} must be >= 0, got {value!r}")
    return value


def check_interval(name, value, low, high, *, closed_low=True, closed_high=True,
                   error=ConfigurationError):
    ok_low = value >= low if closed_low else value > low
    ok_high = value <= high if closed_high else value < high
    if not (isinstance(value, (int, float)) and math.isfinite(value) and ok_low and ok_high):
        lb = "[" if closed_low else "("
        rb = "]" if closed_high else ")"
        raise error(f"{name} must lie in {lb}{low}, {high}{rb}, got {value!r}")
    return value


def check_choice(name, value, choices, *, error=ConfigurationError):
    if value not in choices:
        raise error(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_nonempty(name, seq, *, error=PreconditionError):
    if seq is None or len(seq) == 0:
        raise error(f"{name} must be non-empty")
    return seq
