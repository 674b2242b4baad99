"""Exceptions and small input-checking helpers shared across the package."""
from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class SingularityError(ValidationError):
    """Raised when a covariance is too close to singular to invert."""


class PropagationError(RuntimeError):
    """Raised when a denoiser produces non-finite output."""


class TrainingAbort(RuntimeError):
    """Raised by the divergence guard; carries the diagnostics collected so far."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def as_float_array(x, shape=None, name="array", finite=True):
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None:
        if len(shape) != arr.ndim or any(s is not None and s != a for s, a in zip(shape, arr.shape)):
            raise ValidationError(f"{name}: expected shape {shape}, got {arr.shape}")
    if finite and not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: contains non-finite values")
    return arr


def check_image(img, name="image", channels=3):
    """Return ``img`` as a float64 H x W x C array (or H x W when ``channels`` is None)."""
    arr = np.asarray(img, dtype=np.float64)
    if channels is None:
        if arr.ndim != 2:
            raise ValidationError(f"{name}: expected H x W array, got shape {arr.shape}")
    elif arr.ndim != 3 or arr.shape[2] != channels:
        raise ValidationError(f"{name}: expected H x W x {channels} array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: contains non-finite values")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {names[0]} {a.shape} vs {names[1]} {b.shape}")


def check_positive_int(value, name):
    if int(value) != value or value < 1:
        raise ValidationError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
