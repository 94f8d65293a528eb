"""Argument checks shared by the public front-ends."""

from __future__ import annotations

import numbers

import numpy as np


def check_image(image, name="image", channels: int | None = 3, finite=True) -> np.ndarray:
    """Return ``image`` as float64, checking rank, channel count and finiteness."""
    arr = np.asarray(image, dtype=np.float64)
    if channels is None:
        if arr.ndim != 2:
            raise ValueError(f"{name} must be H x W, got shape {arr.shape}")
    elif arr.ndim != 3 or arr.shape[2] != channels:
        raise ValueError(f"{name} must be H x W x {channels}, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} is empty")
    if finite and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_mask(mask, shape, name="mask") -> np.ndarray:
    m = np.asarray(mask)
    if m.shape != tuple(shape):
        raise ValueError(f"{name} shape {m.shape} does not match {tuple(shape)}")
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"{name} must be binary")
        m = m.astype(bool)
    return m


def check_scalar(value, name, *, lo=None, hi=None, lo_open=False, integer=False):
    """Validate a finite number against optional bounds; returns it as int or float."""
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind):
        raise TypeError(f"{name} must be {'an integer' if integer else 'a number'}, got {type(value).__name__}")
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite")
    if lo is not None and (value <= lo if lo_open else value < lo):
        raise ValueError(f"{name} must be {'>' if lo_open else '>='} {lo}, got {value}")
    if hi is not None and value > hi:
        raise ValueError(f"{name} must be <= {hi}, got {value}")
    return int(value) if integer else float(value)


def check_views(views, count: int, name="views") -> list:
    out = [int(v) for v in views]
    bad = [v for v in out if not 0 <= v < count]
    if bad:
        raise IndexError(f"{name} {bad} outside the {count} available views")
    return out


def check_is_fitted(obj, attribute: str) -> None:
    if getattr(obj, attribute, None) is None:
        raise RuntimeError(f"{type(obj).__name__} is not fitted; call fit first")
