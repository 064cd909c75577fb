"""Input validation helpers shared by the functional API and the estimators."""

import numpy as np
import torch

from .exceptions import ArgumentError, NumericError


def check_image(x, name="image", dtype=np.float32):
    """Return ``x`` as a finite 2D array of ``dtype``."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 2:
        raise ArgumentError(f"{name} must be 2D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def check_mask(m, name="mask"):
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ArgumentError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if not np.isin(arr, (0, 1)).all():
        raise ArgumentError(f"{name} must be binary (values in {{0, 1}})")
    return arr.astype(np.uint8)


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise ArgumentError(
            f"shape mismatch: {names[0]} {np.shape(a)} vs {names[1]} {np.shape(b)}"
        )


def check_image_stack(X, name="X", divisor=1):
    """Validate a stack of images shaped (n, H, W); a single 2D image is promoted.

    ``divisor`` enforces H and W divisibility (for encoder/decoder depth).
    """
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ArgumentError(f"{name} must have shape (n, H, W), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ArgumentError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    h, w = arr.shape[1:]
    if h % divisor or w % divisor:
        raise ArgumentError(
            f"{name} spatial shape {(h, w)} must be divisible by {divisor}"
        )
    return arr


def check_unit_interval(value, name):
    if not 0.0 <= value <= 1.0:
        raise ArgumentError(f"{name} must lie in [0, 1], got {value}")
    return float(value)


def as_tensor(x, dtype=torch.float32):
    """2D array -> (1, 1, H, W) tensor; tensors of rank 2-4 are reshaped likewise."""
    if isinstance(x, torch.Tensor):
        t = x.to(dtype)
    else:
        t = torch.as_tensor(np.asarray(x), dtype=dtype)
    while t.dim() < 4:
        t = t.unsqueeze(0)
    return t


def require_finite(t, name):
    if not torch.isfinite(t).all():
        raise NumericError(f"{name} contains non-finite values", component=name)
    return t
