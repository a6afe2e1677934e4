"""Input validation helpers shared across the estimators."""

import numpy as np


def as_float_array(x, name="array"):
    """Coerce to a float64 ndarray and reject non-finite values."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf values")
    return arr


def check_matrix(X, name="X"):
    """Validate a 2-D sample matrix (n_samples, n_features)."""
    X = as_float_array(X, name)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D (n_samples, n_features), got shape {X.shape}")
    return X


def check_vector(x, dim=None, name="x"):
    """Validate a 1-D feature vector, optionally of a fixed dimension."""
    x = as_float_array(x, name)
    if x.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {x.shape}")
    if dim is not None and x.shape[0] != dim:
        raise ValueError(f"{name} has dimension {x.shape[0]}, expected {dim}")
    return x


def check_image(image, size=None, name="image"):
    """Validate an (H, W, 3) image tensor with values in [0, 1]."""
    img = as_float_array(image, name)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if size is not None and img.shape[:2] != (size, size):
        raise ValueError(
            f"{name} has spatial size {img.shape[0]}x{img.shape[1]}, expected {size}x{size}"
        )
    if img.min() < -1e-9 or img.max() > 1.0 + 1e-9:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return img


def check_mask(mask, shape=None, name="mask"):
    """Validate a binary (H, W) label mask with values in {0, 1}."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"{name} has shape {m.shape}, expected {tuple(shape)}")
    vals = np.unique(m)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"{name} must be binary with values in {{0, 1}}, found {vals[:8]}")
    return m.astype(np.uint8)


def check_labels_pm1(y, name="y"):
    """Validate binary labels in {-1, +1} with both classes present."""
    y = np.asarray(y, dtype=np.float64).ravel()
    if not np.isin(y, (-1.0, 1.0)).all():
        raise ValueError(f"{name} must contain only -1 and +1 labels")
    if not ((y > 0).any() and (y < 0).any()):
        raise ValueError(f"{name} must contain both classes; single-class input rejected")
    return y
