"""Input checking shared by the estimators."""

from __future__ import annotations

import numpy as np


def check_images(X, name: str = "X", allow_single: bool = False) -> np.ndarray:
    """Return ``X`` as a float64 (N, H, W, 3) array with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if allow_single and X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (n_samples, H, W, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]; rescale raw pixels first")
    return X


def check_masks(y, X: np.ndarray, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 4 and y.shape[-1] == 1:
        y = y[..., 0]
    if y.shape != X.shape[:3]:
        raise ValueError(f"{name} must have shape {X.shape[:3]}, got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return y.astype(np.float64)


def check_labels(y, n_samples: int, n_classes: int, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"{name} must be 1-D with {n_samples} entries, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError(f"{name} must hold integer class indices")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"{name} class indices must lie in [0, {n_classes})")
    return y.astype(np.int64)


def check_probability_blocks(P, block: int, atol: float = 1e-6, name: str = "X") -> np.ndarray:
    """Every consecutive ``block``-wide column group of each row must sum to one."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] % block:
        raise ValueError(f"{name} must be 2-D with a multiple of {block} columns, got {P.shape}")
    sums = P.reshape(P.shape[0], -1, block).sum(axis=2)
    if not np.allclose(sums, 1.0, atol=atol, rtol=0):
        raise ValueError(f"{name} probability blocks do not sum to 1")
    if P.min() < -atol:
        raise ValueError(f"{name} has negative probabilities")
    return P
