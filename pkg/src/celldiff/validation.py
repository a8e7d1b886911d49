"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array


def check_images(X, *, allow_empty: bool = False, value_range: tuple[float, float] | None = (-1.0, 1.0)) -> np.ndarray:
    """Validate an image batch and return it as float64 ``(N, C, H, W)``.

    ``(N, H, W)`` input gains a singleton channel axis. With ``value_range``
    set, pixels outside it are rejected.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64,
                    ensure_min_samples=0 if allow_empty else 1)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, H, W) or (N, C, H, W), got {X.shape}")
    if value_range is not None and X.size:
        lo, hi = value_range
        if X.min() < lo or X.max() > hi:
            raise ValueError(f"pixel values must lie in [{lo}, {hi}], got [{X.min():.3g}, {X.max():.3g}]")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integer class indices")
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise ValueError("labels must be non-negative")
    return y
