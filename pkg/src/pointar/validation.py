"""Input validation helpers for the estimator layer."""
from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

__all__ = ["check_clouds", "check_labels", "check_fitted"]


def check_clouds(X, min_points: int = 1) -> list[np.ndarray]:
    """Validate a batch of point clouds.

    Accepts an (N, M, 3) array or a sequence of (M_i, 3) arrays; returns a
    list of float64 (M_i, 3) arrays. Every cloud must be finite and carry
    at least ``min_points`` points.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        clouds = [X[i] for i in range(X.shape[0])]
    else:
        clouds = list(X)
    if len(clouds) == 0:
        raise ValueError("need at least one point cloud")
    out = []
    for i, cloud in enumerate(clouds):
        arr = np.asarray(cloud, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"cloud {i} must be (M, 3), got shape {arr.shape}")
        if arr.shape[0] < min_points:
            raise ValueError(
                f"cloud {i} has {arr.shape[0]} points; need at least {min_points}"
            )
        if not np.isfinite(arr).all():
            raise ValueError(f"cloud {i} contains non-finite coordinates")
        out.append(arr)
    return out


def check_labels(y, n_samples: int) -> np.ndarray:
    arr = np.asarray(y)
    if arr.shape != (n_samples,):
        raise ValueError(f"labels must be a length-{n_samples} vector, got {arr.shape}")
    return arr


def check_fitted(estimator, attribute: str) -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
