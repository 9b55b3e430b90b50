"""Input validation helpers shared by the estimators."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

__all__ = ["NotFittedError", "check_is_fitted", "check_images", "check_feature_maps", "check_scored_set"]


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def check_images(X, shape: Sequence[int] | None = None, name: str = "X") -> torch.Tensor:
    """Return ``X`` as a contiguous float32 tensor of shape (N, C, H, W).

    uint8 input is rescaled to [0, 1].  A single (C, H, W) image is promoted
    to a batch of one.
    """
    arr = _to_numpy(X)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must have shape (N, C, H, W), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if shape is not None and tuple(arr.shape[1:]) != tuple(shape):
        raise ValueError(f"{name} has per-sample shape {arr.shape[1:]}, expected {tuple(shape)}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return torch.from_numpy(np.ascontiguousarray(arr))


def check_feature_maps(F, shape: Sequence[int] | None = None, name: str = "features") -> torch.Tensor:
    return check_images(F, shape, name)


def check_scored_set(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(_to_numpy(scores), dtype=np.float64).ravel()
    y = np.asarray(_to_numpy(labels)).ravel()
    if s.size == 0:
        raise ValueError("empty scored set")
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    return s, y.astype(np.int8)
