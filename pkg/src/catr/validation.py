"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np


def check_binary(t, name: str = "t") -> np.ndarray:
    arr = np.asarray(t)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must contain only 0/1 values")
    return arr.astype(np.uint8)


def check_open_unit_interval(p, name: str = "p") -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any((arr <= 0) | (arr >= 1)):
        raise ValueError(f"{name} must lie strictly inside (0, 1); clip upstream")
    return arr


def check_consistent_length(*arrays) -> int:
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise ValueError(f"inputs have inconsistent lengths: {sorted(lengths)}")
    return lengths.pop() if lengths else 0


def check_both_arms(t, name: str = "t") -> None:
    t = np.asarray(t)
    if t.size == 0 or t.min() == t.max():
        raise ValueError(f"{name} contains a single treatment arm; both arms are required")
