"""
Top-k selection with deterministic tie-breaking
"""

from typing import Sequence

import numpy as np

from errors import KTooLarge


def top_k_indices(scores: Sequence[float], k: int) -> np.ndarray:
    """
    Indices of the k largest scores, ascending

    Ties go to the lower index (stable sort on the negated scores).
    """
    arr = np.asarray(scores, dtype=np.float64).ravel()
    if k < 0:
        raise KTooLarge(f"k must be >= 0, got {k}")
    if k > arr.size:
        raise KTooLarge(f"k={k} exceeds {arr.size} candidates")
    order = np.argsort(-arr, kind="stable")
    return np.sort(order[:k])
