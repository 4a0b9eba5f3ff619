"""
Rotary Position Embedding
Pairwise (adjacent-element) rotation and the two cache positioning schemes
"""

from enum import Enum
from typing import Sequence, Union

import numpy as np

from config import ROPE_BASE
from errors import EmptyInput, OddHeadDim
from kv_cache import KvSegment, TokenKv


class PositioningMode(str, Enum):
    # original token index of every entry
    ABSOLUTE = "absolute"
    # 0..len-1 in view order, shifting as the window moves
    WINDOW_RELATIVE = "window_relative"


def inverse_frequencies(head_dim: int, base: float = ROPE_BASE) -> np.ndarray:
    if head_dim % 2 != 0:
        raise OddHeadDim(f"head_dim must be even, got {head_dim}")
    i = np.arange(head_dim // 2, dtype=np.float64)
    return base ** (-2.0 * i / head_dim)


def rotate_batch(
    vectors: np.ndarray, positions: Union[np.ndarray, Sequence[float]], base: float = ROPE_BASE
) -> np.ndarray:
    """
    Rotate each row of `vectors` (n, d_h) by its own position

    Pair i of row r is turned by positions[r] * base^(-2i/d_h).
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[-1] % 2 != 0:
        raise OddHeadDim(f"head_dim must be even, got {vectors.shape[-1]}")
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inverse_frequencies(
        vectors.shape[-1], base
    )[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = vectors[:, 0::2], vectors[:, 1::2]

    out = np.empty_like(vectors)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


def apply_rotation(v: np.ndarray, position: float, base: float = ROPE_BASE) -> np.ndarray:
    """Rotated copy of one d_h vector at `position`; the norm is preserved"""
    v = np.asarray(v, dtype=np.float64)
    return rotate_batch(v[None, :], [position], base)[0]


def unrotate(
    v: np.ndarray, position: Union[float, np.ndarray, Sequence[float]], base: float = ROPE_BASE
) -> np.ndarray:
    """Undo the rotation: one vector at `position`, or rows (n, d_h) at n positions"""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        return apply_rotation(v, -position, base)
    return rotate_batch(v, -np.asarray(position, dtype=np.float64), base)



def positions_for(
    cache_view: Union[KvSegment, Sequence[TokenKv]], mode: PositioningMode
) -> np.ndarray:
    """Positions used to rotate a view's keys under the given positioning mode"""
    if isinstance(cache_view, KvSegment):
        stored = cache_view.positions
    else:
        stored = np.array([t.position for t in cache_view], dtype=np.int64)
    if len(stored) == 0:
        raise EmptyInput("positions_for needs a nonempty cache view")

    if PositioningMode(mode) is PositioningMode.ABSOLUTE:
        return stored.copy()
    return np.arange(len(stored), dtype=np.int64)
