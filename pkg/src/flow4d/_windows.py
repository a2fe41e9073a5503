"""Clipped-window sums over 3D volumes via integral images.

Windows are centred cubes clipped at the volume borders, so border voxels
aggregate over fewer samples instead of padded ones.
"""

from __future__ import annotations

import numpy as np


def window_sum(arr: np.ndarray, window: int) -> np.ndarray:
    """Sum of ``arr`` over a centred cubic window, clipped at the borders."""
    n = arr.shape
    hw = window // 2
    c = np.zeros((n[0] + 1, n[1] + 1, n[2] + 1), dtype=np.float64)
    c[1:, 1:, 1:] = np.asarray(arr, dtype=np.float64).cumsum(0).cumsum(1).cumsum(2)
    lo = [np.clip(np.arange(s) - hw, 0, s) for s in n]
    hi = [np.clip(np.arange(s) + hw + 1, 0, s) for s in n]

    def box(a, b, d):
        return c[np.ix_(a, b, d)]

    return (box(hi[0], hi[1], hi[2]) - box(lo[0], hi[1], hi[2])
            - box(hi[0], lo[1], hi[2]) - box(hi[0], hi[1], lo[2])
            + box(lo[0], lo[1], hi[2]) + box(lo[0], hi[1], lo[2])
            + box(hi[0], lo[1], lo[2]) - box(lo[0], lo[1], lo[2]))


def window_count(shape, window: int) -> np.ndarray:
    """Number of in-volume voxels inside each clipped window."""
    hw = window // 2
    per_axis = []
    for s in shape:
        idx = np.arange(s)
        per_axis.append(np.clip(idx + hw + 1, 0, s) - np.clip(idx - hw, 0, s))
    return (per_axis[0][:, None, None] * per_axis[1][None, :, None]
            * per_axis[2][None, None, :]).astype(np.float64)
