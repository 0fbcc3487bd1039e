"""Numba-jitted segment/scatter kernels.

Default backend when numba imports cleanly. Loops are sequential (no
prange) so accumulation order matches the numpy backend and results stay
deterministic regardless of HGCONV_THREADS.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def _scatter_add_rows(out, ids, updates):
    for i in range(ids.shape[0]):
        row = ids[i]
        for j in range(updates.shape[1]):
            out[row, j] += updates[i, j]


@njit(cache=True)
def _segment_max(out, seg_ids, values):
    for i in range(seg_ids.shape[0]):
        row = seg_ids[i]
        for j in range(values.shape[1]):
            if values[i, j] > out[row, j]:
                out[row, j] = values[i, j]


def scatter_add_rows(out, ids, updates):
    _scatter_add_rows(out, ids, updates)
    return out


def segment_sum(values, seg_ids, num_segments):
    out = np.zeros((num_segments, values.shape[1]), dtype=np.float64)
    _scatter_add_rows(out, seg_ids, values)
    return out


def segment_max(values, seg_ids, num_segments):
    out = np.full((num_segments, values.shape[1]), -np.inf, dtype=np.float64)
    _segment_max(out, seg_ids, values)
    return out
