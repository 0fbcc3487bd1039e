"""Pure-numpy segment/scatter kernels.

Fallback backend; selected with HGCONV_BACKEND=numpy. All reductions run
in index order (ufunc.at is sequential), so results are deterministic.
"""

import numpy as np

NAME = "numpy"


def scatter_add_rows(out, ids, updates):
    """out[ids[i], :] += updates[i, :], accumulated in order of i."""
    np.add.at(out, ids, updates)
    return out


def segment_sum(values, seg_ids, num_segments):
    out = np.zeros((num_segments, values.shape[1]), dtype=np.float64)
    np.add.at(out, seg_ids, values)
    return out


def segment_max(values, seg_ids, num_segments):
    out = np.full((num_segments, values.shape[1]), -np.inf, dtype=np.float64)
    np.maximum.at(out, seg_ids, values)
    return out
