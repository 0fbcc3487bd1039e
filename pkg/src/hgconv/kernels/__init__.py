"""Hot index kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time from the HGCONV_BACKEND
environment variable: "numba" (default, falls back to numpy if numba is
unavailable) or "numpy". Both backends accumulate in the same sequential
order, so either satisfies the single-threaded determinism contract
(HGCONV_THREADS=1). See benchmarks/kernel_bench.py for a speed comparison.
"""

import os

_requested = os.environ.get("HGCONV_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise RuntimeError(
        f"HGCONV_BACKEND must be 'numba' or 'numpy', got {_requested!r}"
    )

if _requested == "numba":
    try:
        from . import numba_backend as _impl
    except ImportError:
        if "HGCONV_BACKEND" in os.environ:
            raise
        from . import numpy_backend as _impl
else:
    from . import numpy_backend as _impl

scatter_add_rows = _impl.scatter_add_rows
segment_sum = _impl.segment_sum
segment_max = _impl.segment_max


def backend_name() -> str:
    return _impl.NAME
