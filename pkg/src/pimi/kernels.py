"""Backend selection for the hot loops.

The compiled ``_kernels`` extension is used when it was built; otherwise the
numpy fallback in ``_kernels_py`` is loaded. Set ``PIMI_PURE_PYTHON=1`` to force
the fallback.
"""

import os

import numpy as np

if os.environ.get("PIMI_PURE_PYTHON", "") not in ("", "0"):
    from pimi import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from pimi import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        from pimi import _kernels_py as _impl

        BACKEND = "python"


def scatter_add_rows(out: np.ndarray, idx: np.ndarray, src: np.ndarray) -> np.ndarray:
    """In place ``out[idx[i]] += src[i]`` for every i, in order."""
    return _impl.scatter_add_rows(
        out, np.ascontiguousarray(idx, dtype=np.int64), np.ascontiguousarray(src, dtype=np.float64)
    )


def bin_accumulate(weights: np.ndarray, idx: np.ndarray, nbins: int) -> np.ndarray:
    """Row-wise histogram: ``out[r, idx[r, j]] += weights[r, j]``."""
    return _impl.bin_accumulate(
        np.ascontiguousarray(weights, dtype=np.float64),
        np.ascontiguousarray(idx, dtype=np.int64),
        nbins,
    )


def interval_matrices(timestamps: np.ndarray, mask: np.ndarray, p: int) -> np.ndarray:
    """Clamped pairwise day counts for a batch of windows; padded rows/cols get ``p``."""
    return _impl.interval_matrices(
        np.ascontiguousarray(timestamps, dtype=np.int64),
        np.ascontiguousarray(mask, dtype=np.uint8),
        int(p),
    )


def topn_rows(scores: np.ndarray, topn: int, offset: int = 0):
    """Per-row top-``topn`` (indices, scores); ties go to the smaller column index."""
    return _impl.topn_rows(np.ascontiguousarray(scores, dtype=np.float64), topn, offset)
