# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Semantics must match ``pimi._kernels_py`` bit for bit."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t i64


def scatter_add_rows(double[:, ::1] out, const i64[::1] idx, const double[:, ::1] src):
    cdef Py_ssize_t i, j, row
    cdef Py_ssize_t m = idx.shape[0], d = src.shape[1], nrows = out.shape[0]
    if src.shape[0] != m or out.shape[1] != d:
        raise ValueError("scatter_add_rows: shape mismatch")
    for i in range(m):
        row = idx[i]
        if row < 0 or row >= nrows:
            raise IndexError(f"row index {row} out of range for {nrows} rows")
        for j in range(d):
            out[row, j] += src[i, j]
    return out


def bin_accumulate(const double[:, ::1] weights, const i64[:, ::1] idx, Py_ssize_t nbins):
    cdef Py_ssize_t r, j, b
    cdef Py_ssize_t rows = weights.shape[0], m = weights.shape[1]
    if idx.shape[0] != rows or idx.shape[1] != m:
        raise ValueError("bin_accumulate: shape mismatch")
    out_arr = np.zeros((rows, nbins), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for r in range(rows):
        for j in range(m):
            b = idx[r, j]
            if b < 0 or b >= nbins:
                raise IndexError(f"bin {b} out of range for {nbins} bins")
            out[r, b] += weights[r, j]
    return out_arr


def interval_matrices(const i64[:, ::1] timestamps, const cnp.uint8_t[:, ::1] mask, i64 p):
    cdef Py_ssize_t bsz = timestamps.shape[0], n = timestamps.shape[1]
    cdef Py_ssize_t s, a, b
    cdef i64 diff, days
    out_arr = np.empty((bsz, n, n), dtype=np.int64)
    cdef i64[:, :, ::1] out = out_arr
    for s in range(bsz):
        for a in range(n):
            for b in range(n):
                if not mask[s, a] or not mask[s, b]:
                    out[s, a, b] = p
                    continue
                diff = timestamps[s, a] - timestamps[s, b]
                if diff < 0:
                    diff = -diff
                days = diff // 86400
                out[s, a, b] = days if days < p else p
    return out_arr


cdef inline bint _better(double sa, i64 ia, double sb, i64 ib) nogil:
    return sa > sb or (sa == sb and ia < ib)


def topn_rows(const double[:, ::1] scores, Py_ssize_t topn, i64 offset=0):
    """Top-``topn`` column indices per row, score descending, ties to the smaller index."""
    cdef Py_ssize_t rows = scores.shape[0], cols = scores.shape[1]
    cdef Py_ssize_t r, c, pos, filled
    cdef double s
    if topn > cols or topn < 1:
        raise ValueError(f"topn={topn} must be in [1, {cols}]")
    idx_arr = np.empty((rows, topn), dtype=np.int64)
    val_arr = np.empty((rows, topn), dtype=np.float64)
    cdef i64[:, ::1] idx = idx_arr
    cdef double[:, ::1] val = val_arr
    for r in range(rows):
        filled = 0
        for c in range(cols):
            s = scores[r, c]
            if filled == topn and not _better(s, c, val[r, topn - 1], idx[r, topn - 1]):
                continue
            pos = filled if filled < topn else topn - 1
            while pos > 0 and _better(s, c, val[r, pos - 1], idx[r, pos - 1]):
                val[r, pos] = val[r, pos - 1]
                idx[r, pos] = idx[r, pos - 1]
                pos -= 1
            val[r, pos] = s
            idx[r, pos] = c
            if filled < topn:
                filled += 1
    if offset:
        idx_arr += offset
    return idx_arr, val_arr
