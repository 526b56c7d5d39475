"""Numpy implementations of the hot loops, used when the compiled module is absent.

Every function here produces bit-identical results to its counterpart in
``_kernels.pyx``: accumulations run in the same input order.
"""

import numpy as np


def scatter_add_rows(out, idx, src):
    if src.shape[0] != idx.shape[0] or out.shape[1] != src.shape[1]:
        raise ValueError("scatter_add_rows: shape mismatch")
    if idx.size and (idx.min() < 0 or idx.max() >= out.shape[0]):
        raise IndexError(f"row index out of range for {out.shape[0]} rows")
    np.add.at(out, idx, src)
    return out


def bin_accumulate(weights, idx, nbins):
    rows, m = weights.shape
    if idx.shape != weights.shape:
        raise ValueError("bin_accumulate: shape mismatch")
    if idx.size and (idx.min() < 0 or idx.max() >= nbins):
        raise IndexError(f"bin out of range for {nbins} bins")
    flat = (idx + nbins * np.arange(rows, dtype=np.int64)[:, None]).ravel()
    out = np.bincount(flat, weights=weights.ravel(), minlength=rows * nbins)
    return out.reshape(rows, nbins)


def interval_matrices(timestamps, mask, p):
    ts = timestamps.astype(np.int64)
    days = np.abs(ts[:, :, None] - ts[:, None, :]) // 86400
    out = np.minimum(days, p)
    valid = mask.astype(bool)
    out[~(valid[:, :, None] & valid[:, None, :])] = p
    return out


def topn_rows(scores, topn, offset=0):
    rows, cols = scores.shape
    if topn > cols or topn < 1:
        raise ValueError(f"topn={topn} must be in [1, {cols}]")
    cols_idx = np.arange(cols, dtype=np.int64)
    idx = np.empty((rows, topn), dtype=np.int64)
    for r in range(rows):
        # lexsort: last key is primary
        idx[r] = np.lexsort((cols_idx, -scores[r]))[:topn]
    val = np.take_along_axis(scores, idx, axis=1)
    return idx + offset, val
