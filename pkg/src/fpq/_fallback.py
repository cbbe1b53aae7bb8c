"""Pure-numpy implementations of the hot kernels.

Same signatures as the compiled ``_kernels`` module; results are written into
caller-provided output arrays.  Arithmetic is ordered so both backends
produce bit-identical results.
"""

import numpy as np

INT_MODE = 0
FP_MODE = 1


def _nearest_magnitude(a, mags, mcodes):
    n = len(mags)
    k = np.clip(np.searchsorted(mags, a, side="left"), 1, n - 1)
    lo = k - 1
    d_lo = a - mags[lo]
    d_hi = mags[k] - a
    c_lo = mcodes[lo]
    c_hi = mcodes[k]
    prefer_hi = ((c_hi & 1) == 0) & ((c_lo & 1) == 1)
    take_hi = (d_hi < d_lo) | ((d_hi == d_lo) & prefer_hi)
    return np.where(take_hi, c_hi, c_lo)


def encode_nearest(x, mags, mcodes, sign_mask, out):
    mc = _nearest_magnitude(np.abs(x), mags, mcodes)
    out[:] = np.where(x < 0, mc | np.uint8(sign_mask), mc)


def gptq_columns(W1, Hinv1, start, stop, scale, zero, mode, qmin, qmax,
                 mags, mcodes, sign_mask, table, Q1, Err1, codes):
    """Sequentially quantize columns [start, stop) of the block ``W1``.

    Each column is rounded with the per-row ``scale``/``zero``; the scaled
    rounding error is pushed onto the remaining columns of the block.
    """
    b = W1.shape[1]
    for i in range(start, stop):
        w = W1[:, i]
        if mode == INT_MODE:
            c = np.clip(np.rint(w / scale) + zero, qmin, qmax)
            q = scale * (c - zero)
        else:
            c = np.empty(w.shape, dtype=np.uint8)
            encode_nearest(w / scale, mags, mcodes, sign_mask, c)
            q = scale * table[c]
        err = (w - q) / Hinv1[i, i]
        if i + 1 < b:
            W1[:, i + 1:] -= err[:, None] * Hinv1[i, i + 1:][None, :]
        Q1[:, i] = q
        Err1[:, i] = err
        codes[:, i] = c
