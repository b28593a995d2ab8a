"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature
and bit-identical results; the accumulation order in ``col2im`` is fixed
(kernel tap ascending) so both backends sum in the same sequence.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kernel, stride, out_len):
    """Unfold a padded (N, C, Lp) signal into (N, out_len, C*kernel) patches."""
    n, c, _ = xp.shape
    win = sliding_window_view(xp, kernel, axis=2)[:, :, : (out_len - 1) * stride + 1 : stride, :]
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(n, out_len, c * kernel)


def col2im(dcols, channels, kernel, stride, padded_len):
    """Scatter-add (N, out_len, C*kernel) patch gradients back to (N, C, Lp)."""
    n, out_len, _ = dcols.shape
    d = dcols.reshape(n, out_len, channels, kernel)
    dxp = np.zeros((n, channels, padded_len), dtype=dcols.dtype)
    stop = (out_len - 1) * stride + 1
    for k in range(kernel):
        dxp[:, :, k : k + stop : stride] += d[:, :, :, k].transpose(0, 2, 1)
    return dxp


def topk_indices(flat, k):
    """Ascending flat indices of the k largest |values|; ties go to the lowest index."""
    mags = np.abs(flat)
    n = mags.shape[0]
    if k >= n:
        return np.arange(n, dtype=np.uint32)
    thresh = np.partition(mags, n - k)[n - k]
    above = np.flatnonzero(mags > thresh)
    need = k - above.shape[0]
    at = np.flatnonzero(mags == thresh)[:need]
    return np.sort(np.concatenate([above, at])).astype(np.uint32)
