"""Pure-numpy im2col / col2im using one strided slice per kernel offset."""

import numpy as np


def im2col(xp, kh, kw, stride, oh, ow):
    """Gather convolution patches from a padded NHWC array.

    Returns an array of shape (n, oh, ow, kh, kw, c).
    """
    n, _, _, c = xp.shape
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :]
    return cols


def col2im(dcols, xp_shape, stride):
    """Scatter-add patch gradients back into a padded NHWC gradient array."""
    _, oh, ow, kh, kw, _ = dcols.shape
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dcols[:, :, :, i, j, :]
    return dxp
