"""Hot loops behind the layer algebra and the box utilities.

Every kernel exists twice: a pure-numpy reference and a numba ``@njit``
version. The active set is chosen once at import time. Set ``IADN_NUMBA=0``
to force the numpy path (or run without numba installed). Both paths
perform the same floating-point operations in the same order per output
element, so results are bit-identical across backends.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("IADN_NUMBA", "1").strip() != "0"
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference kernels
# ---------------------------------------------------------------------------


def im2col_numpy(xp, kh, kw, stride, ho, wo):
    """Unfold a padded HWC array into (ho*wo, kh*kw*C) patch rows."""
    c = xp.shape[2]
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[: (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, kh * kw * c)


def col2im_numpy(cols, hp, wp, c, kh, kw, stride, ho, wo):
    """Adjoint of :func:`im2col_numpy`: scatter-add patch rows back."""
    out = np.zeros((hp, wp, c), dtype=cols.dtype)
    cols = cols.reshape(ho, wo, kh, kw, c)
    for di in range(kh):
        for dj in range(kw):
            out[di : di + (ho - 1) * stride + 1 : stride, dj : dj + (wo - 1) * stride + 1 : stride] += cols[
                :, :, di, dj
            ]
    return out


def maxpool_forward_numpy(x, k, stride, ho, wo):
    win = sliding_window_view(x, (k, k), axis=(0, 1))
    win = win[: (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    flat = win.reshape(ho, wo, x.shape[2], k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool_backward_numpy(g, arg, h, w, k, stride):
    ho, wo, c = g.shape
    dx = np.zeros((h, w, c), dtype=g.dtype)
    ii, jj, cc = np.indices((ho, wo, c))
    rows = ii * stride + arg // k
    cols = jj * stride + arg % k
    np.add.at(dx, (rows.ravel(), cols.ravel(), cc.ravel()), g.ravel())
    return dx


def iou_matrix_numpy(a, b):
    """Pairwise IoU of (n,4) and (m,4) boxes in (x, y, w, h) form."""
    ax, ay = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax + a[:, 2:3], ay + a[:, 3:4]
    bx, by = b[None, :, 0], b[None, :, 1]
    bx2, by2 = bx + b[None, :, 2], by + b[None, :, 3]
    iw = np.maximum(0.0, np.minimum(ax2, bx2) - np.maximum(ax, bx))
    ih = np.maximum(0.0, np.minimum(ay2, by2) - np.maximum(ay, by))
    inter = iw * ih
    # areas from the same corner differences, so identical boxes give exactly 1
    return inter / ((ax2 - ax) * (ay2 - ay) + (bx2 - bx) * (by2 - by) - inter)


def nms_keep_numpy(boxes, thresh):
    """Greedy suppression over boxes already sorted by descending score."""
    n = boxes.shape[0]
    suppressed = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        if suppressed[i]:
            continue
        rest = iou_matrix_numpy(boxes[i : i + 1], boxes[i + 1 :])[0]
        suppressed[i + 1 :] |= rest > thresh
    return ~suppressed


def sgd_update_numpy(p, g, v, momentum, step, decay):
    """In-place ``v = momentum*v - step*g - decay*p; p += v``.

    Scalars must already carry the parameter dtype so both backends round
    identically.
    """
    v *= momentum
    v -= step * g
    v -= decay * p
    p += v


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def im2col_numba(xp, kh, kw, stride, ho, wo):
        c = xp.shape[2]
        out = np.empty((ho * wo, kh * kw * c), dtype=xp.dtype)
        for i in range(ho):
            for j in range(wo):
                r = i * wo + j
                for di in range(kh):
                    for dj in range(kw):
                        base = (di * kw + dj) * c
                        for ch in range(c):
                            out[r, base + ch] = xp[i * stride + di, j * stride + dj, ch]
        return out

    @njit(cache=True)
    def col2im_numba(cols, hp, wp, c, kh, kw, stride, ho, wo):
        out = np.zeros((hp, wp, c), dtype=cols.dtype)
        for di in range(kh):
            for dj in range(kw):
                base = (di * kw + dj) * c
                for i in range(ho):
                    for j in range(wo):
                        r = i * wo + j
                        for ch in range(c):
                            out[i * stride + di, j * stride + dj, ch] += cols[r, base + ch]
        return out

    @njit(cache=True)
    def maxpool_forward_numba(x, k, stride, ho, wo):
        c = x.shape[2]
        out = np.empty((ho, wo, c), dtype=x.dtype)
        arg = np.empty((ho, wo, c), dtype=np.int64)
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    best = x[i * stride, j * stride, ch]
                    best_at = 0
                    for di in range(k):
                        for dj in range(k):
                            v = x[i * stride + di, j * stride + dj, ch]
                            if v > best:
                                best = v
                                best_at = di * k + dj
                    out[i, j, ch] = best
                    arg[i, j, ch] = best_at
        return out, arg

    @njit(cache=True)
    def maxpool_backward_numba(g, arg, h, w, k, stride):
        ho, wo, c = g.shape
        dx = np.zeros((h, w, c), dtype=g.dtype)
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    a = arg[i, j, ch]
                    dx[i * stride + a // k, j * stride + a % k, ch] += g[i, j, ch]
        return dx

    @njit(cache=True)
    def _iou_pair(ax, ay, aw, ah, bx, by, bw, bh):
        ax2 = ax + aw
        ay2 = ay + ah
        bx2 = bx + bw
        by2 = by + bh
        iw = max(0.0, min(ax2, bx2) - max(ax, bx))
        ih = max(0.0, min(ay2, by2) - max(ay, by))
        inter = iw * ih
        return inter / ((ax2 - ax) * (ay2 - ay) + (bx2 - bx) * (by2 - by) - inter)

    @njit(cache=True)
    def iou_matrix_numba(a, b):
        n = a.shape[0]
        m = b.shape[0]
        out = np.empty((n, m), dtype=np.float64)
        for i in range(n):
            for j in range(m):
                out[i, j] = _iou_pair(a[i, 0], a[i, 1], a[i, 2], a[i, 3], b[j, 0], b[j, 1], b[j, 2], b[j, 3])
        return out

    @njit(cache=True)
    def nms_keep_numba(boxes, thresh):
        n = boxes.shape[0]
        suppressed = np.zeros(n, dtype=np.bool_)
        for i in range(n):
            if suppressed[i]:
                continue
            for j in range(i + 1, n):
                if suppressed[j]:
                    continue
                v = _iou_pair(
                    boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3],
                    boxes[j, 0], boxes[j, 1], boxes[j, 2], boxes[j, 3],
                )
                if v > thresh:
                    suppressed[j] = True
        return ~suppressed

    @njit(cache=True)
    def _sgd_update_flat(p, g, v, momentum, step, decay):
        for i in range(p.shape[0]):
            vi = v[i] * momentum
            vi = vi - step * g[i]
            vi = vi - decay * p[i]
            v[i] = vi
            p[i] = p[i] + vi

    def sgd_update_numba(p, g, v, momentum, step, decay):
        _sgd_update_flat(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), v.reshape(-1), momentum, step, decay)


NUMPY_KERNELS = {
    "im2col": im2col_numpy,
    "col2im": col2im_numpy,
    "maxpool_forward": maxpool_forward_numpy,
    "maxpool_backward": maxpool_backward_numpy,
    "iou_matrix": iou_matrix_numpy,
    "nms_keep": nms_keep_numpy,
    "sgd_update": sgd_update_numpy,
}

if HAS_NUMBA:
    NUMBA_KERNELS = {
        "im2col": im2col_numba,
        "col2im": col2im_numba,
        "maxpool_forward": maxpool_forward_numba,
        "maxpool_backward": maxpool_backward_numba,
        "iou_matrix": iou_matrix_numba,
        "nms_keep": nms_keep_numba,
        "sgd_update": sgd_update_numba,
    }
else:  # pragma: no cover
    NUMBA_KERNELS = {}

_active = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

im2col = _active["im2col"]
col2im = _active["col2im"]
maxpool_forward = _active["maxpool_forward"]
maxpool_backward = _active["maxpool_backward"]
iou_matrix = _active["iou_matrix"]
nms_keep = _active["nms_keep"]
sgd_update = _active["sgd_update"]
