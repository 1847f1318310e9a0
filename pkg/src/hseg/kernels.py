"""Hot numeric kernels with two interchangeable implementations.

Each kernel exists as a numba ``@njit`` function and as a pure-numpy
function with identical signatures. ``HSEG_BACKEND`` picks one at import:

    HSEG_BACKEND=numba   compiled loops (default when numba imports)
    HSEG_BACKEND=numpy   vectorised numpy / BLAS

Both backends are deterministic. They are not bit-identical to each other
because they sum in different orders.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_requested = os.environ.get("HSEG_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ImportError(f"HSEG_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
if _requested == "numba" and not HAVE_NUMBA:
    raise ImportError("HSEG_BACKEND=numba but numba is not importable")

BACKEND = _requested or ("numba" if HAVE_NUMBA else "numpy")


# ---------------------------------------------------------------------------
# numpy implementations


def _windows(xp, kh, kw, stride):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward_np(xp, w, b, stride):
    """Cross-correlate an already padded input. Returns ``[N, F, Ho, Wo]``."""
    _, _, kh, kw = w.shape
    cols = _windows(xp, kh, kw, stride)  # N, C, Ho, Wo, kh, kw
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, F
    out += b
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_np(xp, w, dout, stride):
    """Gradients of conv2d_forward w.r.t. the padded input and the kernel."""
    _, _, kh, kw = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    cols = _windows(xp, kh, kw, stride)
    dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3])).astype(xp.dtype, copy=False)
    dcols = np.tensordot(dout, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    dxp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += (
                dcols[..., u, v].transpose(0, 3, 1, 2)
            )
    return dxp, dw


def maxpool2_forward_np(x):
    """2x2 max pooling. Returns the pooled map and the in-window argmax (0..3)."""
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    # np.argmax returns the first maximal index, i.e. row-major first on ties
    idx = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, idx


def maxpool2_backward_np(dout, idx):
    n, c, ho, wo = dout.shape
    dwin = np.zeros((n, c, ho, wo, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None].astype(np.intp), dout[..., None], axis=-1)
    dwin = dwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dwin.reshape(n, c, 2 * ho, 2 * wo)


def min_sq_dists_np(a, b, chunk=1024):
    """For each row of ``a`` the smallest squared Euclidean distance to ``b``."""
    out = np.empty(len(a), dtype=np.float64)
    for start in range(0, len(a), chunk):
        blk = a[start:start + chunk]
        dx = blk[:, None, 0] - b[None, :, 0]
        dy = blk[:, None, 1] - b[None, :, 1]
        out[start:start + chunk] = (dx * dx + dy * dy).min(axis=1)
    return out


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, kh, kw, stride, ho, wo):
        n_img, n_ch = xp.shape[0], xp.shape[1]
        cols = np.empty((n_img * ho * wo, n_ch * kh * kw), dtype=xp.dtype)
        for n in range(n_img):
            for i in range(ho):
                for j in range(wo):
                    r = (n * ho + i) * wo + j
                    q = 0
                    for c in range(n_ch):
                        for u in range(kh):
                            for v in range(kw):
                                cols[r, q] = xp[n, c, i * stride + u, j * stride + v]
                                q += 1
        return cols

    @njit(cache=True)
    def _col2im_nb(dcols, shape, kh, kw, stride, ho, wo):
        dxp = np.zeros(shape, dtype=dcols.dtype)
        n_img, n_ch = shape[0], shape[1]
        for n in range(n_img):
            for i in range(ho):
                for j in range(wo):
                    r = (n * ho + i) * wo + j
                    q = 0
                    for c in range(n_ch):
                        for u in range(kh):
                            for v in range(kw):
                                dxp[n, c, i * stride + u, j * stride + v] += dcols[r, q]
                                q += 1
        return dxp

    @njit(cache=True)
    def conv2d_forward_nb(xp, w, b, stride):
        n_img = xp.shape[0]
        n_f, n_ch, kh, kw = w.shape
        ho = (xp.shape[2] - kh) // stride + 1
        wo = (xp.shape[3] - kw) // stride + 1
        cols = _im2col_nb(xp, kh, kw, stride, ho, wo)
        wmat = np.ascontiguousarray(w.reshape(n_f, n_ch * kh * kw).T)
        out = np.dot(cols, wmat)  # N*Ho*Wo, F
        res = np.empty((n_img, n_f, ho, wo), dtype=xp.dtype)
        for n in range(n_img):
            for i in range(ho):
                for j in range(wo):
                    r = (n * ho + i) * wo + j
                    for f in range(n_f):
                        res[n, f, i, j] = out[r, f] + b[f]
        return res

    @njit(cache=True)
    def conv2d_backward_nb(xp, w, dout, stride):
        n_img = xp.shape[0]
        n_f, n_ch, kh, kw = w.shape
        ho = dout.shape[2]
        wo = dout.shape[3]
        cols = _im2col_nb(xp, kh, kw, stride, ho, wo)
        gmat = np.empty((n_img * ho * wo, n_f), dtype=dout.dtype)
        for n in range(n_img):
            for i in range(ho):
                for j in range(wo):
                    r = (n * ho + i) * wo + j
                    for f in range(n_f):
                        gmat[r, f] = dout[n, f, i, j]
        dw = np.dot(gmat.T.copy(), cols).reshape(w.shape)
        wmat = np.ascontiguousarray(w.reshape(n_f, n_ch * kh * kw))
        dcols = np.dot(gmat, wmat)
        dxp = _col2im_nb(dcols, xp.shape, kh, kw, stride, ho, wo)
        return dxp, dw

    @njit(cache=True)
    def maxpool2_forward_nb(x):
        n_img, n_ch, h, w = x.shape
        ho = h // 2
        wo = w // 2
        out = np.empty((n_img, n_ch, ho, wo), dtype=x.dtype)
        idx = np.empty((n_img, n_ch, ho, wo), dtype=np.int8)
        for n in range(n_img):
            for c in range(n_ch):
                for i in range(ho):
                    for j in range(wo):
                        best = x[n, c, 2 * i, 2 * j]
                        k = 0
                        for q in range(1, 4):
                            val = x[n, c, 2 * i + q // 2, 2 * j + q % 2]
                            if val > best:
                                best = val
                                k = q
                        out[n, c, i, j] = best
                        idx[n, c, i, j] = k
        return out, idx

    @njit(cache=True)
    def maxpool2_backward_nb(dout, idx):
        n_img, n_ch, ho, wo = dout.shape
        dx = np.zeros((n_img, n_ch, 2 * ho, 2 * wo), dtype=dout.dtype)
        for n in range(n_img):
            for c in range(n_ch):
                for i in range(ho):
                    for j in range(wo):
                        k = idx[n, c, i, j]
                        dx[n, c, 2 * i + k // 2, 2 * j + k % 2] = dout[n, c, i, j]
        return dx

    @njit(cache=True)
    def min_sq_dists_nb(a, b):
        out = np.empty(a.shape[0], dtype=np.float64)
        for i in range(a.shape[0]):
            best = np.inf
            for j in range(b.shape[0]):
                dx = a[i, 0] - b[j, 0]
                dy = a[i, 1] - b[j, 1]
                d = dx * dx + dy * dy
                if d < best:
                    best = d
            out[i] = best
        return out


IMPLEMENTATIONS = {
    "numpy": {
        "conv2d_forward": conv2d_forward_np,
        "conv2d_backward": conv2d_backward_np,
        "maxpool2_forward": maxpool2_forward_np,
        "maxpool2_backward": maxpool2_backward_np,
        "min_sq_dists": min_sq_dists_np,
    },
}
if HAVE_NUMBA:
    IMPLEMENTATIONS["numba"] = {
        "conv2d_forward": conv2d_forward_nb,
        "conv2d_backward": conv2d_backward_nb,
        "maxpool2_forward": maxpool2_forward_nb,
        "maxpool2_backward": maxpool2_backward_nb,
        "min_sq_dists": min_sq_dists_nb,
    }

_active = IMPLEMENTATIONS[BACKEND]
conv2d_forward = _active["conv2d_forward"]
conv2d_backward = _active["conv2d_backward"]
maxpool2_forward = _active["maxpool2_forward"]
maxpool2_backward = _active["maxpool2_backward"]
min_sq_dists = _active["min_sq_dists"]
