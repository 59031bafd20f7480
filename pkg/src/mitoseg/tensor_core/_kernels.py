"""Compiled convolution kernels.

All kernels take pre-padded inputs and write into caller-provided buffers.
They are dtype-generic (float32 and float64 compile separately).
"""

import numpy as np
from numba import njit

# reassociation lets the reductions vectorize; results stay deterministic
# for a given input because the compiled code path is fixed.
_REDUCE_FLAGS = {"reassoc", "contract", "nsz", "arcp"}


@njit(cache=True, nogil=True, fastmath={"contract"})
def conv_forward(xp, w, b, out):
    """out[n, o] = b[o] + sum_c corr(xp[n, c], w[o, c]) (valid correlation)."""
    n_batch, n_in, _, _ = xp.shape
    n_out, _, kh, kw = w.shape
    out_h = out.shape[2]
    out_w = out.shape[3]
    acc = np.empty((4, out_w), dtype=out.dtype)
    for n in range(n_batch):
        for h in range(out_h):
            for o0 in range(0, n_out, 4):
                no = min(4, n_out - o0)
                for t in range(no):
                    bv = b[o0 + t]
                    for q in range(out_w):
                        acc[t, q] = bv
                for c in range(n_in):
                    for ki in range(kh):
                        src = xp[n, c, h + ki]
                        for kj in range(kw):
                            if no == 4:
                                w0 = w[o0, c, ki, kj]
                                w1 = w[o0 + 1, c, ki, kj]
                                w2 = w[o0 + 2, c, ki, kj]
                                w3 = w[o0 + 3, c, ki, kj]
                                for q in range(out_w):
                                    s = src[q + kj]
                                    acc[0, q] += w0 * s
                                    acc[1, q] += w1 * s
                                    acc[2, q] += w2 * s
                                    acc[3, q] += w3 * s
                            else:
                                for t in range(no):
                                    wv = w[o0 + t, c, ki, kj]
                                    for q in range(out_w):
                                        acc[t, q] += wv * src[q + kj]
                for t in range(no):
                    for q in range(out_w):
                        out[n, o0 + t, h, q] = acc[t, q]
    return out


@njit(cache=True, nogil=True, fastmath=_REDUCE_FLAGS)
def conv_grad_weight(xp, g, gw):
    """gw[o, c, ki, kj] += sum_{n,h,q} g[n, o, h, q] * xp[n, c, h + ki, q + kj].

    ``gw`` is accumulated into, so pass a zeroed (ideally float64) buffer.
    """
    n_batch, n_in, _, _ = xp.shape
    n_out, _, kh, kw = gw.shape
    out_h = g.shape[2]
    out_w = g.shape[3]
    for n in range(n_batch):
        for h in range(out_h):
            for o0 in range(0, n_out, 4):
                no = min(4, n_out - o0)
                for c in range(n_in):
                    for ki in range(kh):
                        src = xp[n, c, h + ki]
                        if no == 4 and kw == 3:
                            # 4 output rows x 3 taps share each load of src
                            g0 = g[n, o0, h]
                            g1 = g[n, o0 + 1, h]
                            g2 = g[n, o0 + 2, h]
                            g3 = g[n, o0 + 3, h]
                            a00 = a01 = a02 = a10 = a11 = a12 = g0[0] * 0.0
                            a20 = a21 = a22 = a30 = a31 = a32 = g0[0] * 0.0
                            for q in range(out_w):
                                s0 = src[q]
                                s1 = src[q + 1]
                                s2 = src[q + 2]
                                v = g0[q]
                                a00 += v * s0
                                a01 += v * s1
                                a02 += v * s2
                                v = g1[q]
                                a10 += v * s0
                                a11 += v * s1
                                a12 += v * s2
                                v = g2[q]
                                a20 += v * s0
                                a21 += v * s1
                                a22 += v * s2
                                v = g3[q]
                                a30 += v * s0
                                a31 += v * s1
                                a32 += v * s2
                            gw[o0, c, ki, 0] += a00
                            gw[o0, c, ki, 1] += a01
                            gw[o0, c, ki, 2] += a02
                            gw[o0 + 1, c, ki, 0] += a10
                            gw[o0 + 1, c, ki, 1] += a11
                            gw[o0 + 1, c, ki, 2] += a12
                            gw[o0 + 2, c, ki, 0] += a20
                            gw[o0 + 2, c, ki, 1] += a21
                            gw[o0 + 2, c, ki, 2] += a22
                            gw[o0 + 3, c, ki, 0] += a30
                            gw[o0 + 3, c, ki, 1] += a31
                            gw[o0 + 3, c, ki, 2] += a32
                        else:
                            for t in range(no):
                                gr = g[n, o0 + t, h]
                                for kj in range(kw):
                                    s = gr[0] * 0.0
                                    for q in range(out_w):
                                        s += gr[q] * src[q + kj]
                                    gw[o0 + t, c, ki, kj] += s
    return gw


@njit(cache=True, nogil=True)
def upsample2x(x, out):
    """Half-pixel-center bilinear 2x; edge taps clamp to the border sample."""
    n_batch, n_ch, h, w = x.shape
    tmp = np.empty((2 * h, w), dtype=x.dtype)
    for n in range(n_batch):
        for c in range(n_ch):
            src = x[n, c]
            for i in range(h):
                up = max(i - 1, 0)
                dn = min(i + 1, h - 1)
                for j in range(w):
                    t = 0.75 * src[i, j]
                    tmp[2 * i, j] = t + 0.25 * src[up, j]
                    tmp[2 * i + 1, j] = t + 0.25 * src[dn, j]
            dst = out[n, c]
            for r in range(2 * h):
                row = tmp[r]
                for j in range(w):
                    lf = max(j - 1, 0)
                    rt = min(j + 1, w - 1)
                    t = 0.75 * row[j]
                    dst[r, 2 * j] = t + 0.25 * row[lf]
                    dst[r, 2 * j + 1] = t + 0.25 * row[rt]
    return out


@njit(cache=True, nogil=True)
def upsample2x_transpose(g, out):
    """Adjoint of :func:`upsample2x`: scatter each output gradient back to its taps."""
    n_batch, n_ch, h2, w2 = g.shape
    h = h2 // 2
    w = w2 // 2
    tmp = np.empty((h2, w), dtype=g.dtype)
    for n in range(n_batch):
        for c in range(n_ch):
            src = g[n, c]
            for r in range(h2):
                row = src[r]
                acc = tmp[r]
                for j in range(w):
                    acc[j] = 0.75 * (row[2 * j] + row[2 * j + 1])
                for j in range(w):
                    acc[max(j - 1, 0)] += 0.25 * row[2 * j]
                    acc[min(j + 1, w - 1)] += 0.25 * row[2 * j + 1]
            dst = out[n, c]
            for i in range(h):
                for j in range(w):
                    dst[i, j] = 0.75 * (tmp[2 * i, j] + tmp[2 * i + 1, j])
            for i in range(h):
                up = max(i - 1, 0)
                dn = min(i + 1, h - 1)
                for j in range(w):
                    dst[up, j] += 0.25 * tmp[2 * i, j]
                    dst[dn, j] += 0.25 * tmp[2 * i + 1, j]
    return out


@njit(cache=True, nogil=True)
def maxpool2x2(x, out, arg):
    """Window max; strict ``>`` keeps the first maximum in row-major scan order."""
    n_batch, n_ch, h2, w2 = out.shape
    for n in range(n_batch):
        for c in range(n_ch):
            for i in range(h2):
                r0 = x[n, c, 2 * i]
                r1 = x[n, c, 2 * i + 1]
                for j in range(w2):
                    best = r0[2 * j]
                    k = 0
                    if r0[2 * j + 1] > best:
                        best = r0[2 * j + 1]
                        k = 1
                    if r1[2 * j] > best:
                        best = r1[2 * j]
                        k = 2
                    if r1[2 * j + 1] > best:
                        best = r1[2 * j + 1]
                        k = 3
                    out[n, c, i, j] = best
                    arg[n, c, i, j] = k
    return out


@njit(cache=True, nogil=True)
def maxpool2x2_scatter(g, arg, out):
    n_batch, n_ch, h2, w2 = g.shape
    for n in range(n_batch):
        for c in range(n_ch):
            for i in range(h2):
                for j in range(w2):
                    k = arg[n, c, i, j]
                    out[n, c, 2 * i + k // 2, 2 * j + k % 2] = g[n, c, i, j]
    return out
