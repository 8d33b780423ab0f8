"""Compiled inner loops for the hot non-BLAS layer passes."""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def pool_forward(x, k, out, idx):
    # x (N,H,W,C) channels-last; non-overlapping k x k blocks.
    # channel loop innermost keeps memory access contiguous.
    n, ho, wo, c = out.shape
    for a in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    out[a, i, j, ch] = x[a, i * k, j * k, ch]
                    idx[a, i, j, ch] = 0
                for p in range(k):
                    for q in range(k):
                        if p == 0 and q == 0:
                            continue
                        t = p * k + q
                        for ch in range(c):
                            v = x[a, i * k + p, j * k + q, ch]
                            if v > out[a, i, j, ch]:
                                out[a, i, j, ch] = v
                                idx[a, i, j, ch] = t


@numba.njit(cache=True, nogil=True)
def pool_backward(g, idx, k, dx):
    # writes every covered cell of dx, so only an uncovered remainder needs zeroing
    n, ho, wo, c = g.shape
    for a in range(n):
        for i in range(ho):
            for p in range(k):
                for j in range(wo):
                    for q in range(k):
                        t = p * k + q
                        for ch in range(c):
                            dx[a, i * k + p, j * k + q, ch] = g[a, i, j, ch] if idx[a, i, j, ch] == t else 0.0


def maxpool_blocks(xcl: np.ndarray, k: int, ho: int, wo: int):
    n, _, _, c = xcl.shape
    out = np.empty((n, ho, wo, c), dtype=xcl.dtype)
    idx = np.empty((n, ho, wo, c), dtype=np.int32)
    pool_forward(xcl, k, out, idx)
    return out, idx


def maxpool_blocks_grad(gcl: np.ndarray, idx: np.ndarray, k: int, shape) -> np.ndarray:
    n, h, w, c = shape
    ho, wo = gcl.shape[1], gcl.shape[2]
    covered = ho * k == h and wo * k == w
    dx = np.empty(shape, dtype=gcl.dtype) if covered else np.zeros(shape, dtype=gcl.dtype)
    pool_backward(gcl, idx, k, dx)
    return dx


@numba.njit(cache=True, nogil=True)
def im2col_padded(x, kh, kw, stride, pad, cols):
    """cols[n,i,j,a,b,:] = xpad[n, i*stride+a, j*stride+b, :] with zero padding."""
    n, h, w, c = x.shape
    ho, wo = cols.shape[1], cols.shape[2]
    for s in range(n):
        for i in range(ho):
            for j in range(wo):
                for a in range(kh):
                    r = i * stride + a - pad
                    for b in range(kw):
                        q = j * stride + b - pad
                        if r < 0 or r >= h or q < 0 or q >= w:
                            for ch in range(c):
                                cols[s, i, j, a, b, ch] = 0
                        else:
                            for ch in range(c):
                                cols[s, i, j, a, b, ch] = x[s, r, q, ch]


@numba.njit(cache=True, nogil=True)
def col2im_padded(dcols, stride, pad, dx):
    """Adjoint of :func:`im2col_padded`: scatter-add patches, dropping the padding."""
    n, h, w, c = dx.shape
    ho, wo, kh, kw = dcols.shape[1], dcols.shape[2], dcols.shape[3], dcols.shape[4]
    for s in range(n):
        for i in range(ho):
            for a in range(kh):
                r = i * stride + a - pad
                if r < 0 or r >= h:
                    continue
                for j in range(wo):
                    for b in range(kw):
                        q = j * stride + b - pad
                        if q < 0 or q >= w:
                            continue
                        for ch in range(c):
                            dx[s, r, q, ch] += dcols[s, i, j, a, b, ch]


@numba.njit(cache=True, nogil=True)
def channel_moments(flat):
    """Per-column mean and biased variance of ``flat[m, c]`` (float64 accumulators)."""
    m, c = flat.shape
    s = np.zeros(c)
    for i in range(m):
        for j in range(c):
            s[j] += flat[i, j]
    mu = s / m
    q = np.zeros(c)
    for i in range(m):
        for j in range(c):
            d = flat[i, j] - mu[j]
            q[j] += d * d
    return mu, q / m


@numba.njit(cache=True, nogil=True)
def affine_columns(flat, mu, a, shift, relu, out):
    m, c = flat.shape
    for i in range(m):
        for j in range(c):
            v = (flat[i, j] - mu[j]) * a[j] + shift[j]
            out[i, j] = max(v, 0.0) if relu else v


@numba.njit(cache=True, nogil=True)
def bn_grad_sums(g, flat, mu, y, relu):
    """Column sums of ``g`` and of ``g * (flat - mu)``; with ``relu``, g is masked by ``y > 0``."""
    m, c = g.shape
    gs = np.zeros(c)
    gc = np.zeros(c)
    for i in range(m):
        for j in range(c):
            gij = g[i, j]
            if relu and y[i, j] <= 0:
                gij = 0.0
            gs[j] += gij
            gc[j] += gij * (flat[i, j] - mu[j])
    return gs, gc


@numba.njit(cache=True, nogil=True)
def bn_grad_input(g, flat, mu, y, relu, a, b, k, dx):
    # dx = a*g - b*(x - mu) - k, with g masked as in bn_grad_sums
    m, c = g.shape
    for i in range(m):
        for j in range(c):
            gij = g[i, j]
            if relu and y[i, j] <= 0:
                gij = 0.0
            dx[i, j] = a[j] * gij - b[j] * (flat[i, j] - mu[j]) - k[j]
