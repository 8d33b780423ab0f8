"""Layer primitives on :class:`~glom.tensor.Tensor`.

Image tensors are logically ``(N, C, H, W)`` but the convolution and pooling
kernels hand back channels-last memory viewed through a transpose.  Downstream
elementwise numpy ops preserve that layout, so the next im2col gather runs over
contiguous channel vectors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from . import tensor as _t
from .errors import DataError, DimensionError, ParameterError
from .tensor import Tensor, make_result

BN_MOMENTUM = 0.99
BN_EPS = 1e-5
CE_EPS = 1e-12


def _channels_last(x: np.ndarray) -> np.ndarray:
    return x.transpose(0, 2, 3, 1)


def _channels_first(x: np.ndarray) -> np.ndarray:
    return x.transpose(0, 3, 1, 2)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """(N,H,W,C) -> contiguous (N,H',W',kh,kw,C) zero-padded patch array."""
    n, _, _, c = x.shape
    if c < 8:
        # few channels: numpy's strided copy beats the per-pixel loop
        win = sliding_window_view(_pad_hw(x, padding, padding), (kh, kw), axis=(1, 2))
        if stride > 1:
            win = win[:, ::stride, ::stride]
        return np.ascontiguousarray(win[:, :ho, :wo].transpose(0, 1, 2, 4, 5, 3))
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    _kernels.im2col_padded(x, kh, kw, stride, padding, cols)
    return cols


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
    out[:, ph : ph + h, pw : pw + w] = x
    return out


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x[N,C,H,W]`` with ``kernels[F,C,kh,kw]`` (no bias)."""
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernels, got {x.shape} and {kernels.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise DimensionError(f"channel axis mismatch: input C={c}, kernels C={kc}")
    if kh > h + 2 * padding:
        raise DimensionError(f"kernel height {kh} exceeds padded input height {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise DimensionError(f"kernel width {kw} exceeds padded input width {w + 2 * padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    cols = _im2col(_channels_last(x.data), kh, kw, stride, padding, ho, wo).reshape(n * ho * wo, kh * kw * c)
    wmat = kernels.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, f)
    out = (cols @ wmat).reshape(n, ho, wo, f)
    need_dx = x.requires_grad

    def grad_fn(g):
        gmat = _channels_last(g).reshape(n * ho * wo, f)
        dw = (cols.T @ gmat).reshape(kh, kw, c, f).transpose(3, 2, 0, 1)
        if not need_dx:
            return None, dw
        dcols = (gmat @ wmat.T).reshape(n, ho, wo, kh, kw, c)
        dcl = np.zeros((n, h, w, c), dtype=dcols.dtype)
        _kernels.col2im_padded(dcols, stride, padding, dcl)
        return _channels_first(dcl), dw

    return make_result(_channels_first(out), (x, kernels), grad_fn, "conv2d")


def maxpool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max over ``window x window`` patches; ties route to the first in row-major order."""
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects (N,C,H,W), got {x.shape}")
    if window < 1 or stride < 1:
        raise ParameterError("window and stride must be positive")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} larger than spatial dims ({h}, {w})")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    k = window
    xcl = _channels_last(x.data)

    if stride == k:
        out, idx = _kernels.maxpool_blocks(xcl, k, ho, wo)
    else:
        win = sliding_window_view(xcl, (k, k), axis=(1, 2))[:, ::stride, ::stride]
        flat = win.reshape(n, ho, wo, c, k * k)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gcl = _channels_last(g)
        if stride == k:
            return (_channels_first(_kernels.maxpool_blocks_grad(gcl, idx, k, (n, h, w, c))),)
        dx = np.zeros((n, h, w, c), dtype=g.dtype)
        rows = np.arange(ho)[None, :, None, None] * stride + idx // k
        cols = np.arange(wo)[None, None, :, None] * stride + idx % k
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, None, None, :]
        np.add.at(dx, (nn, rows, cols, cc), gcl)
        return (_channels_first(dx),)

    return make_result(_channels_first(out), (x,), grad_fn, "maxpool2d")


@dataclass
class BatchNormState:
    """Per-channel running statistics updated in train mode."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    state: BatchNormState,
    mode: str = "train",
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
    relu: bool = False,
) -> Tensor:
    """Normalize each channel of ``x[N,C,...]`` (2-d or 4-d).

    ``relu=True`` fuses a following rectifier into the same pass; the result
    equals ``relu(batchnorm(...))`` exactly.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects (N,C) or (N,C,H,W), got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"scale/shift must have shape ({c},), got {scale.shape} and {shift.shape}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"unknown mode {mode!r}")
    four_d = x.ndim == 4
    xs = _channels_last(x.data) if four_d else x.data
    shp = xs.shape
    flat = xs.reshape(-1, c)
    m = flat.shape[0]
    gamma = scale.data

    if mode == "train":
        if x.shape[0] < 2:
            raise DataError(f"degenerate batch: train-mode batchnorm needs N >= 2, got {x.shape[0]}")
        mu, var = _kernels.channel_moments(flat)
        inv = 1.0 / np.sqrt(var + eps)
        state.running_mean *= momentum
        state.running_mean += (1.0 - momentum) * mu
        state.running_var *= momentum
        state.running_var += (1.0 - momentum) * var * (m / (m - 1))
    else:
        mu = state.running_mean.astype(np.float64)
        inv = 1.0 / np.sqrt(state.running_var.astype(np.float64) + eps)
    a = gamma * inv
    out = np.empty_like(flat)
    _kernels.affine_columns(flat, mu, a, shift.data.astype(np.float64), relu, out)

    def grad_fn(g):
        gs = _channels_last(g) if four_d else g
        gf = np.ascontiguousarray(gs).reshape(-1, c)
        gsum, gc = _kernels.bn_grad_sums(gf, flat, mu, out, relu)
        dgamma = gc * inv
        if mode == "train":
            # dx = a * (g - mean(g) - xhat * mean(g * xhat))
            b, k = a * inv * inv * gc / m, a * gsum / m
        else:
            b = k = np.zeros(c)
        dflat = np.empty_like(gf)
        _kernels.bn_grad_input(gf, flat, mu, out, relu, a, b, k, dflat)
        dx = dflat.reshape(shp)
        dt = scale.data.dtype
        return (_channels_first(dx) if four_d else dx), dgamma.astype(dt), gsum.astype(dt)

    res = out.reshape(shp)
    op = "batchnorm_relu" if relu else "batchnorm"
    return make_result(_channels_first(res) if four_d else res, (x, scale, shift), grad_fn, op)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0)
    return make_result(out, (x,), lambda g: (g * (xd > 0),), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ParameterError(f"unknown activation {kind!r}")


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ W.T + b`` for ``x[N,D]``, ``W[K,D]``, ``b[K]``."""
    if x.ndim != 2 or weights.ndim != 2:
        raise DimensionError(f"dense expects 2-d input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise DimensionError(f"inner dimension mismatch: input D={x.shape[1]}, weights D={weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} != ({weights.shape[0]},)")
    xd, wd = x.data, weights.data

    def grad_fn(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return make_result(xd @ wd.T + bias.data, (x, weights, bias), grad_fn, "dense")


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def dropout(x: Tensor, p: float, mode: str = "train", rng=None) -> Tensor:
    """Inverted dropout: survivors scaled by ``1/(1-p)`` so eval is the identity."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ParameterError(f"unknown mode {mode!r}")
    gen = _as_generator(rng)
    xd = x.data
    # draw in memory order so the mask shares the input's layout
    order = np.argsort([-s for s in xd.strides], kind="stable")
    draw = gen.random(tuple(xd.shape[i] for i in order), dtype=np.float32)
    keep = draw.transpose(np.argsort(order)) >= p
    mask = keep * xd.dtype.type(1.0 / (1.0 - p))
    return make_result(xd * mask, (x,), lambda g: (g * mask,), "dropout")


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis with max subtraction."""
    if x.shape[-1] < 2:
        raise DimensionError(f"softmax needs at least 2 classes, got {x.shape[-1]}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return make_result(s, (x,), grad_fn, "softmax")


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise DimensionError(f"{y.shape[0]} labels for {n} rows")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    return y


def cross_entropy(probs: Tensor, labels, eps: float = CE_EPS) -> Tensor:
    """Mean negative log-likelihood of the true class; probabilities floored at ``eps``."""
    if probs.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N,K) probabilities, got {probs.shape}")
    n, k = probs.shape
    y = _check_labels(labels, n, k)
    pd = probs.data
    if not np.allclose(pd.sum(axis=1), 1.0, atol=1e-6):
        raise ParameterError("probability rows must sum to 1")
    picked = pd[np.arange(n), y]
    if _t.debug_enabled() and np.any(picked < eps):
        warnings.warn("zero probability at true label clamped to eps", RuntimeWarning, stacklevel=2)
    clamped = np.maximum(picked, eps)
    loss = np.asarray(-np.mean(np.log(clamped)), dtype=pd.dtype)

    def grad_fn(g):
        dp = np.zeros_like(pd)
        dp[np.arange(n), y] = -g / (n * clamped)
        return (dp,)

    return make_result(loss, (probs,), grad_fn, "cross_entropy")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Fused softmax + cross-entropy; gradient is ``(probs - onehot)/N``."""
    n, k = logits.shape
    y = _check_labels(labels, n, k)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    loss = np.asarray(-np.mean(logp[np.arange(n), y]), dtype=logits.dtype)

    def grad_fn(g):
        d = np.exp(logp)
        d[np.arange(n), y] -= 1.0
        return (d * (g / n),)

    return make_result(loss, (logits,), grad_fn, "softmax_cross_entropy")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: ``(N,C,H,W) -> (N,C)``."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape

    def grad_fn(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy(),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), grad_fn, "global_avg_pool")


def flatten(x: Tensor) -> Tensor:
    return _t.reshape(x, (x.shape[0], -1))
