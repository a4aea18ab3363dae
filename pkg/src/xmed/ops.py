"""Neural layer primitives with hand-written forward and backward passes.

Every operation works on dense rank-4 arrays laid out (batch, channel,
height, width) and is a pure function of its inputs: forward passes return
``(output, cache)`` and the matching backward pass consumes the cache to
produce exact vector-Jacobian products. Nothing here owns global state, so
ops can run concurrently on disjoint data.

Arrays keep the dtype they come in with (float32 in production models;
gradient checks re-run everything in float64).
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError, StaleCacheError


def as_tensor4(x, name="tensor"):
    """Validate x as a rank-4 array with all dims >= 1."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 (n,c,h,w)", got=x.shape,
                         expected=("n", "c", "h", "w"))
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension", got=x.shape,
                         expected=("n>=1", "c>=1", "h>=1", "w>=1"))
    return x


@dataclass
class LayerCache:
    """Forward intermediates needed by one backward call.

    A cache is only valid for the immediately preceding forward call;
    ``out_shape`` lets the backward pass detect stale or mismatched use.
    """

    kind: str
    out_shape: tuple
    data: tuple

    def check(self, grad_out, kind):
        if self is None:
            raise StaleCacheError(f"{kind}_backward called without a cache")
        if self.kind != kind:
            raise StaleCacheError(
                f"{kind}_backward got a cache from {self.kind!r}")
        if tuple(grad_out.shape) != self.out_shape:
            raise StaleCacheError(
                f"{kind}_backward: grad shape {tuple(grad_out.shape)} does not "
                f"match the cached forward output {self.out_shape}")


@dataclass
class BatchNormParams:
    """Per-channel batch-norm parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9  # new_running = momentum*old + (1-momentum)*batch

    @classmethod
    def identity(cls, channels, dtype=np.float32):
        return cls(gamma=np.ones(channels, dtype=dtype),
                   beta=np.zeros(channels, dtype=dtype),
                   running_mean=np.zeros(channels, dtype=dtype),
                   running_var=np.ones(channels, dtype=dtype))


def _pool_windows(x, kh, kw, stride):
    """Strided (n,c,oh,ow,kh,kw) view over x; caller guarantees fit."""
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    return as_strided(x, (n, c, oh, ow, kh, kw),
                      (sn, sc, sh * stride, sw * stride, sh, sw))


def _conv_geometry(h, w, kh, kw, stride, padding):
    """Output dims and zero-pad amounts (top, bottom, left, right)."""
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        # symmetric, extra pixel on bottom/right
        return oh, ow, (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    if padding == "valid":
        if h < kh or w < kw:
            raise ShapeError("valid conv needs input >= kernel",
                             got=(h, w), expected=(kh, kw))
        return (h - kh) // stride + 1, (w - kw) // stride + 1, (0, 0, 0, 0)
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d_forward(x, weights, bias, stride=1, padding="same"):
    """2-D cross-correlation: out[n,o] = bias[o] + sum_c x[n,c] * w[o,c].

    weights has shape (out_c, in_c, kh, kw). Padding "same" yields
    ceil(h/stride) output rows; "valid" yields floor((h-kh)/stride)+1.
    """
    x = as_tensor4(x, "conv input")
    weights = as_tensor4(weights, "conv weights")
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weights.shape
    if c != in_c:
        raise ShapeError("conv input channels do not match weights",
                         got=x.shape, expected=(n, in_c, h, w))
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    bias = np.asarray(bias)
    if bias.shape != (out_c,):
        raise ShapeError("conv bias length must equal out channels",
                         got=bias.shape, expected=(out_c,))

    oh, ow, (pt, pb, pl, pr) = _conv_geometry(h, w, kh, kw, stride, padding)
    if pt or pb or pl or pr:
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    else:
        xp = x
    windows = _pool_windows(xp, kh, kw, stride)  # (n,c,oh,ow,kh,kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * oh * ow, c * kh * kw)
    w_mat = weights.reshape(out_c, c * kh * kw)
    out = cols @ w_mat.T + bias
    out = out.reshape(n, oh, ow, out_c).transpose(0, 3, 1, 2)
    cache = LayerCache("conv2d", out.shape,
                       (xp, weights, stride, (pt, pb, pl, pr), x.shape))
    return out, cache


def conv2d_backward(grad_out, cache):
    """Gradients of conv2d w.r.t. (input, weights, bias)."""
    cache.check(grad_out, "conv2d")
    xp, weights, stride, (pt, pb, pl, pr), x_shape = cache.data
    n, _, oh, ow = grad_out.shape
    out_c, c, kh, kw = weights.shape

    grad_bias = grad_out.sum(axis=(0, 2, 3))

    g_mat = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1))
    g_mat = g_mat.reshape(n * oh * ow, out_c)
    windows = _pool_windows(xp, kh, kw, stride)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * oh * ow, c * kh * kw)
    grad_weights = (g_mat.T @ cols).reshape(out_c, c, kh, kw)

    # col2im: scatter the GEMM result back onto the padded input grid
    gcols = (g_mat @ weights.reshape(out_c, c * kh * kw))
    gcols = gcols.reshape(n, oh, ow, c, kh, kw)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    h, w = x_shape[2], x_shape[3]
    grad_input = gxp[:, :, pt:pt + h, pl:pl + w]
    if pt or pb or pl or pr:
        grad_input = np.ascontiguousarray(grad_input)
    return grad_input, grad_weights, grad_bias


def batchnorm_forward(x, params, mode="train"):
    """Per-channel batch normalization.

    Train mode normalizes with batch statistics over (n,h,w) and updates the
    running statistics in ``params`` by exponential moving average. Infer
    mode uses the stored running statistics.
    """
    x = as_tensor4(x, "batchnorm input")
    c = x.shape[1]
    if params.gamma.shape != (c,) or params.beta.shape != (c,):
        raise ShapeError("batchnorm channel count mismatch",
                         got=x.shape, expected=(x.shape[0], params.gamma.size,
                                                x.shape[2], x.shape[3]))
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    gamma = params.gamma.reshape(1, c, 1, 1)
    beta = params.beta.reshape(1, c, 1, 1)

    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        std = np.sqrt(var + params.eps)
        xhat = (x - mean.reshape(1, c, 1, 1)) / std.reshape(1, c, 1, 1)
        m = params.momentum
        params.running_mean[:] = m * params.running_mean + (1 - m) * mean
        params.running_var[:] = m * params.running_var + (1 - m) * var
        out = gamma * xhat + beta
        cache = LayerCache("batchnorm", out.shape,
                           ("train", xhat, std, params.gamma))
    else:
        std = np.sqrt(params.running_var + params.eps)
        xhat = (x - params.running_mean.reshape(1, c, 1, 1)) / std.reshape(1, c, 1, 1)
        out = gamma * xhat + beta
        cache = LayerCache("batchnorm", out.shape,
                           ("infer", xhat, std, params.gamma))
    return out, cache


def batchnorm_backward(grad_out, cache):
    """Exact adjoint of batchnorm_forward for the cached mode."""
    cache.check(grad_out, "batchnorm")
    mode, xhat, std, gamma = cache.data
    c = grad_out.shape[1]
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    gview = gamma.reshape(1, c, 1, 1)
    if mode == "infer":
        grad_input = grad_out * (gview / std.reshape(1, c, 1, 1))
        return grad_input, grad_gamma, grad_beta
    # train mode: batch statistics depend on x, so the adjoint couples all
    # positions in a channel
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    dxhat = grad_out * gview
    s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    grad_input = (dxhat - s1 / m - xhat * s2 / m) / std.reshape(1, c, 1, 1)
    return grad_input, grad_gamma, grad_beta


def relu(x):
    """Elementwise max(x, 0)."""
    x = np.asarray(x)
    out = np.maximum(x, 0)
    cache = LayerCache("relu", out.shape, (x > 0,))
    return out, cache


def relu_backward(grad_out, cache):
    """Masked pass-through; subgradient at exactly 0 is 0."""
    cache.check(grad_out, "relu")
    (mask,) = cache.data
    return grad_out * mask


def maxpool2d(x, window, stride):
    """Per-window maximum over non-padded windows."""
    x = as_tensor4(x, "maxpool input")
    n, c, h, w = x.shape
    if h < window or w < window:
        raise ShapeError("maxpool window larger than input",
                         got=(h, w), expected=(window, window))
    windows = _pool_windows(x, window, window, stride)
    n, c, oh, ow = windows.shape[:4]
    flat = np.ascontiguousarray(windows).reshape(n, c, oh, ow, window * window)
    # argmax picks the first maximum in row-major window order (tie rule)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    cache = LayerCache("maxpool", out.shape, (arg, x.shape, window, stride))
    return out, cache


def maxpool2d_backward(grad_out, cache):
    """Routes each gradient element to its window's argmax position."""
    cache.check(grad_out, "maxpool")
    arg, x_shape, window, stride = cache.data
    n, c, h, w = x_shape
    oh, ow = arg.shape[2], arg.shape[3]
    rows = arg // window + stride * np.arange(oh).reshape(1, 1, oh, 1)
    colx = arg % window + stride * np.arange(ow).reshape(1, 1, 1, ow)
    flat_pos = (rows * w + colx).reshape(n * c, oh * ow)
    plane = np.arange(n * c)[:, None]
    grad_input = np.zeros((n * c, h * w), dtype=grad_out.dtype)
    np.add.at(grad_input, (plane, flat_pos), grad_out.reshape(n * c, oh * ow))
    return grad_input.reshape(n, c, h, w)


def avgpool2d(x, window, stride):
    """Per-window mean; used by the densenet transition layers."""
    x = as_tensor4(x, "avgpool input")
    n, c, h, w = x.shape
    if h < window or w < window:
        raise ShapeError("avgpool window larger than input",
                         got=(h, w), expected=(window, window))
    windows = _pool_windows(x, window, window, stride)
    out = windows.mean(axis=(4, 5))
    cache = LayerCache("avgpool", out.shape, (x.shape, window, stride))
    return out, cache


def avgpool2d_backward(grad_out, cache):
    cache.check(grad_out, "avgpool")
    x_shape, window, stride = cache.data
    n, c, h, w = x_shape
    oh, ow = grad_out.shape[2], grad_out.shape[3]
    share = grad_out / (window * window)
    grad_input = np.zeros(x_shape, dtype=grad_out.dtype)
    for i in range(window):
        for j in range(window):
            grad_input[:, :, i:i + stride * oh:stride,
                       j:j + stride * ow:stride] += share
    return grad_input


def global_avg_pool(x):
    """Mean over the spatial grid, keeping (n,c,1,1) shape."""
    x = as_tensor4(x, "gap input")
    out = x.mean(axis=(2, 3), keepdims=True)
    cache = LayerCache("gap", out.shape, (x.shape,))
    return out, cache


def global_avg_pool_backward(grad_out, cache):
    cache.check(grad_out, "gap")
    (x_shape,) = cache.data
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(grad_out / (h * w), x_shape).copy()


def dense(x, weights, bias):
    """Affine map y = x W + b on (n,d) inputs."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError("dense inner dimensions do not agree",
                         got=x.shape, expected=(x.shape[0], weights.shape[0]))
    out = x @ weights + bias
    cache = LayerCache("dense", out.shape, (x, weights))
    return out, cache


def dense_backward(grad_out, cache):
    cache.check(grad_out, "dense")
    x, weights = cache.data
    grad_input = grad_out @ weights.T
    grad_weights = x.T @ grad_out
    grad_bias = grad_out.sum(axis=0)
    return grad_input, grad_weights, grad_bias


def softmax(logits):
    """Row-wise softmax with max subtraction for stability."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits.

    Returns (loss, grad_logits) with grad = (softmax - one_hot) / n.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError("labels must be one class index per row",
                         got=labels.shape, expected=(n,))
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(
            f"label out of range [0,{k}): {labels.min()}..{labels.max()}")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), labels] - lse
    loss = float(-logp.mean())
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1
    grad /= n
    return loss, grad


def residual_add(a, b):
    """Elementwise sum of two identically shaped tensors."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError("residual_add needs identical shapes",
                         got=b.shape, expected=a.shape)
    return a + b


def residual_add_backward(grad_out):
    """The sum adjoint passes the gradient to both addends."""
    return grad_out, grad_out


def channel_concat(parts):
    """Stack tensors along the channel axis in argument order."""
    parts = [as_tensor4(p, f"concat part {i}") for i, p in enumerate(parts)]
    first = parts[0]
    for i, p in enumerate(parts[1:], 1):
        if (p.shape[0], p.shape[2], p.shape[3]) != \
                (first.shape[0], first.shape[2], first.shape[3]):
            raise ShapeError(f"concat part {i} spatial/batch mismatch",
                             got=p.shape, expected=first.shape)
    return np.concatenate(parts, axis=1)


def channel_concat_backward(grad_out, channel_sizes):
    """Slice the gradient back to each concatenated part."""
    splits = np.cumsum(channel_sizes)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(grad_out, splits, axis=1)]
