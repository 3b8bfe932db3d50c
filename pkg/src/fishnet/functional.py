"""Numpy kernels for every graph op.

Each op is a pair ``<op>_forward(...) -> (out, cache)`` and
``<op>_backward(gout, cache) -> tuple of input gradients``. The graph engine
in :mod:`fishnet.tensor` is the only intended caller; tests use these directly
against brute-force oracles.
"""

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_out_size(size, kernel, stride, padding, dilation):
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _offset_slice(i, dilation, stride, count):
    start = i * dilation
    return slice(start, start + stride * (count - 1) + 1, stride)


# -- convolution -------------------------------------------------------------


def conv2d_forward(x, w, stride=1, padding=0, dilation=1, groups=1):
    n, c, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    ho = conv_out_size(h, kh, stride, padding, dilation)
    wo = conv_out_size(wd, kw, stride, padding, dilation)
    k = kh * kw
    if k == 1 and stride == 1 and padding == 0:
        cols = x.reshape(n, groups, cg, ho * wo)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        cols = np.empty((n, c, k, ho, wo), dtype=x.dtype)
        for i in range(kh):
            rows = _offset_slice(i, dilation, stride, ho)
            for j in range(kw):
                cols[:, :, i * kw + j] = xp[:, :, rows, _offset_slice(j, dilation, stride, wo)]
        cols = cols.reshape(n, groups, cg * k, ho * wo)
    wm = w.reshape(groups, cout // groups, cg * k)
    out = np.matmul(wm, cols).reshape(n, cout, ho, wo)
    cache = (x.shape, w, cols, stride, padding, dilation, groups, ho, wo)
    return out, cache


def conv2d_backward(gout, cache):
    xshape, w, cols, stride, padding, dilation, groups, ho, wo = cache
    n, c, h, wd = xshape
    cout, cg, kh, kw = w.shape
    k = kh * kw
    g = gout.reshape(n, groups, cout // groups, ho * wo)
    dw = np.matmul(g, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
    wm = w.reshape(groups, cout // groups, cg * k)
    dcols = np.matmul(wm.transpose(0, 2, 1), g)
    if k == 1 and stride == 1 and padding == 0:
        return dcols.reshape(xshape), dw
    dcols = dcols.reshape(n, c, k, ho, wo)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=gout.dtype)
    for i in range(kh):
        rows = _offset_slice(i, dilation, stride, ho)
        for j in range(kw):
            dxp[:, :, rows, _offset_slice(j, dilation, stride, wo)] += dcols[:, :, i * kw + j]
    if padding:
        dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
    return dxp, dw


# -- pooling -----------------------------------------------------------------


def maxpool_forward(x, kernel=2, stride=2, padding=0):
    """Max pooling; ties go to the first element of the window in row-major order."""
    n, c, h, w = x.shape
    ho = conv_out_size(h, kernel, stride, padding, 1)
    wo = conv_out_size(w, kernel, stride, padding, 1)
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x
    best = None
    arg = np.zeros((n, c, ho, wo), dtype=np.int8)
    for i in range(kernel):
        rows = _offset_slice(i, 1, stride, ho)
        for j in range(kernel):
            v = xp[:, :, rows, _offset_slice(j, 1, stride, wo)]
            if best is None:
                best = v.copy()
                continue
            # strict comparison keeps the earliest index on ties
            m = v > best
            best[m] = v[m]
            arg[m] = i * kernel + j
    return best, (x.shape, arg, kernel, stride, padding)


def maxpool_backward(gout, cache):
    xshape, arg, kernel, stride, padding = cache
    n, c, h, w = xshape
    ho, wo = arg.shape[2:]
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gout.dtype)
    for i in range(kernel):
        rows = _offset_slice(i, 1, stride, ho)
        for j in range(kernel):
            sel = arg == i * kernel + j
            dxp[:, :, rows, _offset_slice(j, 1, stride, wo)] += np.where(sel, gout, 0)
    if padding:
        dxp = dxp[:, :, padding:padding + h, padding:padding + w]
    return (dxp,)


def avgpool_forward(x, kernel=2, stride=2):
    n, c, h, w = x.shape
    ho = conv_out_size(h, kernel, stride, 0, 1)
    wo = conv_out_size(w, kernel, stride, 0, 1)
    acc = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kernel):
        rows = _offset_slice(i, 1, stride, ho)
        for j in range(kernel):
            acc += x[:, :, rows, _offset_slice(j, 1, stride, wo)]
    return acc / (kernel * kernel), (x.shape, kernel, stride)


def avgpool_backward(gout, cache):
    xshape, kernel, stride = cache
    ho, wo = gout.shape[2:]
    dx = np.zeros(xshape, dtype=gout.dtype)
    share = gout / (kernel * kernel)
    for i in range(kernel):
        rows = _offset_slice(i, 1, stride, ho)
        for j in range(kernel):
            dx[:, :, rows, _offset_slice(j, 1, stride, wo)] += share
    return (dx,)


def global_avg_pool_forward(x):
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def global_avg_pool_backward(gout, xshape):
    h, w = xshape[2:]
    return (np.broadcast_to(gout / (h * w), xshape).copy(),)


# -- resampling and channel plumbing ------------------------------------------


def upsample_nearest_forward(x, factor=2):
    return x.repeat(factor, axis=2).repeat(factor, axis=3), factor


def upsample_nearest_backward(gout, factor):
    n, c, h, w = gout.shape
    g = gout.reshape(n, c, h // factor, factor, w // factor, factor)
    return (g.sum(axis=(3, 5)),)


def concat_forward(xs, axis=1):
    sizes = [x.shape[axis] for x in xs]
    return np.concatenate(xs, axis=axis), (sizes, axis)


def concat_backward(gout, cache):
    sizes, axis = cache
    bounds = np.cumsum([0] + sizes)
    out = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        idx = [slice(None)] * gout.ndim
        idx[axis] = slice(lo, hi)
        out.append(gout[tuple(idx)].copy())
    return tuple(out)


def channel_reduce_forward(x, k):
    """Sum each run of ``k`` adjacent channels: out[:, n] = sum_j x[:, k*n + j]."""
    out = x[:, 0::k].copy()
    for j in range(1, k):
        out += x[:, j::k]
    return out, k


def channel_reduce_backward(gout, k):
    return (np.repeat(gout, k, axis=1),)


def flatten_forward(x):
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(gout, xshape):
    return (gout.reshape(xshape),)


# -- elementwise ---------------------------------------------------------------


def add_forward(a, b):
    return a + b, None


def add_backward(gout, cache):
    return gout, gout


def _unbroadcast(g, shape):
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def mul_forward(a, b):
    return a * b, (a, b)


def mul_backward(gout, cache):
    a, b = cache
    return _unbroadcast(gout * b, a.shape), _unbroadcast(gout * a, b.shape)


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(gout, mask):
    return (gout * mask,)


def sigmoid_forward(x):
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e))
    return out, out


def sigmoid_backward(gout, out):
    return (gout * out * (1 - out),)


# -- normalization and dense layers ----------------------------------------------


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training=True,
                      momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch norm over (N, H, W).

    In training mode the running buffers are updated in place.
    """
    shape = (1, -1, 1, 1)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean.reshape(shape)
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv_std = 1 / np.sqrt(var + eps)
        unbiased = var * m / (m - 1) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        xc = x - running_mean.reshape(shape)
        inv_std = 1 / np.sqrt(running_var + eps)
    xhat = xc * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, inv_std, gamma, training)


def batchnorm_backward(gout, cache):
    xhat, inv_std, gamma, training = cache
    shape = (1, -1, 1, 1)
    dgamma = (gout * xhat).sum(axis=(0, 2, 3))
    dbeta = gout.sum(axis=(0, 2, 3))
    dxhat = gout * gamma.reshape(shape)
    if training:
        m = gout.shape[0] * gout.shape[2] * gout.shape[3]
        dx = (dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True) / m
              - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True) / m)
        dx *= inv_std.reshape(shape)
    else:
        dx = dxhat * inv_std.reshape(shape)
    return dx, dgamma, dbeta


def linear_forward(x, w):
    return x @ w.T, (x, w)


def linear_backward(gout, cache):
    x, w = cache
    return gout @ w, gout.T @ x


def sum_forward(x):
    return np.asarray(x.sum(), dtype=x.dtype), x.shape


def sum_backward(gout, xshape):
    return (np.full(xshape, gout, dtype=np.asarray(gout).dtype),)


def softmax_xent_forward(logits, labels):
    """Mean softmax cross-entropy over the batch; ``labels`` are class indices."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    return np.asarray(loss, dtype=logits.dtype), (logp, labels)


def softmax_xent_backward(gout, cache):
    logp, labels = cache
    n = logp.shape[0]
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1
    return d * (gout / n), None
