"""Dense NCHW float64 kernels with hand-written backward passes.

Every tensor here is a plain ``numpy.ndarray`` of rank 4 laid out as
(batch, channel, height, width). Functions are pure: they never mutate
their arguments.
"""

import struct

import numpy as np

from ._validation import ShapeError, check_same_shape

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
T4_MAGIC = b"T4v1"


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x, kh, kw, stride, padding):
    """Patch matrix of shape (c*kh*kw, n*ho*wo), rows ordered (c, i, j)."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xt = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im(cols, x_shape, kh, kw, stride, padding):
    """Adjoint of :func:`im2col`: scatter-add patch entries back to pixels."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    hp, wp = h + 2 * padding, w + 2 * padding
    gpad = np.zeros((c, n, hp, wp))
    for i in range(kh):
        for j in range(kw):
            gpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    gpad = gpad[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(gpad.transpose(1, 0, 2, 3))


def _check_conv(x, weight, stride, padding):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    out_c, in_c, kh, kw = weight.shape
    if x.shape[1] != in_c:
        raise ShapeError(f"conv2d input has {x.shape[1]} channels but weight expects {in_c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel sizes must be odd, got {kh}x{kw}")
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} and kernel {kh}x{kw}")
    return ho, wo


def conv2d_forward(x, weight, bias, stride=1, padding=0, return_cols=False):
    """Cross-correlate ``x`` (n, c_in, h, w) with ``weight`` (c_out, c_in, kh, kw).

    With ``return_cols`` the patch matrix is returned as well so the backward
    pass can reuse it.
    """
    ho, wo = _check_conv(x, weight, stride, padding)
    out_c, _, kh, kw = weight.shape
    cols = im2col(x, kh, kw, stride, padding)
    out = weight.reshape(out_c, -1) @ cols
    out += bias[:, None]
    out = np.ascontiguousarray(out.reshape(out_c, x.shape[0], ho, wo).transpose(1, 0, 2, 3))
    return (out, cols) if return_cols else out


def conv2d_backward(x, weight, grad_out, stride=1, padding=0, cols=None):
    """Return ``(grad_input, grad_weight, grad_bias)`` for :func:`conv2d_forward`."""
    ho, wo = _check_conv(x, weight, stride, padding)
    n = x.shape[0]
    out_c, in_c, kh, kw = weight.shape
    if grad_out.shape != (n, out_c, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != conv output shape {(n, out_c, ho, wo)}")
    if cols is None:
        cols = im2col(x, kh, kw, stride, padding)
    g = grad_out.transpose(1, 0, 2, 3).reshape(out_c, n * ho * wo)
    grad_weight = (g @ cols.T).reshape(weight.shape)
    grad_bias = g.sum(axis=1)
    gcols = weight.reshape(out_c, -1).T @ g
    return col2im(gcols, x.shape, kh, kw, stride, padding), grad_weight, grad_bias


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_out, 0.0)


def sigmoid_forward(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_backward(y, grad_out):
    """Backward given the sigmoid *output* ``y``."""
    return grad_out * y * (1.0 - y)


def batchnorm_forward(x, gamma, beta, eps=BN_EPS, training=True,
                      running_mean=None, running_var=None):
    """Per-channel batch normalization.

    In training mode the batch statistics are used and returned in the cache
    (``cache["mean"]``, ``cache["var_unbiased"]``) so the caller can fold them
    into running statistics with :func:`update_running_stats`. In inference
    mode ``running_mean``/``running_var`` are required.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm affine parameters must have shape ({c},)")
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ShapeError("batchnorm training mode needs batch*h*w >= 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        var_unbiased = var * count / (count - 1)
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm inference mode requires running statistics")
        mean, var, var_unbiased = running_mean, running_var, None
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    cache = {"xhat": xhat, "inv_std": inv_std, "gamma": gamma, "training": training,
             "mean": mean, "var_unbiased": var_unbiased}
    return out, cache


def batchnorm_backward(cache, grad_out):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma = cache["xhat"], cache["inv_std"], cache["gamma"]
    check_same_shape(xhat, grad_out, ("cached input", "grad_out"))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    scale = (gamma * inv_std)[None, :, None, None]
    if not cache["training"]:
        return grad_out * scale, grad_gamma, grad_beta
    count = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    grad_x = scale * (grad_out
                      - grad_beta[None, :, None, None] / count
                      - xhat * grad_gamma[None, :, None, None] / count)
    return grad_x, grad_gamma, grad_beta


def update_running_stats(running_mean, running_var, mean, var_unbiased, momentum=BN_MOMENTUM):
    """Return the exponentially averaged ``(running_mean, running_var)``."""
    return ((1.0 - momentum) * running_mean + momentum * mean,
            (1.0 - momentum) * running_var + momentum * var_unbiased)


def _resize_matrix(in_size, out_size):
    # align_corners=False: src = (dst + 0.5) * in / out - 0.5, clamped at 0
    mat = np.zeros((out_size, in_size))
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    lo = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    rows = np.arange(out_size)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


_RESIZE_CACHE = {}


def resize_matrix(in_size, out_size):
    key = (in_size, out_size)
    if key not in _RESIZE_CACHE:
        _RESIZE_CACHE[key] = _resize_matrix(in_size, out_size)
    return _RESIZE_CACHE[key]


def resize_bilinear(x, out_h, out_w):
    """Bilinear resize of every (n, c) plane, align-corners-false convention."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target must be >= 1, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    ry, rx = resize_matrix(h, out_h), resize_matrix(w, out_w)
    return np.ascontiguousarray(np.matmul(np.matmul(ry, x), rx.T))


def resize_bilinear_backward(grad_out, in_h, in_w):
    out_h, out_w = grad_out.shape[2:]
    if (in_h, in_w) == (out_h, out_w):
        return grad_out.copy()
    ry, rx = resize_matrix(in_h, out_h), resize_matrix(in_w, out_w)
    return np.ascontiguousarray(np.matmul(np.matmul(ry.T, grad_out), rx))


def mse_loss(pred, target):
    """Return ``(mean squared error, gradient w.r.t. pred)``."""
    check_same_shape(pred, target, ("pred", "target"))
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def write_t4(path_or_file, x):
    """Serialize a rank-4 tensor in the T4v1 binary format."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"T4v1 stores rank-4 tensors only, got shape {x.shape}")
    payload = T4_MAGIC + struct.pack("<4I", *x.shape) + x.astype("<f8").tobytes(order="C")
    if hasattr(path_or_file, "write"):
        path_or_file.write(payload)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(payload)


def read_t4(path_or_file):
    if hasattr(path_or_file, "read"):
        raw = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            raw = fh.read()
    if raw[:4] != T4_MAGIC:
        raise ValueError("not a T4v1 tensor file (bad magic)")
    dims = struct.unpack("<4I", raw[4:20])
    count = int(np.prod(dims))
    if len(raw) != 20 + 8 * count:
        raise ValueError(f"T4v1 payload size mismatch for shape {dims}")
    return np.frombuffer(raw, dtype="<f8", offset=20).astype(np.float64).reshape(dims)
