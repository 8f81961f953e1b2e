"""Flow-guided bilinear feature warping and per-channel combination.

Flow convention
---------------
A flow field is an (n, 2, h, w) tensor of *sample offsets* in pixels:
channel 0 is the horizontal offset ``u``, channel 1 the vertical offset
``v``. Warping is backward: output pixel ``p`` reads the source at
``p + flow(p)``. A flow that "aligns X onto Y" therefore lives on Y's grid
and points from each Y pixel to the matching location in X.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import ShapeError, check_same_shape, check_same_spatial
from .tensor import resize_bilinear, resize_bilinear_backward


def _sample_geometry(flow):
    n, _, h, w = flow.shape
    sx = np.arange(w, dtype=np.float64)[None, None, :] + flow[:, 0]
    sy = np.arange(h, dtype=np.float64)[None, :, None] + flow[:, 1]
    x0f, y0f = np.floor(sx), np.floor(sy)
    ax, ay = sx - x0f, sy - y0f
    x0, y0 = x0f.astype(np.int64), y0f.astype(np.int64)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.where(valid, yi * w + xi, 0).reshape(n, h * w)
        corners.append((idx, valid.reshape(n, h * w)))
    return ax.reshape(n, h * w), ay.reshape(n, h * w), corners


def _corner_weights(ax, ay):
    return ((1.0 - ay) * (1.0 - ax), (1.0 - ay) * ax, ay * (1.0 - ax), ay * ax)


def _gather(flat, idx, valid):
    vals = np.take_along_axis(flat, idx[:, None, :], axis=2)
    return np.where(valid[:, None, :], vals, 0.0)


def _check_warp_args(features, flow):
    if features.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2:
        raise ShapeError(f"warp expects NCHW features and (n, 2, h, w) flow, got {features.shape}, {flow.shape}")
    if features.shape[0] != flow.shape[0]:
        raise ShapeError(f"batch mismatch: features {features.shape[0]} vs flow {flow.shape[0]}")
    check_same_spatial(features, flow, ("features", "flow"))


def warp(features, flow):
    """Bilinearly sample ``features`` at ``p + flow(p)``; out-of-range taps read zero."""
    _check_warp_args(features, flow)
    n, c, h, w = features.shape
    ax, ay, corners = _sample_geometry(flow)
    flat = features.reshape(n, c, h * w)
    out = np.zeros((n, c, h * w))
    for (idx, valid), wt in zip(corners, _corner_weights(ax, ay)):
        out += wt[:, None, :] * _gather(flat, idx, valid)
    return out.reshape(n, c, h, w)


def warp_backward(features, flow, grad_out):
    """Return ``(grad_features, grad_flow)`` for :func:`warp`."""
    _check_warp_args(features, flow)
    check_same_shape(features, grad_out, ("features", "grad_out"))
    n, c, h, w = features.shape
    hw = h * w
    ax, ay, corners = _sample_geometry(flow)
    flat = features.reshape(n, c, hw)
    g = grad_out.reshape(n, c, hw)

    # transpose of the bilinear gather: scatter-add into source pixels
    base = (np.arange(n * c, dtype=np.int64) * hw).reshape(n, c, 1)
    targets, weights = [], []
    for (idx, valid), wt in zip(corners, _corner_weights(ax, ay)):
        targets.append((base + idx[:, None, :]).ravel())
        weights.append((g * np.where(valid, wt, 0.0)[:, None, :]).ravel())
    grad_features = np.bincount(np.concatenate(targets), weights=np.concatenate(weights),
                                minlength=n * c * hw).reshape(n, c, h, w)

    f00, f01, f10, f11 = (_gather(flat, idx, valid) for idx, valid in corners)
    ax_, ay_ = ax[:, None, :], ay[:, None, :]
    d_sx = (1.0 - ay_) * (f01 - f00) + ay_ * (f11 - f10)
    d_sy = (1.0 - ax_) * (f10 - f00) + ax_ * (f11 - f01)
    grad_flow = np.stack([(g * d_sx).sum(axis=1), (g * d_sy).sum(axis=1)], axis=1)
    return grad_features, grad_flow.reshape(n, 2, h, w)


def resize_flow(flow, out_h, out_w):
    """Resize a flow field and rescale its displacements to the new pixel units."""
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ShapeError(f"flow must have shape (n, 2, h, w), got {flow.shape}")
    h, w = flow.shape[2:]
    if (h, w) == (out_h, out_w):
        return flow.copy()
    out = resize_bilinear(flow, out_h, out_w)
    out[:, 0] *= out_w / w
    out[:, 1] *= out_h / h
    return out


def resize_flow_backward(grad_out, in_h, in_w):
    out_h, out_w = grad_out.shape[2:]
    if (in_h, in_w) == (out_h, out_w):
        return grad_out.copy()
    g = grad_out.copy()
    g[:, 0] *= out_w / in_w
    g[:, 1] *= out_h / in_h
    return resize_bilinear_backward(g, in_h, in_w)


@dataclass
class CombineWeights:
    """Per-channel coefficients for the self and warped feature terms."""

    w1: np.ndarray
    w2: np.ndarray

    @classmethod
    def identity(cls, channels):
        # exchange starts disabled: output equals the frame's own features
        return cls(np.ones(channels), np.zeros(channels))

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        if self.w1.ndim != 1 or self.w1.shape != self.w2.shape:
            raise ShapeError(f"w1 {self.w1.shape} and w2 {self.w2.shape} must be equal-length vectors")


def _check_combine(f_self, f_warped, weights):
    check_same_shape(f_self, f_warped, ("f_self", "f_warped"))
    if weights.w1.shape[0] != f_self.shape[1]:
        raise ShapeError(f"combine weights have length {weights.w1.shape[0]} "
                         f"but features have {f_self.shape[1]} channels")


def combine(f_self, f_warped, weights):
    _check_combine(f_self, f_warped, weights)
    return (weights.w1[None, :, None, None] * f_self
            + weights.w2[None, :, None, None] * f_warped)


def combine_backward(f_self, f_warped, weights, grad_out):
    """Return ``(grad_f_self, grad_f_warped, grad_w1, grad_w2)``."""
    _check_combine(f_self, f_warped, weights)
    check_same_shape(f_self, grad_out, ("f_self", "grad_out"))
    return (weights.w1[None, :, None, None] * grad_out,
            weights.w2[None, :, None, None] * grad_out,
            (f_self * grad_out).sum(axis=(0, 2, 3)),
            (f_warped * grad_out).sum(axis=(0, 2, 3)))


def fgwarp(f_src, f_dst, flow, weights):
    """Warp ``f_src`` onto ``f_dst``'s grid and blend it into ``f_dst``.

    ``flow`` aligns the source frame onto the destination frame and may be
    at any resolution; it is resized to the feature resolution first.

    Returns the combined features and a cache for :func:`fgwarp_backward`.
    """
    check_same_shape(f_src, f_dst, ("f_src", "f_dst"))
    h, w = f_dst.shape[2:]
    flow_r = resize_flow(flow, h, w)
    warped = warp(f_src, flow_r)
    out = combine(f_dst, warped, weights)
    cache = {"f_src": f_src, "f_dst": f_dst, "flow": flow, "flow_r": flow_r,
             "warped": warped, "weights": weights}
    return out, cache


def fgwarp_backward(cache, grad_out):
    """Return ``(grad_f_src, grad_f_dst, grad_flow, grad_w1, grad_w2)``."""
    g_dst, g_warped, g_w1, g_w2 = combine_backward(
        cache["f_dst"], cache["warped"], cache["weights"], grad_out)
    g_src, g_flow_r = warp_backward(cache["f_src"], cache["flow_r"], g_warped)
    in_h, in_w = cache["flow"].shape[2:]
    g_flow = resize_flow_backward(g_flow_r, in_h, in_w)
    return g_src, g_dst, g_flow, g_w1, g_w2
