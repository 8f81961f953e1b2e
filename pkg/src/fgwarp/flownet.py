"""Raw optical flow sources and the convolutional flow refinement stack."""

import struct

import numpy as np

from ._validation import ShapeError, check_same_shape, check_same_spatial
from .tensor import (batchnorm_backward, batchnorm_forward, conv2d_backward,
                     conv2d_forward, relu_backward, relu_forward)

FLO_MAGIC = 202021.25
FLOWCNN_IN = 9  # flow 2 + frame_a 3 + frame_b 3 + mean |a - b| 1


# ---------------------------------------------------------------- .flo files

def write_flo(path, flow):
    """Write a (1, 2, h, w) or (h, w, 2) flow field as a Middlebury ``.flo`` file."""
    flow = np.asarray(flow)
    if flow.ndim == 4:
        if flow.shape[:2] != (1, 2):
            raise ShapeError(f".flo stores one flow field, got shape {flow.shape}")
        flow = flow[0].transpose(1, 2, 0)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ShapeError(f"flow must be (h, w, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path):
    """Read a Middlebury ``.flo`` file into a (1, 2, h, w) float64 tensor."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or struct.unpack("<f", raw[:4])[0] != FLO_MAGIC:
        raise ValueError(f"{path}: bad .flo magic number")
    w, h = struct.unpack("<ii", raw[4:12])
    if w < 1 or h < 1 or len(raw) != 12 + 8 * w * h:
        raise ValueError(f"{path}: .flo size mismatch for {w}x{h}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return data.astype(np.float64).transpose(2, 0, 1)[None].copy()


# ------------------------------------------------------------ block matching

def _candidates(search):
    r = np.arange(-search, search + 1)
    cands = [(int(u), int(v)) for u in r for v in r]
    # ties go to the smaller displacement, then lexicographic (u, v)
    cands.sort(key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))
    return cands


def estimate_flow_blockmatch(frame_a, frame_b, block=8, search=8):
    """Per-block integer flow from ``frame_a`` to ``frame_b`` by exhaustive SAD.

    For each block of ``frame_a`` the displacement ``d`` minimizing
    ``sum |a(p) - b(p + d)|`` over ``|d|_inf <= search`` is chosen (``frame_b``
    is zero outside its extent). The result aligns ``frame_b`` onto
    ``frame_a``'s grid, i.e. ``warp(frame_b, flow) ~ frame_a``.
    """
    check_same_shape(frame_a, frame_b, ("frame_a", "frame_b"))
    if frame_a.shape[0] != 1:
        raise ShapeError("block matching works on single frames (batch 1)")
    h, w = frame_a.shape[2:]
    if block > h or block > w or block < 1:
        raise ValueError(f"block size {block} does not fit a {h}x{w} frame")
    ga = frame_a[0].mean(axis=0)
    gb = np.pad(frame_b[0].mean(axis=0), search)
    ny, nx = -(-h // block), -(-w // block)
    # block id per pixel; trailing partial blocks are kept
    by = np.minimum(np.arange(h) // block, ny - 1)
    bx = np.minimum(np.arange(w) // block, nx - 1)
    labels = (by[:, None] * nx + bx[None, :]).ravel()

    best = np.full(ny * nx, np.inf)
    best_d = np.zeros((ny * nx, 2), dtype=np.int64)
    for u, v in _candidates(search):
        shifted = gb[search + v:search + v + h, search + u:search + u + w]
        sad = np.bincount(labels, weights=np.abs(ga - shifted).ravel(), minlength=ny * nx)
        better = sad < best
        best[better] = sad[better]
        best_d[better] = (u, v)
    flow = best_d.reshape(ny, nx, 2)[by][:, bx]  # h, w, 2
    return flow.transpose(2, 0, 1)[None].astype(np.float64)


# ------------------------------------------------------------------ FlowCNN

def init_flowcnn_params(rng, width=16, prefix="flowcnn."):
    """He-initialized L1-L3 with L4 set to pass the raw flow through unchanged."""
    def he(out_c, in_c):
        return rng.normal(0.0, np.sqrt(2.0 / (in_c * 9)), size=(out_c, in_c, 3, 3))

    p = {}
    for name, (o, i) in {"l1": (width, FLOWCNN_IN), "l2": (width, width), "l3": (width, width)}.items():
        p[f"{prefix}{name}.weight"] = he(o, i)
        p[f"{prefix}{name}.bias"] = np.zeros(o)
    for bn in ("bn1", "bn2"):
        p[f"{prefix}{bn}.gamma"] = np.ones(width)
        p[f"{prefix}{bn}.beta"] = np.zeros(width)
        p[f"{prefix}{bn}.running_mean"] = np.zeros(width)
        p[f"{prefix}{bn}.running_var"] = np.ones(width)
    w4 = np.zeros((2, width + 2, 3, 3))
    w4[0, width, 1, 1] = 1.0
    w4[1, width + 1, 1, 1] = 1.0
    p[f"{prefix}l4.weight"] = w4
    p[f"{prefix}l4.bias"] = np.zeros(2)
    return p


def flowcnn_input(raw_flow, frame_a, frame_b):
    diff = np.abs(frame_a - frame_b).mean(axis=1, keepdims=True)
    return np.concatenate([raw_flow, frame_a, frame_b, diff], axis=1)


def flowcnn_forward(raw_flow, frame_a, frame_b, params, prefix="flowcnn.", training=True):
    """Refine ``raw_flow`` given the two frames it relates.

    Returns ``(refined_flow, cache)``; ``cache["bn_stats"]`` carries the batch
    statistics of both BatchNorm layers when ``training`` is set.
    """
    if raw_flow.ndim != 4 or raw_flow.shape[1] != 2:
        raise ShapeError(f"raw_flow must be (n, 2, h, w), got {raw_flow.shape}")
    check_same_shape(frame_a, frame_b, ("frame_a", "frame_b"))
    check_same_spatial(raw_flow, frame_a, ("raw_flow", "frames"))
    if frame_a.shape[1] != 3:
        raise ShapeError(f"frames must be RGB, got {frame_a.shape[1]} channels")
    p = lambda k: params[prefix + k]  # noqa: E731

    x0 = flowcnn_input(raw_flow, frame_a, frame_b)
    cache = {"x": [], "cols": [], "bn": [], "pre": [], "bn_stats": [], "prefix": prefix,
             "params": params}
    h = x0
    for i, layer in enumerate(("l1", "l2")):
        cache["x"].append(h)
        z, cols = conv2d_forward(h, p(layer + ".weight"), p(layer + ".bias"), 1, 1, return_cols=True)
        cache["cols"].append(cols)
        bn = f"bn{i + 1}"
        z, bc = batchnorm_forward(z, p(bn + ".gamma"), p(bn + ".beta"), training=training,
                                  running_mean=p(bn + ".running_mean"),
                                  running_var=p(bn + ".running_var"))
        cache["bn"].append(bc)
        cache["pre"].append(z)
        if training:
            cache["bn_stats"].append((prefix + bn, bc["mean"], bc["var_unbiased"]))
        h = relu_forward(z)
    cache["x"].append(h)
    z3, cols = conv2d_forward(h, p("l3.weight"), p("l3.bias"), 1, 1, return_cols=True)
    cache["cols"].append(cols)
    x4 = np.concatenate([z3, raw_flow], axis=1)
    cache["x"].append(x4)
    out, cols = conv2d_forward(x4, p("l4.weight"), p("l4.bias"), 1, 1, return_cols=True)
    cache["cols"].append(cols)
    return out, cache


def flowcnn_backward(cache, grad_out):
    """Return ``(grads, grad_raw_flow)`` where ``grads`` is keyed by parameter name."""
    prefix, params = cache["prefix"], cache["params"]
    p = lambda k: params[prefix + k]  # noqa: E731
    grads = {}
    x1, x2, x3, x4 = cache["x"]
    cols = cache["cols"]
    g4, grads[prefix + "l4.weight"], grads[prefix + "l4.bias"] = conv2d_backward(
        x4, p("l4.weight"), grad_out, 1, 1, cols=cols[3])
    width = x3.shape[1]
    g_raw = g4[:, width:].copy()
    g, grads[prefix + "l3.weight"], grads[prefix + "l3.bias"] = conv2d_backward(
        x3, p("l3.weight"), g4[:, :width], 1, 1, cols=cols[2])
    for i, (layer, xin) in reversed(list(enumerate((("l1", x1), ("l2", x2))))):
        bn = f"bn{i + 1}"
        g = relu_backward(cache["pre"][i], g)
        g, grads[prefix + bn + ".gamma"], grads[prefix + bn + ".beta"] = batchnorm_backward(
            cache["bn"][i], g)
        g, grads[prefix + layer + ".weight"], grads[prefix + layer + ".bias"] = conv2d_backward(
            xin, p(layer + ".weight"), g, 1, 1, cols=cols[i])
    # first two input channels are the raw flow itself
    g_raw += g[:, :2]
    return grads, g_raw
