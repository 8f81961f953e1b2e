"""Two-branch shadow detector with flow-guided feature exchange.

Parameters live in a flat ``dict`` mapping stable dotted names to float64
arrays. Names ending in ``running_mean``/``running_var`` are BatchNorm
buffers, everything else is learnable. Both branches read the same backbone,
decoder and FlowCNN entries; the exchange has one :class:`CombineWeights`
pair per level and direction::

    fgwarp.l{1,2,3}.fwd.{w1,w2}   frame t features warped into the t+k branch
    fgwarp.l{1,2,3}.bwd.{w1,w2}   frame t+k features warped into the t branch
"""

import hashlib
import os
import shutil
import tempfile
from dataclasses import dataclass, field

import numpy as np

from ._validation import ShapeError, check_flow, check_same_shape, check_tensor4
from .flownet import flowcnn_backward, flowcnn_forward, init_flowcnn_params
from .flowwarp import (CombineWeights, combine, combine_backward, fgwarp,
                       fgwarp_backward)
from .tensor import (batchnorm_backward, batchnorm_forward, conv2d_backward,
                     conv2d_forward, read_t4, relu_backward, relu_forward,
                     resize_bilinear, resize_bilinear_backward,
                     sigmoid_backward, sigmoid_forward,
                     update_running_stats, write_t4)

LEVELS = (1, 2, 3)
DIRECTIONS = ("fwd", "bwd")
BUFFER_SUFFIXES = (".running_mean", ".running_var")


@dataclass(frozen=True)
class BackboneConfig:
    """Stage widths and strides of the three-stage backbone."""

    widths: tuple = (8, 16, 32)
    strides: tuple = (2, 2, 2)
    flow_width: int = 16

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.widths) != 3 or len(self.strides) != 3:
            raise ValueError("the backbone has exactly three stages")
        if min(self.widths) < 1 or self.flow_width < 1:
            raise ValueError("channel widths must be positive")
        if min(self.strides) < 2:
            raise ValueError("every stage must downsample (stride >= 2)")


def is_buffer(name):
    return name.endswith(BUFFER_SUFFIXES)


def learnable_names(params):
    return [k for k in params if not is_buffer(k)]


def init_params(config=None, seed=0):
    """Fresh detector parameters: He-normal convs, identity exchange (w1=1, w2=0)."""
    config = config or BackboneConfig()
    rng = np.random.default_rng(seed)
    p = {}

    def conv(name, out_c, in_c, k):
        p[name + ".weight"] = rng.normal(0.0, np.sqrt(2.0 / (in_c * k * k)), size=(out_c, in_c, k, k))
        p[name + ".bias"] = np.zeros(out_c)

    def bn(name, c):
        p[name + ".gamma"] = np.ones(c)
        p[name + ".beta"] = np.zeros(c)
        p[name + ".running_mean"] = np.zeros(c)
        p[name + ".running_var"] = np.ones(c)

    w1, w2, w3 = config.widths
    in_c = 3
    for level, width in zip(LEVELS, config.widths):
        conv(f"backbone.s{level}.conv1", width, in_c, 3)
        bn(f"backbone.s{level}.bn1", width)
        conv(f"backbone.s{level}.conv2", width, width, 3)
        bn(f"backbone.s{level}.bn2", width)
        in_c = width
    for level, width in zip(LEVELS, config.widths):
        for d in DIRECTIONS:
            cw = CombineWeights.identity(width)
            p[f"fgwarp.l{level}.{d}.w1"] = cw.w1
            p[f"fgwarp.l{level}.{d}.w2"] = cw.w2
    p.update(init_flowcnn_params(rng, config.flow_width))
    conv("decoder.c2", w2, w2 + w3, 3)
    conv("decoder.c1", w1, w1 + w2, 3)
    conv("decoder.head", 1, w1, 1)
    return p


def combine_weights(params, level, direction):
    return CombineWeights(params[f"fgwarp.l{level}.{direction}.w1"],
                          params[f"fgwarp.l{level}.{direction}.w2"])


def fingerprint(params):
    h = hashlib.blake2b(digest_size=16)
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------- backbone

def _bn(params, name, z, training, stats):
    out, c = batchnorm_forward(z, params[name + ".gamma"], params[name + ".beta"],
                               training=training,
                               running_mean=params[name + ".running_mean"],
                               running_var=params[name + ".running_var"])
    if training:
        stats.append((name, c["mean"], c["var_unbiased"]))
    return out, c


def stage_forward(x, params, level, stride, training, stats):
    pre = f"backbone.s{level}"
    c = {"level": level, "stride": stride, "x1": x}
    z, c["cols1"] = conv2d_forward(x, params[pre + ".conv1.weight"], params[pre + ".conv1.bias"],
                                   stride, 1, return_cols=True)
    z, c["bn1"] = _bn(params, pre + ".bn1", z, training, stats)
    c["z1"] = z
    h = relu_forward(z)
    c["x2"] = h
    z, c["cols2"] = conv2d_forward(h, params[pre + ".conv2.weight"], params[pre + ".conv2.bias"],
                                   1, 1, return_cols=True)
    z, c["bn2"] = _bn(params, pre + ".bn2", z, training, stats)
    c["z2"] = z
    return relu_forward(z), c


def stage_backward(cache, grad_out, params, grads):
    pre = f"backbone.s{cache['level']}"
    g = relu_backward(cache["z2"], grad_out)
    g, gg, gb = batchnorm_backward(cache["bn2"], g)
    _acc(grads, pre + ".bn2.gamma", gg)
    _acc(grads, pre + ".bn2.beta", gb)
    g, gw, gbias = conv2d_backward(cache["x2"], params[pre + ".conv2.weight"], g, 1, 1,
                                   cols=cache["cols2"])
    _acc(grads, pre + ".conv2.weight", gw)
    _acc(grads, pre + ".conv2.bias", gbias)
    g = relu_backward(cache["z1"], g)
    g, gg, gb = batchnorm_backward(cache["bn1"], g)
    _acc(grads, pre + ".bn1.gamma", gg)
    _acc(grads, pre + ".bn1.beta", gb)
    g, gw, gbias = conv2d_backward(cache["x1"], params[pre + ".conv1.weight"], g,
                                   cache["stride"], 1, cols=cache["cols1"])
    _acc(grads, pre + ".conv1.weight", gw)
    _acc(grads, pre + ".conv1.bias", gbias)
    return g


def _acc(grads, name, value):
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


# ------------------------------------------------------------------ decoder

def decoder_forward(taps, params, out_hw):
    """Fuse the three tap levels into a (n, 1, H, W) probability map."""
    t1, t2, t3 = taps
    c = {"taps_shape": [t.shape for t in taps]}
    u3 = resize_bilinear(t3, *t2.shape[2:])
    x = np.concatenate([t2, u3], axis=1)
    c["x2"] = x
    z, c["cols2"] = conv2d_forward(x, params["decoder.c2.weight"], params["decoder.c2.bias"], 1, 1,
                                   return_cols=True)
    c["z2"] = z
    d2 = relu_forward(z)
    u2 = resize_bilinear(d2, *t1.shape[2:])
    x = np.concatenate([t1, u2], axis=1)
    c["x1"] = x
    z, c["cols1"] = conv2d_forward(x, params["decoder.c1.weight"], params["decoder.c1.bias"], 1, 1,
                                   return_cols=True)
    c["z1"] = z
    u1 = resize_bilinear(relu_forward(z), *out_hw)
    c["u1"] = u1
    logits = conv2d_forward(u1, params["decoder.head.weight"], params["decoder.head.bias"], 1, 0)
    mask = sigmoid_forward(logits)
    c["mask"] = mask
    return mask, c


def decoder_backward(cache, grad_mask, params, grads):
    s1, s2, s3 = cache["taps_shape"]
    g = sigmoid_backward(cache["mask"], grad_mask)
    g, gw, gb = conv2d_backward(cache["u1"], params["decoder.head.weight"], g, 1, 0)
    _acc(grads, "decoder.head.weight", gw)
    _acc(grads, "decoder.head.bias", gb)
    g = resize_bilinear_backward(g, *s1[2:])
    g = relu_backward(cache["z1"], g)
    g, gw, gb = conv2d_backward(cache["x1"], params["decoder.c1.weight"], g, 1, 1,
                                cols=cache["cols1"])
    _acc(grads, "decoder.c1.weight", gw)
    _acc(grads, "decoder.c1.bias", gb)
    g_t1, g = g[:, :s1[1]], g[:, s1[1]:]
    g = resize_bilinear_backward(g, *s2[2:])
    g = relu_backward(cache["z2"], g)
    g, gw, gb = conv2d_backward(cache["x2"], params["decoder.c2.weight"], g, 1, 1,
                                cols=cache["cols2"])
    _acc(grads, "decoder.c2.weight", gw)
    _acc(grads, "decoder.c2.bias", gb)
    g_t2, g = g[:, :s2[1]], g[:, s2[1]:]
    g_t3 = resize_bilinear_backward(g, *s3[2:])
    return [g_t1, g_t2, g_t3]


# ------------------------------------------------------------------ network

@dataclass
class PairCache:
    """Intermediates of one :func:`forward_pair` call."""

    fingerprint: str
    frame_shape: tuple
    use_fgwarp: bool
    stages: dict = field(default_factory=dict)
    exchanges: dict = field(default_factory=dict)
    decoders: dict = field(default_factory=dict)
    flowcnn: dict = field(default_factory=dict)
    bn_stats: list = field(default_factory=list)
    consumed: bool = False


def _check_frames(frame_t, frame_tk):
    frame_t = check_tensor4(frame_t, "frame_t", channels=3)
    frame_tk = check_tensor4(frame_tk, "frame_tk", channels=3)
    check_same_shape(frame_t, frame_tk, ("frame_t", "frame_tk"))
    return frame_t, frame_tk


def forward_single(frame, params, config=None, training=False, return_cache=False):
    """One branch on its own: no exchange, decoder on the raw taps."""
    config = config or BackboneConfig()
    frame = check_tensor4(frame, "frame", channels=3)
    stats, taps, caches = [], [], []
    x = frame
    for level, stride in zip(LEVELS, config.strides):
        x, c = stage_forward(x, params, level, stride, training, stats)
        taps.append(x)
        caches.append(c)
    mask, dc = decoder_forward(taps, params, frame.shape[2:])
    if return_cache:
        return mask, {"stages": caches, "decoder": dc, "bn_stats": stats}
    return mask


def forward_pair(frame_t, frame_tk, raw_flow_fwd, raw_flow_bwd, params, config=None,
                 training=False, use_fgwarp=True):
    """Run both branches with feature exchange after every backbone stage.

    ``raw_flow_fwd`` aligns frame t onto frame t+k (it lives on the t+k grid)
    and ``raw_flow_bwd`` aligns frame t+k onto frame t. Both are refined by
    the shared FlowCNN before use. With ``use_fgwarp=False`` flows are ignored
    and the warped term is zero.

    Returns ``(mask_t, mask_tk, cache)``.
    """
    config = config or BackboneConfig()
    frame_t, frame_tk = _check_frames(frame_t, frame_tk)
    cache = PairCache(fingerprint(params), frame_t.shape, use_fgwarp)
    if use_fgwarp:
        raw_flow_fwd = check_flow(raw_flow_fwd, "raw_flow_fwd")
        raw_flow_bwd = check_flow(raw_flow_bwd, "raw_flow_bwd")
        for name, fl in (("raw_flow_fwd", raw_flow_fwd), ("raw_flow_bwd", raw_flow_bwd)):
            if fl.shape[2:] != frame_t.shape[2:] or fl.shape[0] != frame_t.shape[0]:
                raise ShapeError(f"{name} shape {fl.shape} does not match frames {frame_t.shape}")
        flow_fwd, cache.flowcnn["fwd"] = flowcnn_forward(raw_flow_fwd, frame_t, frame_tk,
                                                         params, training=training)
        flow_bwd, cache.flowcnn["bwd"] = flowcnn_forward(raw_flow_bwd, frame_tk, frame_t,
                                                         params, training=training)
        for d in DIRECTIONS:
            cache.bn_stats.extend(cache.flowcnn[d]["bn_stats"])

    x = {"t": frame_t, "tk": frame_tk}
    taps = {"t": [], "tk": []}
    for level, stride in zip(LEVELS, config.strides):
        feats = {}
        for b in ("t", "tk"):
            feats[b], cache.stages[(b, level)] = stage_forward(
                x[b], params, level, stride, training, cache.bn_stats)
        w_fwd = combine_weights(params, level, "fwd")
        w_bwd = combine_weights(params, level, "bwd")
        if use_fgwarp:
            x["tk"], cache.exchanges[("fwd", level)] = fgwarp(feats["t"], feats["tk"], flow_fwd, w_fwd)
            x["t"], cache.exchanges[("bwd", level)] = fgwarp(feats["tk"], feats["t"], flow_bwd, w_bwd)
        else:
            zeros = np.zeros_like(feats["t"])
            x["tk"] = combine(feats["tk"], zeros, w_fwd)
            x["t"] = combine(feats["t"], zeros, w_bwd)
            cache.exchanges[("fwd", level)] = {"f_dst": feats["tk"], "warped": zeros, "weights": w_fwd}
            cache.exchanges[("bwd", level)] = {"f_dst": feats["t"], "warped": zeros, "weights": w_bwd}
        for b in ("t", "tk"):
            taps[b].append(x[b])
    masks = {}
    for b in ("t", "tk"):
        masks[b], cache.decoders[b] = decoder_forward(taps[b], params, frame_t.shape[2:])
    return masks["t"], masks["tk"], cache


def backward_pair(cache, grad_mask_t, grad_mask_tk, params):
    """Gradients of every learnable entry of ``params`` for one :func:`forward_pair`.

    Both branches accumulate into the shared entries. Parameters that do not
    influence the output (FlowCNN when the exchange is disabled) get zeros.
    """
    if not isinstance(cache, PairCache):
        raise TypeError("backward_pair expects the cache returned by forward_pair")
    if cache.fingerprint != fingerprint(params):
        raise ValueError("stale cache: parameters changed since forward_pair")
    n, _, h, w = cache.frame_shape
    for name, g in (("grad_mask_t", grad_mask_t), ("grad_mask_tk", grad_mask_tk)):
        if np.shape(g) != (n, 1, h, w):
            raise ShapeError(f"{name} shape {np.shape(g)} != mask shape {(n, 1, h, w)}")

    grads = {}
    g_taps = {b: decoder_backward(cache.decoders[b], g, params, grads)
              for b, g in (("t", grad_mask_t), ("tk", grad_mask_tk))}
    g_flow = {"fwd": 0.0, "bwd": 0.0}
    g_next = {"t": None, "tk": None}
    for level in reversed(LEVELS):
        g_comb = {}
        for b in ("t", "tk"):
            g = g_taps[b][level - 1]
            g_comb[b] = g if g_next[b] is None else g + g_next[b]
        g_feat = {}
        for d, dst, src in (("fwd", "tk", "t"), ("bwd", "t", "tk")):
            ex = cache.exchanges[(d, level)]
            key = f"fgwarp.l{level}.{d}"
            if cache.use_fgwarp:
                g_src, g_dst, g_fl, gw1, gw2 = fgwarp_backward(ex, g_comb[dst])
                g_flow[d] = g_flow[d] + g_fl
                g_feat[src] = g_feat.get(src, 0.0) + g_src
            else:
                g_dst, _, gw1, gw2 = combine_backward(ex["f_dst"], ex["warped"], ex["weights"],
                                                      g_comb[dst])
            g_feat[dst] = g_feat.get(dst, 0.0) + g_dst
            _acc(grads, key + ".w1", gw1)
            _acc(grads, key + ".w2", gw2)
        for b in ("t", "tk"):
            g_next[b] = stage_backward(cache.stages[(b, level)], g_feat[b], params, grads)
    if cache.use_fgwarp:
        for d in DIRECTIONS:
            fg, _ = flowcnn_backward(cache.flowcnn[d], g_flow[d])
            for k, v in fg.items():
                _acc(grads, k, v)
    for k in learnable_names(params):
        if k not in grads:
            grads[k] = np.zeros_like(params[k])
    cache.consumed = True
    return grads


def apply_bn_stats(params, bn_stats):
    """Fold batch statistics gathered in training mode into the running buffers."""
    out = dict(params)
    for name, mean, var in bn_stats:
        out[name + ".running_mean"], out[name + ".running_var"] = update_running_stats(
            out[name + ".running_mean"], out[name + ".running_var"], mean, var)
    return out


# --------------------------------------------------------------- checkpoints

MANIFEST = "manifest.txt"


def _safe_filename(name):
    return name.replace("/", "_") + ".t4"


def save_checkpoint(path, params, config=None, extra=None):
    """Write ``params`` as one T4v1 file per tensor plus a text manifest.

    The directory is assembled under a temporary name and renamed into place.
    """
    config = config or BackboneConfig()
    path = os.path.abspath(path)
    parent = os.path.dirname(path)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".ckpt-", dir=parent)
    try:
        lines = ["# fgwarp checkpoint v1",
                 "config.widths = " + ",".join(map(str, config.widths)),
                 "config.strides = " + ",".join(map(str, config.strides)),
                 f"config.flow_width = {config.flow_width}"]
        for k, v in sorted((extra or {}).items()):
            lines.append(f"meta.{k} = {v}")
        for name in sorted(params):
            arr = np.asarray(params[name], dtype=np.float64)
            fname = _safe_filename(name)
            write_t4(os.path.join(tmp, fname), arr.reshape((1,) * (4 - arr.ndim) + arr.shape)
                     if arr.ndim <= 4 else arr)
            shape = ",".join(map(str, arr.shape))
            lines.append(f"tensor {name} {shape} {fname}")
        with open(os.path.join(tmp, MANIFEST), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        _replace_dir(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def _replace_dir(src, dst):
    if os.path.exists(dst):
        old = dst + ".old"
        shutil.rmtree(old, ignore_errors=True)
        os.replace(dst, old)
        os.replace(src, dst)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(src, dst)


def load_checkpoint(path):
    """Return ``(params, config, meta)`` from a checkpoint directory."""
    manifest = os.path.join(path, MANIFEST)
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    params, cfg, meta = {}, {}, {}
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("tensor "):
                _, name, shape, fname = line.split()
                dims = tuple(int(s) for s in shape.split(",") if s)
                params[name] = read_t4(os.path.join(path, fname)).reshape(dims)
            else:
                key, _, value = line.partition("=")
                key, value = key.strip(), value.strip()
                if key.startswith("config."):
                    cfg[key[7:]] = value
                elif key.startswith("meta."):
                    meta[key[5:]] = value
    config = BackboneConfig(
        widths=tuple(int(v) for v in cfg["widths"].split(",")),
        strides=tuple(int(v) for v in cfg["strides"].split(",")),
        flow_width=int(cfg["flow_width"]),
    )
    return params, config, meta
