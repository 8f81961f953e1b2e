"""End-to-end training: pair sampling, SGD with momentum, poly learning rate."""

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .data import FlowLookup, make_pair
from .detector import (BackboneConfig, apply_bn_stats, backward_pair,
                       forward_pair, init_params, is_buffer)
from .tensor import mse_loss

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration, loss):
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


@dataclass
class TrainConfig:
    base_lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0005
    max_iters: int = 2000
    poly_power: float = 0.9
    k: int = 1
    input_size: int = 64
    seed: int = 0
    widths: tuple = (8, 16, 32)
    flow_width: int = 16
    block: int = 8
    search: int = 8

    def __post_init__(self):
        self.widths = _parse_tuple(self.widths)
        for name in ("base_lr", "poly_power"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must be in [0, 1) and weight_decay >= 0")
        # max_iters = 0 is accepted and means "return the initialization"
        if self.max_iters < 0 or self.k < 1 or self.input_size < 8:
            raise ValueError("need max_iters >= 0, k >= 1, input_size >= 8")

    @property
    def backbone(self):
        return BackboneConfig(widths=self.widths, flow_width=self.flow_width)

    @classmethod
    def from_file(cls, path, **overrides):
        values = read_config_file(path)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values):
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(types)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kwargs = {}
        for key, value in values.items():
            kind = types[key]
            if kind is tuple:
                kwargs[key] = _parse_tuple(value)
            elif kind is int:
                kwargs[key] = int(value)
            elif kind is float:
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def to_lines(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return out


def _parse_tuple(value):
    if isinstance(value, str):
        return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
    return tuple(int(v) for v in value)


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def poly_lr(iteration, config):
    """``base_lr * (1 - iteration / max_iters) ** poly_power``."""
    if iteration < 0 or iteration > config.max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {config.max_iters}]")
    if config.max_iters == 0:
        return config.base_lr
    return config.base_lr * (1.0 - iteration / config.max_iters) ** config.poly_power


def decays(name):
    # conv kernels and the combination coefficients; not biases or BN affine
    return name.endswith((".weight", ".w1", ".w2"))


@dataclass
class OptimState:
    velocity: dict = field(default_factory=dict)
    iteration: int = 0


def sgd_step(params, grads, state, lr, config, frozen=()):
    """One SGD-with-momentum update; returns ``(new_params, new_state)``.

    ``g' = grad + weight_decay * param``; ``v = momentum * v + g'``;
    ``param -= lr * v``. Names in ``frozen`` and BatchNorm buffers are copied
    through unchanged.
    """
    new_params = dict(params)
    velocity = dict(state.velocity)
    for name, grad in grads.items():
        if is_buffer(name) or name in frozen:
            continue
        p = params[name]
        if np.shape(grad) != p.shape:
            raise ValueError(f"gradient for {name} has shape {np.shape(grad)}, expected {p.shape}")
        g = grad + config.weight_decay * p if decays(name) else grad
        v = velocity.get(name)
        v = g if v is None else config.momentum * v + g
        velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, OptimState(velocity, state.iteration + 1)


def sample_pair(videos, rng, config, flow_lookup=None):
    """Uniform video, then uniform ``(t, t + k)`` pair, resized to ``input_size``."""
    if not videos:
        raise ValueError("cannot sample from an empty dataset")
    flow_lookup = flow_lookup or FlowLookup(config.block, config.search)
    vi = int(rng.integers(len(videos)))
    video = videos[vi]
    if len(video) < config.k + 1:
        raise ValueError(f"video {video.name} has {len(video)} frames, needs > k={config.k}")
    t = int(rng.integers(len(video) - config.k))
    return make_pair(video, t, t + config.k, config.input_size, flow_lookup, index=vi)


def no_fgwarp_frozen(params):
    return {k for k in params if k.startswith("flowcnn.") or k.endswith(".w2")}


@dataclass
class TrainResult:
    params: dict
    losses: np.ndarray  # (iterations, 3): total, branch t, branch t+k
    config: TrainConfig


def train(videos, config, use_fgwarp=True, params=None, callback=None):
    """Train the detector on ``videos`` (each with masks) and return a :class:`TrainResult`.

    Deterministic for a fixed ``config.seed``. Raises :class:`TrainingDiverged`
    on a non-finite loss.
    """
    if not videos:
        raise ValueError("cannot train on an empty dataset")
    if any(v.masks is None for v in videos):
        raise ValueError("training videos need ground-truth masks")
    backbone = config.backbone
    params = dict(params) if params is not None else init_params(backbone, config.seed)
    frozen = set() if use_fgwarp else no_fgwarp_frozen(params)
    rng = np.random.default_rng([config.seed, 1])
    lookup = FlowLookup(config.block, config.search)
    state = OptimState()
    losses = np.zeros((config.max_iters, 3))
    for it in range(config.max_iters):
        pair = sample_pair(videos, rng, config, lookup)
        mask_t, mask_tk, cache = forward_pair(pair.frame_t, pair.frame_tk, pair.flow_fwd,
                                              pair.flow_bwd, params, backbone,
                                              training=True, use_fgwarp=use_fgwarp)
        loss_t, g_t = mse_loss(mask_t, pair.mask_t)
        loss_tk, g_tk = mse_loss(mask_tk, pair.mask_tk)
        total = loss_t + loss_tk
        if not np.isfinite(total):
            raise TrainingDiverged(it, total)
        losses[it] = total, loss_t, loss_tk
        grads = backward_pair(cache, g_t, g_tk, params)
        params, state = sgd_step(params, grads, state, poly_lr(it, config), config, frozen)
        params = apply_bn_stats(params, cache.bn_stats)
        if callback is not None:
            callback(it, total)
        if it % 100 == 0:
            log.debug("iter %d loss %.6f", it, total)
    return TrainResult(params, losses, config)


def write_loss_trace(path, losses):
    with open(path, "w") as fh:
        for it, row in enumerate(np.asarray(losses, dtype=np.float64)):
            fh.write(f"{it} " + " ".join(repr(float(v)) for v in row) + "\n")
