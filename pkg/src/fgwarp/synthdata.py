"""Deterministic synthetic moving-shadow videos with exact masks and flow.

Shadows are ellipses or rectangles translating by an integer number of
pixels per frame over a static smooth texture. Because motion is an integer
translation the ground-truth flow is exact: warping mask ``t`` by
``flows[t]`` reproduces mask ``t + 1`` wherever the source stays on canvas.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import Video
from .tensor import resize_bilinear

PRESETS = ("default", "small-shadow", "fast-motion")
SMALL_AREA_FRACTION = 0.02
FAST_SPEED = 4


@dataclass
class Primitive:
    kind: str  # "ellipse" or "rectangle"
    center: tuple  # (x, y) at frame 0, integer pixels
    axes: tuple  # semi-axes / half-extents (ax, ay) in pixels
    darkening: float  # multiplicative factor applied inside, in (0, 1)
    velocity: tuple = (0, 0)  # integer (vx, vy) pixels per frame

    def __post_init__(self):
        if self.kind not in ("ellipse", "rectangle"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if not 0.0 < self.darkening < 1.0:
            raise ValueError(f"darkening factor must lie in (0, 1), got {self.darkening}")
        if any(int(v) != v for v in self.velocity) or any(int(c) != c for c in self.center):
            raise ValueError("centers and velocities must be integers")
        self.center = tuple(int(c) for c in self.center)
        self.velocity = tuple(int(v) for v in self.velocity)

    def mask(self, shape, t):
        h, w = shape
        cx = self.center[0] + self.velocity[0] * t
        cy = self.center[1] + self.velocity[1] * t
        ys, xs = np.mgrid[0:h, 0:w]
        return _inside(self.kind, xs - cx, ys - cy, self.axes)

    @property
    def area(self):
        """Pixel count of the unclipped primitive."""
        ax, ay = self.axes
        rx, ry = int(np.ceil(ax)), int(np.ceil(ay))
        ys, xs = np.mgrid[-ry:ry + 1, -rx:rx + 1]
        return int(_inside(self.kind, xs, ys, self.axes).sum())


def _inside(kind, dx, dy, axes):
    ax, ay = axes
    if kind == "ellipse":
        return (dx / ax) ** 2 + (dy / ay) ** 2 <= 1.0
    return (np.abs(dx) <= ax) & (np.abs(dy) <= ay)


@dataclass
class SceneSpec:
    size: tuple = (64, 64)  # (h, w)
    texture_seed: int = 0
    primitives: list = field(default_factory=list)
    n_frames: int = 8
    noise: float = 0.02

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("a video needs at least two frames")
        if min(self.size) < 1:
            raise ValueError("canvas size must be positive")


def smooth_texture(shape, seed, channels=3):
    """Seeded smooth color texture with values in [0.3, 0.95]."""
    h, w = shape
    rng = np.random.default_rng(seed)
    coarse = rng.normal(size=(1, channels, max(2, h // 8), max(2, w // 8)))
    tex = gaussian_filter(resize_bilinear(coarse, h, w)[0], sigma=(0, 1.5, 1.5))
    tex += 0.15 * gaussian_filter(rng.normal(size=(channels, h, w)), sigma=(0, 0.7, 0.7))
    lo, hi = tex.min(), tex.max()
    return 0.3 + 0.65 * (tex - lo) / max(hi - lo, 1e-12)


def render_video(spec, name="video"):
    """Render frames, binary masks and the ``n_frames - 1`` adjacent flows."""
    h, w = spec.size
    bg = smooth_texture(spec.size, spec.texture_seed)
    noise_rng = np.random.default_rng([spec.texture_seed, 7919])
    frames, masks, flows = [], [], []
    for t in range(spec.n_frames):
        shade = np.ones((h, w))
        union = np.zeros((h, w), dtype=bool)
        for prim in spec.primitives:
            m = prim.mask(spec.size, t)
            shade = np.where(m, shade * prim.darkening, shade)
            union |= m
        frame = bg * shade
        if spec.noise > 0:
            frame = frame + spec.noise * noise_rng.normal(size=frame.shape)
        frames.append(np.clip(frame, 0.0, 1.0)[None])
        masks.append(union.astype(np.float64)[None, None])
    for t in range(spec.n_frames - 1):
        flow = np.zeros((1, 2, h, w))
        for prim in spec.primitives:
            region = prim.mask(spec.size, t) | prim.mask(spec.size, t + 1)
            # sample offset from frame t+1 back to frame t
            flow[0, 0][region] = -prim.velocity[0]
            flow[0, 1][region] = -prim.velocity[1]
        flows.append(flow + 0.0)
    meta = {"primitives": [
        {"kind": p.kind, "area": p.area, "area_fraction": p.area / float(h * w),
         "velocity": list(p.velocity), "darkening": p.darkening}
        for p in spec.primitives]}
    return Video(name, frames, masks, flows, meta)


def make_scene(preset="default", seed=0, size=(64, 64), n_frames=8):
    """Sample a random :class:`SceneSpec` for one of :data:`PRESETS`."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    rng = np.random.default_rng(seed)
    h, w = size
    prims = []
    n_prims = int(rng.integers(1, 3)) if preset != "small-shadow" else int(rng.integers(2, 5))
    for _ in range(n_prims):
        kind = "ellipse" if rng.random() < 0.5 else "rectangle"
        if preset == "small-shadow":
            # rectangle (2a+1)(2b+1) and ellipse pi*a*b both stay under the cap
            cap = SMALL_AREA_FRACTION * h * w
            amax = int((np.sqrt(cap) - 1 - 1e-9) // 2)
            if amax < 1:
                raise ValueError(f"canvas {size} is too small for the small-shadow preset")
            axes = tuple(int(a) for a in rng.integers(1, amax + 1, size=2))
        else:
            lo, hi = max(2, min(h, w) // 10), max(3, min(h, w) // 5)
            axes = tuple(int(a) for a in rng.integers(lo, hi + 1, size=2))
        if preset == "fast-motion":
            fast = int(rng.choice([-1, 1]) * rng.integers(FAST_SPEED, FAST_SPEED + 3))
            slow = int(rng.integers(-2, 3))
            vel = (fast, slow) if rng.random() < 0.5 else (slow, fast)
            darkening = float(rng.uniform(0.55, 0.75))
        else:
            vel = tuple(int(v) for v in rng.integers(-3, 4, size=2))
            darkening = float(rng.uniform(0.45, 0.75))
        # place the trajectory's midpoint near the canvas center
        mid_x = int(rng.integers(w // 4, 3 * w // 4 + 1))
        mid_y = int(rng.integers(h // 4, 3 * h // 4 + 1))
        half = (n_frames - 1) // 2
        center = (mid_x - vel[0] * half, mid_y - vel[1] * half)
        prims.append(Primitive(kind, center, axes, darkening, vel))
    noise = 0.06 if preset == "fast-motion" else 0.02
    return SceneSpec(size=tuple(size), texture_seed=int(rng.integers(2**31)),
                     primitives=prims, n_frames=n_frames, noise=noise)


def generate_videos(n_videos, preset="default", seed=0, size=(64, 64), n_frames=8, prefix="video"):
    """Render ``n_videos`` independent scenes, seeded from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n_videos)
    return [render_video(make_scene(preset, int(s), size, n_frames), f"{prefix}{i:03d}")
            for i, s in enumerate(seeds)]
