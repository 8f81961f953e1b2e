"""Video containers, dataset directory I/O and per-pair raw flow lookup.

Dataset layout::

    <root>/manifest.json
    <root>/<video>/frames/NNNN.png   8-bit RGB
    <root>/<video>/masks/NNNN.png    8-bit grayscale, 0 or 255
    <root>/<video>/flow/NNNN.flo     optional; aligns frame NNNN onto NNNN+1

Stored flows follow the sample-offset convention of :mod:`fgwarp.flowwarp`:
``warp(frame[t], flow[t]) ~ frame[t + 1]``.
"""

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .flownet import estimate_flow_blockmatch, read_flo, write_flo
from .flowwarp import resize_flow
from .tensor import resize_bilinear

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class Video:
    """Frames (1, 3, h, w), binary masks (1, 1, h, w) and optional adjacent flows."""

    name: str
    frames: list
    masks: list = None
    flows: list = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)


@dataclass
class FramePair:
    video: int
    t: int
    tk: int
    frame_t: np.ndarray
    frame_tk: np.ndarray
    mask_t: np.ndarray
    mask_tk: np.ndarray
    flow_fwd: np.ndarray
    flow_bwd: np.ndarray


class FlowLookup:
    """Raw flows for frame pairs, memoized.

    Stored adjacent flows are used when present (the reverse direction is
    their negation); otherwise both directions come from block matching.
    """

    def __init__(self, block=8, search=8):
        self.block = block
        self.search = search
        self._cache = {}

    def __call__(self, video, t, tk):
        key = (id(video), t, tk)
        if key not in self._cache:
            self._cache[key] = self._compute(video, t, tk)
        return self._cache[key]

    def _compute(self, video, t, tk):
        if video.flows is not None and tk == t + 1 and t < len(video.flows):
            fwd = video.flows[t]
            return fwd, 0.0 - fwd
        a, b = video.frames[t], video.frames[tk]
        block = min(self.block, a.shape[2], a.shape[3])
        # estimate_flow_blockmatch(x, y) aligns y onto x's grid
        fwd = estimate_flow_blockmatch(b, a, block, self.search)
        bwd = estimate_flow_blockmatch(a, b, block, self.search)
        return fwd, bwd


def resize_frame(x, size):
    if x.shape[2:] == (size, size):
        return x
    return resize_bilinear(x, size, size)


def make_pair(video, t, tk, size, flow_lookup, index=0):
    fwd, bwd = flow_lookup(video, t, tk)
    masks = video.masks
    return FramePair(
        video=index, t=t, tk=tk,
        frame_t=resize_frame(video.frames[t], size),
        frame_tk=resize_frame(video.frames[tk], size),
        mask_t=None if masks is None else resize_frame(masks[t], size),
        mask_tk=None if masks is None else resize_frame(masks[tk], size),
        flow_fwd=resize_flow(fwd, size, size),
        flow_bwd=resize_flow(bwd, size, size),
    )


# --------------------------------------------------------------- image I/O

def quantize(x):
    """Round [0, 1] values onto the 8-bit grid, as a write/read cycle would."""
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def write_image(path, x):
    """Write a (1, 3, h, w) or (1, 1, h, w) tensor with values in [0, 1]."""
    arr = np.round(np.clip(x[0], 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def read_image(path, channels=3):
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return arr[None, None]
    return arr.transpose(2, 0, 1)[None].copy()


def _list_images(directory):
    if not os.path.isdir(directory):
        return []
    return sorted(f for f in os.listdir(directory) if f.lower().endswith(IMAGE_EXTS))


# ------------------------------------------------------------ dataset I/O

def _replaceable(root):
    if not os.path.isdir(root):
        return False
    return not os.listdir(root) or os.path.isfile(os.path.join(root, "manifest.json"))


def write_dataset(videos, root):
    """Write ``videos`` under ``root`` and return the manifest dictionary.

    The tree is built in a temporary sibling directory and renamed into place,
    so a failure never leaves a partial dataset behind. An existing ``root``
    is replaced only if it is empty or holds a previous dataset.
    """
    root = os.path.abspath(root)
    parent = os.path.dirname(root)
    if os.path.exists(root) and not _replaceable(root):
        raise FileExistsError(f"{root} exists and is not an fgwarp dataset; refusing to overwrite")
    try:
        os.makedirs(parent, exist_ok=True)
        tmp = tempfile.mkdtemp(prefix=".dataset-", dir=parent)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory near {root}: {exc}") from exc
    manifest = {"format": "fgwarp-dataset-v1", "videos": []}
    try:
        for video in videos:
            vdir = os.path.join(tmp, video.name)
            for sub in ("frames", "masks", "flow"):
                os.makedirs(os.path.join(vdir, sub))
            for t, frame in enumerate(video.frames):
                write_image(os.path.join(vdir, "frames", f"{t:04d}.png"), frame)
                if video.masks is not None:
                    write_image(os.path.join(vdir, "masks", f"{t:04d}.png"), video.masks[t])
            for t, flow in enumerate(video.flows or []):
                write_flo(os.path.join(vdir, "flow", f"{t:04d}.flo"), flow)
            entry = {"name": video.name, "frames": len(video.frames),
                     "height": int(video.frames[0].shape[2]), "width": int(video.frames[0].shape[3])}
            entry.update(video.meta)
            manifest["videos"].append(entry)
        with open(os.path.join(tmp, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        if os.path.exists(root):
            shutil.rmtree(root)
        os.replace(tmp, root)
    except OSError as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        raise OSError(f"failed writing dataset to {root}: {exc}") from exc
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def read_video(vdir, name=None):
    frame_files = _list_images(os.path.join(vdir, "frames"))
    if not frame_files:
        raise FileNotFoundError(f"no frames found in {os.path.join(vdir, 'frames')}")
    frames = [read_image(os.path.join(vdir, "frames", f)) for f in frame_files]
    masks = None
    mask_dir = os.path.join(vdir, "masks")
    mask_files = {os.path.splitext(f)[0]: f for f in _list_images(mask_dir)}
    if mask_files:
        masks = []
        for f in frame_files:
            stem = os.path.splitext(f)[0]
            if stem not in mask_files:
                raise FileNotFoundError(f"missing mask for frame {f} in {mask_dir}")
            m = read_image(os.path.join(mask_dir, mask_files[stem]), channels=1)
            masks.append((m >= 0.5).astype(np.float64))
    flows = None
    flow_dir = os.path.join(vdir, "flow")
    if os.path.isdir(flow_dir):
        stems = [os.path.splitext(f)[0] for f in frame_files[:-1]]
        paths = [os.path.join(flow_dir, s + ".flo") for s in stems]
        if paths and all(os.path.isfile(p) for p in paths):
            flows = [read_flo(p) for p in paths]
    return Video(name or os.path.basename(os.path.normpath(vdir)), frames, masks, flows)


def read_dataset(root):
    """Load every video under ``root``; uses the manifest when present."""
    manifest_path = os.path.join(root, "manifest.json")
    if os.path.isfile(manifest_path):
        with open(manifest_path) as fh:
            names = [v["name"] for v in json.load(fh)["videos"]]
    else:
        if not os.path.isdir(root):
            raise FileNotFoundError(f"dataset directory {root} does not exist")
        names = sorted(d for d in os.listdir(root)
                       if os.path.isdir(os.path.join(root, d, "frames")))
    if not names:
        raise FileNotFoundError(f"no videos found under {root}")
    return [read_video(os.path.join(root, n), n) for n in names]
