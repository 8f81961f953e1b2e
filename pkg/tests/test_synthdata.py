import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgwarp.data import FlowLookup, Video, quantize, read_dataset, write_dataset
from fgwarp.flowwarp import warp
from fgwarp.synthdata import (Primitive, SceneSpec, generate_videos,
                              make_scene, render_video, smooth_texture)


def shifted(mask, dx, dy):
    """Shift a 2-D mask by (dx, dy) pixels with zero fill."""
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    keep = (ys + dy >= 0) & (ys + dy < h) & (xs + dx >= 0) & (xs + dx < w)
    out[ys[keep] + dy, xs[keep] + dx] = 1
    return out


def test_zero_velocity_gives_static_video():
    spec = SceneSpec(size=(24, 32), texture_seed=1, noise=0.0, n_frames=4,
                     primitives=[Primitive("ellipse", (10, 12), (5, 4), 0.5)])
    v = render_video(spec)
    assert all(np.array_equal(f, v.frames[0]) for f in v.frames)
    assert all(np.array_equal(m, v.masks[0]) for m in v.masks)
    assert len(v.flows) == 3 and not any(f.any() for f in v.flows)


def test_moving_rectangle_mask_shifts():
    spec = SceneSpec(size=(20, 30), texture_seed=2, n_frames=5,
                     primitives=[Primitive("rectangle", (8, 10), (3, 2), 0.6, (2, 0))])
    v = render_video(spec)
    for t in range(4):
        np.testing.assert_array_equal(v.masks[t + 1][0, 0], shifted(v.masks[t][0, 0], 2, 0))


def test_darkening_bounds():
    with pytest.raises(ValueError):
        Primitive("ellipse", (0, 0), (2, 2), 1.0)
    with pytest.raises(ValueError):
        Primitive("ellipse", (0, 0), (2, 2), 0.0)
    with pytest.raises(ValueError):
        Primitive("blob", (0, 0), (2, 2), 0.5)
    with pytest.raises(ValueError):
        Primitive("ellipse", (0, 0), (2, 2), 0.5, (1.5, 0))
    spec = SceneSpec(size=(16, 16), texture_seed=3, noise=0.0,
                     primitives=[Primitive("rectangle", (8, 8), (3, 3), 0.999)])
    v = render_video(spec)
    bg = smooth_texture((16, 16), 3)
    inside = v.masks[0][0, 0].astype(bool)
    assert (v.frames[0][0][:, inside] < bg[:, inside]).all()
    np.testing.assert_array_equal(v.frames[0][0][:, ~inside], bg[:, ~inside])


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(n_frames=1)


@settings(max_examples=25, deadline=None)
@given(vx=st.integers(-6, 6), vy=st.integers(-6, 6), seed=st.integers(0, 1000),
       kind=st.sampled_from(["ellipse", "rectangle"]))
def test_stored_flow_warps_mask_exactly(vx, vy, seed, kind):
    rng = np.random.default_rng(seed)
    center = (int(rng.integers(-4, 36)), int(rng.integers(-4, 28)))
    axes = tuple(int(a) for a in rng.integers(2, 8, size=2))
    spec = SceneSpec(size=(28, 36), texture_seed=seed, n_frames=3,
                     primitives=[Primitive(kind, center, axes, 0.5, (vx, vy))])
    v = render_video(spec)
    ys, xs = np.mgrid[0:28, 0:36]
    # pixels whose source at frame t lies off canvas come back zero-filled
    onsrc = (ys - vy >= 0) & (ys - vy < 28) & (xs - vx >= 0) & (xs - vx < 36)
    for t in range(2):
        got = warp(v.masks[t], v.flows[t])[0, 0]
        want = v.masks[t + 1][0, 0]
        np.testing.assert_array_equal(got[onsrc], want[onsrc])
        assert not got[~onsrc].any()


def test_frames_and_masks_ranges():
    for v in generate_videos(3, "fast-motion", seed=4):
        assert all(f.min() >= 0 and f.max() <= 1 and f.shape == (1, 3, 64, 64) for f in v.frames)
        assert all(set(np.unique(m)) <= {0.0, 1.0} for m in v.masks)
    tex = smooth_texture((32, 32), 0)
    assert tex.min() == pytest.approx(0.3) and tex.max() == pytest.approx(0.95)


def test_generation_is_deterministic():
    a = generate_videos(2, "default", seed=5, size=(32, 32), n_frames=4)
    b = generate_videos(2, "default", seed=5, size=(32, 32), n_frames=4)
    for va, vb in zip(a, b):
        assert all(x.tobytes() == y.tobytes() for x, y in zip(va.frames, vb.frames))
        assert all(x.tobytes() == y.tobytes() for x, y in zip(va.flows, vb.flows))
    c = generate_videos(2, "default", seed=6, size=(32, 32), n_frames=4)
    assert a[0].frames[0].tobytes() != c[0].frames[0].tobytes()


def test_presets():
    for v in generate_videos(6, "small-shadow", seed=7):
        assert 2 <= len(v.meta["primitives"]) <= 4
        assert all(p["area_fraction"] < 0.02 for p in v.meta["primitives"])
    for v in generate_videos(6, "fast-motion", seed=8):
        assert all(max(abs(c) for c in p["velocity"]) >= 4 for p in v.meta["primitives"])
    with pytest.raises(ValueError):
        make_scene("slow")
    with pytest.raises(ValueError):
        make_scene("small-shadow", size=(8, 8))


def test_dataset_roundtrip(tmp_path):
    videos = generate_videos(2, "default", seed=9, size=(24, 20), n_frames=3)
    root = tmp_path / "ds"
    manifest = write_dataset(videos, root)
    back = read_dataset(root)
    assert [v.name for v in back] == [v.name for v in videos]
    for v, r in zip(videos, back):
        assert all(np.array_equal(quantize(f), g) for f, g in zip(v.frames, r.frames))
        assert all(np.array_equal(m, n) for m, n in zip(v.masks, r.masks))
        assert all(f.tobytes() == g.tobytes() for f, g in zip(v.flows, r.flows))
    # written pixels survive a second cycle unchanged
    write_dataset(back, tmp_path / "ds2")
    again = read_dataset(tmp_path / "ds2")
    assert all(np.array_equal(f, g) for f, g in zip(back[0].frames, again[0].frames))
    on_disk = json.loads((root / "manifest.json").read_text())
    assert on_disk == manifest
    for entry in on_disk["videos"]:
        n = entry["frames"]
        assert len(os.listdir(root / entry["name"] / "frames")) == n
        assert len(os.listdir(root / entry["name"] / "masks")) == n
        assert len(os.listdir(root / entry["name"] / "flow")) == n - 1
        assert all("area" in p for p in entry["primitives"])


def test_reader_accepts_layout_without_manifest_or_flow(tmp_path):
    videos = generate_videos(1, "default", seed=10, size=(16, 16), n_frames=3)
    videos[0].flows = None
    root = tmp_path / "ds"
    write_dataset(videos, root)
    os.remove(root / "manifest.json")
    (back,) = read_dataset(root)
    assert back.flows is None and len(back) == 3 and back.masks is not None


def test_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path / "missing")
    precious = tmp_path / "precious"
    precious.mkdir()
    (precious / "notes.txt").write_text("keep me")
    with pytest.raises(FileExistsError):
        write_dataset(generate_videos(1, size=(16, 16), n_frames=2), precious)
    assert (precious / "notes.txt").read_text() == "keep me"
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        write_dataset(generate_videos(1, size=(16, 16), n_frames=2), blocker / "sub")


def test_flow_lookup_uses_stored_then_blockmatch():
    v = generate_videos(1, "default", seed=11, size=(32, 32), n_frames=4)[0]
    lookup = FlowLookup(block=8, search=4)
    fwd, bwd = lookup(v, 1, 2)
    assert fwd is v.flows[1]
    np.testing.assert_array_equal(bwd, -v.flows[1])
    f2, b2 = lookup(v, 0, 2)
    assert f2.shape == (1, 2, 32, 32) and lookup(v, 0, 2)[0] is f2
    bare = Video("bare", v.frames)
    f3, _ = lookup(bare, 0, 1)
    assert f3.shape == (1, 2, 32, 32)
