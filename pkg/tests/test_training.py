import numpy as np
import pytest

from fgwarp.data import Video
from fgwarp.detector import init_params
from fgwarp.synthdata import Primitive, SceneSpec, render_video
from fgwarp.training import (OptimState, TrainConfig, TrainingDiverged,
                             no_fgwarp_frozen, poly_lr, read_config_file,
                             sample_pair, sgd_step, train, write_loss_trace)

SMALL = dict(input_size=32, widths=(4, 8, 8), flow_width=4)


def moving_video(n_frames=6, size=(64, 64), velocity=(2, 1), seed=0):
    spec = SceneSpec(size=size, texture_seed=seed, n_frames=n_frames, primitives=[
        Primitive("ellipse", (24, 28), (9, 7), 0.5, velocity),
        Primitive("rectangle", (44, 40), (5, 8), 0.6, (-velocity[0], 0))])
    return render_video(spec, f"moving{seed}")


def test_poly_lr_values():
    cfg = TrainConfig(max_iters=2000)
    assert poly_lr(0, cfg) == 0.005
    assert poly_lr(2000, cfg) == 0.0
    assert abs(poly_lr(1000, cfg) - 0.005 * 0.5 ** 0.9) < 1e-12
    assert round(poly_lr(1000, cfg), 6) == 0.002679
    with pytest.raises(ValueError):
        poly_lr(2001, cfg)
    with pytest.raises(ValueError):
        poly_lr(-1, cfg)


def test_poly_lr_strictly_decreasing():
    cfg = TrainConfig(max_iters=777)
    lrs = [poly_lr(i, cfg) for i in range(778)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_sgd_zero_gradient_is_noop():
    cfg = TrainConfig(weight_decay=0.0)
    p = {"a.weight": np.array([1.5, -2.0])}
    new, state = sgd_step(p, {"a.weight": np.zeros(2)}, OptimState(), 0.1, cfg)
    np.testing.assert_array_equal(new["a.weight"], p["a.weight"])
    assert state.iteration == 1 and state.velocity["a.weight"].shape == (2,)


def test_sgd_hand_iterated_recurrence():
    cfg = TrainConfig(momentum=0.9, weight_decay=0.0)
    p = {"x.weight": np.array([1.0])}
    g = {"x.weight": np.array([1.0])}
    p, s = sgd_step(p, g, OptimState(), 0.1, cfg)
    assert s.velocity["x.weight"][0] == 1.0 and p["x.weight"][0] == pytest.approx(0.9, abs=1e-15)
    p, s = sgd_step(p, g, s, 0.1, cfg)
    assert s.velocity["x.weight"][0] == pytest.approx(1.9, abs=1e-15)
    assert p["x.weight"][0] == pytest.approx(0.71, abs=1e-15)


def test_sgd_decay_only():
    cfg = TrainConfig(weight_decay=0.0005)
    p = {"c.weight": np.array([1.0]), "c.bias": np.array([1.0]), "fgwarp.l1.fwd.w2": np.array([1.0])}
    g = {k: np.zeros(1) for k in p}
    new, _ = sgd_step(p, g, OptimState(), 0.005, cfg)
    assert new["c.weight"][0] == pytest.approx(0.9999975, abs=1e-15)
    assert new["fgwarp.l1.fwd.w2"][0] == pytest.approx(0.9999975, abs=1e-15)
    assert new["c.bias"][0] == 1.0


def test_sgd_zero_lr_and_frozen_and_buffers():
    cfg = TrainConfig()
    rng = np.random.default_rng(0)
    p = {"a.weight": rng.normal(size=3), "b.weight": rng.normal(size=3),
         "n.running_mean": rng.normal(size=3)}
    g = {k: rng.normal(size=3) for k in p}
    new, _ = sgd_step(p, g, OptimState(), 0.0, cfg)
    assert all(np.array_equal(new[k], p[k]) for k in p)
    new, _ = sgd_step(p, g, OptimState(), 0.1, cfg, frozen={"b.weight"})
    assert np.array_equal(new["b.weight"], p["b.weight"])
    assert np.array_equal(new["n.running_mean"], p["n.running_mean"])
    assert not np.array_equal(new["a.weight"], p["a.weight"])


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        sgd_step({"a.weight": np.zeros(2)}, {"a.weight": np.zeros(3)}, OptimState(), 0.1,
                 TrainConfig())


def test_sample_pair_two_frames_always_first_pair():
    video = moving_video(n_frames=2, size=(32, 32))
    rng = np.random.default_rng(0)
    cfg = TrainConfig(input_size=16)
    for _ in range(20):
        pair = sample_pair([video], rng, cfg)
        assert (pair.t, pair.tk) == (0, 1)
        assert pair.frame_t.shape == (1, 3, 16, 16) and pair.flow_fwd.shape == (1, 2, 16, 16)


def test_sample_pair_uniform_over_videos():
    videos = [moving_video(4, (16, 16), seed=s) for s in (0, 1)]
    rng = np.random.default_rng(1)
    cfg = TrainConfig(input_size=16)
    hits = sum(sample_pair(videos, rng, cfg).video == 0 for _ in range(10000))
    assert abs(hits / 10000 - 0.5) <= 0.03


def test_sample_pair_is_reproducible():
    videos = [moving_video(5, (16, 16), seed=s) for s in (0, 1, 2)]
    cfg = TrainConfig(input_size=16)
    draw = lambda: [(p.video, p.t) for p in  # noqa: E731
                    (sample_pair(videos, r, cfg) for r in [np.random.default_rng(9)] for _ in range(30))]
    assert draw() == draw()


def test_sample_pair_empty():
    with pytest.raises(ValueError):
        sample_pair([], np.random.default_rng(0), TrainConfig())


def test_max_iters_zero_returns_initialization():
    video = moving_video(3, (32, 32))
    cfg = TrainConfig(max_iters=0, **SMALL)
    res = train([video], cfg)
    init = init_params(cfg.backbone, cfg.seed)
    assert res.losses.shape == (0, 3)
    assert all(np.array_equal(res.params[k], init[k]) for k in init)


def test_training_is_deterministic(tmp_path):
    videos = [moving_video(4, (32, 32), seed=s) for s in (0, 1)]
    cfg = TrainConfig(max_iters=6, **SMALL)
    a, b = train(videos, cfg), train(videos, cfg)
    assert a.losses.tobytes() == b.losses.tobytes()
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    write_loss_trace(tmp_path / "a.txt", a.losses)
    write_loss_trace(tmp_path / "b.txt", b.losses)
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    c = train(videos, TrainConfig(max_iters=6, seed=1, **SMALL))
    assert c.losses.tobytes() != a.losses.tobytes()


def test_no_fgwarp_keeps_exchange_and_flowcnn_frozen():
    videos = [moving_video(4, (32, 32))]
    cfg = TrainConfig(max_iters=4, **SMALL)
    res = train(videos, cfg, use_fgwarp=False)
    init = init_params(cfg.backbone, cfg.seed)
    frozen = no_fgwarp_frozen(init)
    assert all(np.array_equal(res.params[k], init[k]) for k in frozen)
    assert not np.array_equal(res.params["decoder.head.weight"], init["decoder.head.weight"])


def test_identical_frames_keep_branch_losses_equal():
    spec = SceneSpec(size=(32, 32), texture_seed=3, n_frames=4, primitives=[
        Primitive("ellipse", (15, 15), (6, 5), 0.5, (0, 0))])
    video = render_video(spec)
    video.frames = [video.frames[0]] * len(video)
    res = train([video], TrainConfig(max_iters=15, **SMALL))
    np.testing.assert_array_equal(res.losses[:, 1], res.losses[:, 2])


def test_loss_halves_on_a_single_video():
    res = train([moving_video(6)], TrainConfig(max_iters=200, input_size=64))
    first, last = res.losses[:10, 0].mean(), res.losses[-10:, 0].mean()
    assert last < 0.5 * first


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_training_names_iteration():
    video = moving_video(3, (32, 32))
    with pytest.raises(TrainingDiverged, match="iteration"):
        train([video], TrainConfig(max_iters=50, base_lr=1e300, **SMALL))


def test_training_rejects_unlabelled_videos():
    video = moving_video(3, (32, 32))
    with pytest.raises(ValueError, match="masks"):
        train([Video("x", video.frames)], TrainConfig(max_iters=1, **SMALL))


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("# desk run\nbase_lr = 0.01\nmax_iters = 50  # short\nwidths = 4, 8, 8\n\n")
    cfg = TrainConfig.from_file(path, seed=3, max_iters=None)
    assert (cfg.base_lr, cfg.max_iters, cfg.widths, cfg.seed) == (0.01, 50, (4, 8, 8), 3)
    path2 = tmp_path / "again.cfg"
    path2.write_text("\n".join(cfg.to_lines()))
    assert TrainConfig.from_file(path2) == cfg
    assert read_config_file(path)["base_lr"] == "0.01"
    path.write_text("colour = blue\n")
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_file(path)
    path.write_text("no equals sign\n")
    with pytest.raises(ValueError, match="key = value"):
        TrainConfig.from_file(path)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(base_lr=0)
    with pytest.raises(ValueError):
        TrainConfig(k=0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
