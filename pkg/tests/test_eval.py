import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgwarp._validation import ShapeError
from fgwarp.data import Video
from fgwarp.detector import BackboneConfig, init_params
from fgwarp.evaluation import (ConfusionCounts, accumulate_confusion, binarize,
                               compute_ber, evaluate_videos, infer_video)

TINY = BackboneConfig(widths=(4, 8, 8), flow_width=4)


def brute_counts(pred, gt):
    tp = tn = fp = fn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, tn, fp, fn)


def test_binarize_rules():
    assert binarize(np.full((2, 2), 0.6)).all()
    assert binarize(np.array([0.5]))[0]
    assert not binarize(np.array([0.4999999]))[0]
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(1, 1, 6, 6))
    np.testing.assert_array_equal(binarize(x, 0.3), x >= 0.3)


def test_confusion_examples():
    gt = np.ones((4, 4), bool)
    assert accumulate_confusion(gt, gt) == ConfusionCounts(tp=16)
    rng = np.random.default_rng(1)
    gt = rng.random((6, 6)) < 0.4
    c = accumulate_confusion(~gt, gt)
    assert c.tp == 0 and c.tn == 0 and c.total == 36
    with pytest.raises(ShapeError):
        accumulate_confusion(np.ones((2, 2)), np.ones((2, 3)))


def test_confusion_matches_brute_force():
    rng = np.random.default_rng(2)
    total = ConfusionCounts()
    running = None
    for _ in range(20):
        pred, gt = rng.random((2, 8, 8)) < 0.5
        want = brute_counts(pred, gt)
        assert accumulate_confusion(pred, gt) == want
        total = total + want
        running = accumulate_confusion(pred, gt, running)
    assert running == total


def test_ber_hand_case():
    r = compute_ber(ConfusionCounts(tp=1, tn=3, fp=1, fn=1))
    assert r.ber == 37.5 and r.shadow_err == 50.0 and r.nonshadow_err == 25.0
    assert r.missing_classes == ()


def test_ber_perfect_and_inverted():
    rng = np.random.default_rng(3)
    gt = rng.random((16, 16)) < 0.3
    good = compute_ber(accumulate_confusion(gt, gt))
    assert (good.ber, good.shadow_err, good.nonshadow_err) == (0.0, 0.0, 0.0)
    assert compute_ber(accumulate_confusion(~gt, gt)).ber == 100.0


def test_missing_class_is_flagged_and_excluded():
    r = compute_ber(ConfusionCounts(tp=0, tn=8, fp=2, fn=0))
    assert r.missing_classes == ("shadow",) and r.shadow_err is None
    assert r.ber == pytest.approx(20.0) and r.nonshadow_err == pytest.approx(20.0)
    r = compute_ber(ConfusionCounts(tp=3, tn=0, fp=0, fn=1))
    assert r.missing_classes == ("nonshadow",) and r.ber == pytest.approx(25.0)
    assert "shadow_err = nan" in compute_ber(ConfusionCounts(tn=1)).to_lines()
    with pytest.raises(ValueError):
        compute_ber(ConfusionCounts())


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_ber_depends_only_on_counts(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.random((2, 16, 16)) < 0.5
    perm = rng.permutation(256)
    a = compute_ber(accumulate_confusion(pred, gt)).ber
    b = compute_ber(accumulate_confusion(pred.ravel()[perm], gt.ravel()[perm])).ber
    assert a == b


def test_ber_additivity():
    rng = np.random.default_rng(4)
    p1, g1, p2, g2 = rng.random((4, 8, 8)) < 0.5
    merged = accumulate_confusion(np.concatenate([p1, p2]), np.concatenate([g1, g2]))
    summed = accumulate_confusion(p1, g1) + accumulate_confusion(p2, g2)
    assert merged == summed and compute_ber(merged) == compute_ber(summed)


def frames(n, rng, h=16, w=16):
    return [rng.uniform(0, 1, size=(1, 3, h, w)) for _ in range(n)]


def test_infer_two_frames_uses_one_prediction_each():
    rng = np.random.default_rng(5)
    res = infer_video(frames(2, rng), init_params(TINY, 0), TINY, input_size=16)
    assert len(res.masks) == 2 and [len(p) for p in res.passes] == [1, 1]
    for m, p in zip(res.masks, res.passes):
        assert m is p[0]


def test_infer_three_frames_identical_passes():
    rng = np.random.default_rng(6)
    # at initialization both passes over the middle frame agree exactly
    res = infer_video(frames(3, rng), init_params(TINY, 0), TINY, input_size=16)
    a, b = res.passes[1]
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(res.masks[1], a)


def test_infer_four_frames_interior_means():
    rng = np.random.default_rng(7)
    p = init_params(TINY, 0)
    for k in p:
        if k.endswith(".w2"):
            p[k] = rng.uniform(-1, 1, size=p[k].shape)
    fs = frames(4, rng, 20, 24)
    res = infer_video(fs, p, TINY, input_size=16)
    assert len(res.masks) == 4 and [len(q) for q in res.passes] == [1, 2, 2, 1]
    for i in (1, 2):
        a, b = res.passes[i]
        assert not np.array_equal(a, b)
        assert np.abs(res.masks[i] - (a + b) / 2).max() <= 1e-12
    assert all(m.shape == (1, 1, 20, 24) for m in res.masks)


def test_infer_single_frame_fallback():
    rng = np.random.default_rng(8)
    res = infer_video(frames(1, rng), init_params(TINY, 0), TINY, input_size=16)
    assert res.single_frame_fallback and len(res.masks) == 1
    with pytest.raises(ValueError):
        infer_video([], init_params(TINY, 0), TINY)


def test_evaluate_videos_pools_counts():
    rng = np.random.default_rng(9)
    gts = [[(rng.random((1, 1, 4, 4)) < 0.5).astype(float) for _ in range(3)] for _ in range(2)]
    videos = [Video(f"v{i}", frames(3, rng, 4, 4), g) for i, g in enumerate(gts)]
    report, preds = evaluate_videos(videos, lambda v: v.masks)
    assert report.ber == 0.0 and len(preds) == 2
    report, _ = evaluate_videos(videos, lambda v: [1.0 - m for m in v.masks])
    assert report.ber == 100.0
    assert report.counts.total == 2 * 3 * 16
    with pytest.raises(ValueError):
        evaluate_videos(videos, lambda v: v.masks[:2])
