"""Balanced error rate scoring and the two-pass video inference protocol."""

from dataclasses import dataclass, field

import numpy as np

from ._validation import ShapeError
from .data import FlowLookup, Video, make_pair, resize_frame
from .detector import BackboneConfig, forward_pair, forward_single
from .tensor import resize_bilinear

DEFAULT_THRESHOLD = 0.5


def binarize(mask, threshold=DEFAULT_THRESHOLD):
    """Positive where ``mask >= threshold``."""
    return np.asarray(mask) >= threshold


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


def accumulate_confusion(pred, gt, counts=None):
    """Add per-pixel outcomes of boolean ``pred`` against boolean ``gt`` to ``counts``."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = pred.size - tp - fp - fn
    new = ConfusionCounts(tp, tn, fp, fn)
    return new if counts is None else counts + new


@dataclass(frozen=True)
class MetricReport:
    """BER and per-class error rates in percent.

    A class missing from the ground truth has its error set to ``None``, is
    listed in ``missing_classes`` and is left out of the BER average.
    """

    ber: float
    shadow_err: float
    nonshadow_err: float
    counts: ConfusionCounts
    missing_classes: tuple = field(default=())

    def to_lines(self):
        fmt = lambda v: "nan" if v is None else repr(float(v))  # noqa: E731
        c = self.counts
        return [f"ber = {fmt(self.ber)}", f"shadow_err = {fmt(self.shadow_err)}",
                f"nonshadow_err = {fmt(self.nonshadow_err)}",
                f"tp = {c.tp}", f"tn = {c.tn}", f"fp = {c.fp}", f"fn = {c.fn}",
                "missing_classes = " + ",".join(self.missing_classes)]


def compute_ber(counts):
    c = counts
    rates, missing = [], []
    shadow_err = nonshadow_err = None
    if c.tp + c.fn > 0:
        tpr = c.tp / (c.tp + c.fn)
        shadow_err = 100.0 * c.fn / (c.tp + c.fn)
        rates.append(tpr)
    else:
        missing.append("shadow")
    if c.tn + c.fp > 0:
        tnr = c.tn / (c.tn + c.fp)
        nonshadow_err = 100.0 * c.fp / (c.tn + c.fp)
        rates.append(tnr)
    else:
        missing.append("nonshadow")
    if not rates:
        raise ValueError("no evaluated pixels: both classes are empty")
    ber = 100.0 * (1.0 - sum(rates) / len(rates))
    return MetricReport(ber, shadow_err, nonshadow_err, c, tuple(missing))


@dataclass
class InferenceResult:
    masks: list  # final per-frame probability maps at native resolution
    passes: list  # per frame, the list of per-pass maps that were averaged
    single_frame_fallback: bool = False


def infer_video(frames, params, config=None, flows=None, input_size=64, use_fgwarp=True,
                flow_lookup=None):
    """Predict a shadow map for every frame of a video.

    Every adjacent pair goes through :func:`forward_pair`; interior frames
    average their two predictions, first and last frames keep their single
    one. ``flows`` may hold the stored adjacent flows (see
    :class:`fgwarp.data.Video`); block matching is used otherwise.
    """
    config = config or BackboneConfig()
    frames = list(frames)
    if not frames:
        raise ValueError("no frames to infer")
    native = frames[0].shape[2:]
    if len(frames) < 2:
        mask = forward_single(resize_frame(frames[0], input_size), params, config)
        mask = resize_bilinear(mask, *native)
        return InferenceResult([mask], [[mask]], single_frame_fallback=True)
    video = Video("inference", frames, None, flows)
    lookup = flow_lookup or FlowLookup()
    passes = [[] for _ in frames]
    for t in range(len(frames) - 1):
        pair = make_pair(video, t, t + 1, input_size, lookup)
        m_t, m_tk, _ = forward_pair(pair.frame_t, pair.frame_tk, pair.flow_fwd, pair.flow_bwd,
                                    params, config, training=False, use_fgwarp=use_fgwarp)
        passes[t].append(resize_bilinear(m_t, *native))
        passes[t + 1].append(resize_bilinear(m_tk, *native))
    masks = [p[0] if len(p) == 1 else 0.5 * (p[0] + p[1]) for p in passes]
    return InferenceResult(masks, passes)


def evaluate_videos(videos, predict, threshold=DEFAULT_THRESHOLD):
    """Pool confusion counts over all frames of ``videos``.

    ``predict(video)`` returns one probability map per frame at native
    resolution. Returns ``(report, predictions)``.
    """
    counts = ConfusionCounts()
    predictions = []
    for video in videos:
        if video.masks is None:
            raise ValueError(f"video {video.name} has no ground-truth masks")
        masks = predict(video)
        if len(masks) != len(video):
            raise ValueError(f"predictor returned {len(masks)} masks for {len(video)} frames")
        for pred, gt in zip(masks, video.masks):
            counts = accumulate_confusion(binarize(pred, threshold), binarize(gt), counts)
        predictions.append(masks)
    return compute_ber(counts), predictions
