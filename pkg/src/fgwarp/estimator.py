"""scikit-learn style wrapper around training and two-pass inference."""

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_tensor4
from .data import Video
from .evaluation import binarize, evaluate_videos, infer_video
from .training import TrainConfig, train


def _as_videos(X, y=None, require_masks=False):
    """Accept a list of :class:`Video` or a list of frame sequences plus ``y`` masks."""
    if isinstance(X, Video):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("X holds no videos")
    if y is not None:
        y = list(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} videos but y has {len(y)} mask sequences")
    videos = []
    for i, item in enumerate(X):
        if isinstance(item, Video):
            name, frames, masks, flows = item.name, item.frames, item.masks, item.flows
        else:
            name, frames, masks, flows = f"video{i:03d}", list(item), None, None
        if y is not None:
            masks = list(y[i])
        if not frames:
            raise ValueError(f"video {name} has no frames")
        frames = [check_tensor4(f, f"{name} frame", channels=3) for f in frames]
        v = Video(name, frames, masks, flows)
        if v.masks is not None and len(v.masks) != len(v.frames):
            raise ValueError(f"video {v.name}: {len(v.masks)} masks for {len(v.frames)} frames")
        if require_masks and v.masks is None:
            raise ValueError(f"video {v.name} has no masks")
        videos.append(v)
    return videos


class FlowGuidedShadowDetector(BaseEstimator):
    """Video shadow detector with flow-guided feature exchange between frame pairs.

    ``X`` is a list of :class:`fgwarp.data.Video` (masks give the targets) or
    a list of frame sequences with ``y`` a matching list of mask sequences.
    Predictions come back as one list of (1, 1, h, w) maps per video.
    """

    def __init__(self, use_fgwarp=True, max_iters=2000, base_lr=0.005, momentum=0.9,
                 weight_decay=0.0005, poly_power=0.9, input_size=64, widths=(8, 16, 32),
                 flow_width=16, threshold=0.5, seed=0):
        self.use_fgwarp = use_fgwarp
        self.max_iters = max_iters
        self.base_lr = base_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.poly_power = poly_power
        self.input_size = input_size
        self.widths = widths
        self.flow_width = flow_width
        self.threshold = threshold
        self.seed = seed

    def _config(self):
        return TrainConfig(base_lr=self.base_lr, momentum=self.momentum,
                           weight_decay=self.weight_decay, max_iters=self.max_iters,
                           poly_power=self.poly_power, input_size=self.input_size,
                           seed=self.seed, widths=self.widths, flow_width=self.flow_width)

    def fit(self, X, y=None):
        videos = _as_videos(X, y, require_masks=True)
        config = self._config()
        result = train(videos, config, use_fgwarp=self.use_fgwarp)
        self.params_ = result.params
        self.config_ = config.backbone
        self.loss_curve_ = result.losses[:, 0].copy()
        self.n_iter_ = config.max_iters
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        return [infer_video(v.frames, self.params_, self.config_, v.flows, self.input_size,
                            self.use_fgwarp).masks for v in _as_videos(X)]

    def predict(self, X):
        return [[binarize(m, self.threshold) for m in masks] for masks in self.predict_proba(X)]

    def evaluate(self, X, y=None):
        """Pooled :class:`fgwarp.evaluation.MetricReport` over all frames."""
        check_is_fitted(self, "params_")
        videos = _as_videos(X, y, require_masks=True)
        report, _ = evaluate_videos(
            videos, lambda v: infer_video(v.frames, self.params_, self.config_, v.flows,
                                          self.input_size, self.use_fgwarp).masks,
            self.threshold)
        return report

    def score(self, X, y=None):
        """Balanced accuracy, ``1 - BER / 100``."""
        return float(1.0 - self.evaluate(X, y).ber / 100.0)

