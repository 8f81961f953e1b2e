"""Flow-guided feature warping for video shadow detection, in plain numpy."""

from .data import Video, read_dataset, write_dataset
from .detector import BackboneConfig, forward_pair, forward_single, init_params
from .estimator import FlowGuidedShadowDetector
from .evaluation import compute_ber, evaluate_videos, infer_video
from .flowwarp import fgwarp, warp
from .synthdata import generate_videos
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "FlowGuidedShadowDetector", "TrainConfig", "Video",
    "compute_ber", "evaluate_videos", "fgwarp", "forward_pair", "forward_single",
    "generate_videos", "infer_video", "init_params", "read_dataset", "train", "warp",
    "write_dataset",
]
