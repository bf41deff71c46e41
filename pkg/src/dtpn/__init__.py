"""Single-shot temporal activity detection at desk scale.

Pipeline: dynamic multi-rate sampling of arbitrary-length inputs into a
fixed-size feature pyramid, a two-branch multi-scale temporal network with
local and global context, anchor-based prediction heads, multi-task
training, temporal NMS, and mAP evaluation over a tIoU threshold sweep.
"""

from dtpn.errors import (
    ConfigError,
    DtpnError,
    FormatError,
    NumericalError,
    ValidationError,
)
from dtpn.io_formats import (
    Corpus,
    Detection,
    GroundTruthSegment,
    PyramidFeature,
    VideoMeta,
)
from dtpn.model import Anchor, AnchorPrediction, ModelConfig, PyramidDetector
from dtpn.sampling import SamplingConfig, SyntheticBackbone
from dtpn.train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "Anchor",
    "AnchorPrediction",
    "ConfigError",
    "Corpus",
    "Detection",
    "DtpnError",
    "FormatError",
    "GroundTruthSegment",
    "ModelConfig",
    "NumericalError",
    "PyramidDetector",
    "PyramidFeature",
    "SamplingConfig",
    "SyntheticBackbone",
    "TrainConfig",
    "ValidationError",
    "VideoMeta",
    "__version__",
]
