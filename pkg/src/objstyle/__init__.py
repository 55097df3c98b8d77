"""Object-aware photo style transfer driven by segmentation masks and an object map."""

from .engine import RunConfig, RunState, prepare, run, step
from .estimator import DeepObjStyle
from .image_io import SegmentationMask, load_image, load_mask, save_image
from .losses import LossWeights
from .objectmap import ObjectMap, StpKind, build_map, classify

__version__ = "0.1.0"

__all__ = [
    "DeepObjStyle",
    "LossWeights",
    "ObjectMap",
    "RunConfig",
    "RunState",
    "SegmentationMask",
    "StpKind",
    "build_map",
    "classify",
    "load_image",
    "load_mask",
    "prepare",
    "run",
    "save_image",
    "step",
]
