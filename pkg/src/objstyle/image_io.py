"""Image and segmentation-mask I/O.

Images are ``float32`` arrays of shape (H, W, 3) with values in [0, 1].
Masks are indexed-color rasters plus a palette mapping ``#RRGGBB`` colors
to object labels; on load they become a :class:`SegmentationMask`, a stack
of binary channels that partitions the pixel grid.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .exceptions import (
    DimensionMismatch,
    TooSmall,
    UnmappedColor,
    UnreadableFile,
    WriteFailure,
)
from .validation import MIN_SIDE, check_image

_HEX = re.compile(r"^#?([0-9a-fA-F]{6})$")


@dataclass(frozen=True, eq=False)
class SegmentationMask:
    """Binary object channels of shape (K, H, W) with one label per channel."""

    channels: np.ndarray
    labels: tuple

    def __post_init__(self):
        channels = np.asarray(self.channels)
        if channels.ndim != 3:
            raise ValueError(f"channels must be (K, H, W), got {channels.shape}")
        labels = tuple(self.labels)
        if len(labels) != channels.shape[0] or len(labels) == 0:
            raise ValueError("need one label per channel and at least one channel")
        if any(not isinstance(lab, str) or not lab for lab in labels):
            raise ValueError("labels must be non-empty strings")
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate labels in {labels}")
        if not np.isin(channels, (0, 1)).all():
            raise ValueError("channels must be exactly 0 or 1")
        if not (channels.sum(axis=0) == 1).all():
            raise ValueError("channels must partition the grid (sum to 1 at every pixel)")
        channels = channels.astype(np.uint8)
        channels.setflags(write=False)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1:]

    @property
    def n_objects(self) -> int:
        return len(self.labels)

    def channel(self, label: str) -> np.ndarray:
        try:
            return self.channels[self.labels.index(label)]
        except ValueError:
            raise KeyError(label) from None

    def to_index(self) -> np.ndarray:
        """Per-pixel channel index, shape (H, W)."""
        return self.channels.argmax(axis=0)

    @classmethod
    def from_index(cls, index: np.ndarray, labels: Sequence[str]) -> "SegmentationMask":
        index = np.asarray(index)
        channels = np.stack([(index == k) for k in range(len(labels))]).astype(np.uint8)
        return cls(channels, tuple(labels))

    @classmethod
    def full(cls, height: int, width: int, label: str = "image") -> "SegmentationMask":
        return cls(np.ones((1, height, width), dtype=np.uint8), (label,))


def parse_color(color) -> tuple[int, int, int]:
    if isinstance(color, str):
        m = _HEX.match(color.strip())
        if not m:
            raise ValueError(f"bad color {color!r}; expected #RRGGBB")
        h = m.group(1)
        return int(h[0:2], 16), int(h[2:4], 16), int(h[4:6], 16)
    r, g, b = color
    return int(r), int(g), int(b)


def format_color(rgb) -> str:
    return "#{:02X}{:02X}{:02X}".format(*(int(v) for v in rgb))


def load_palette(path) -> dict:
    """Read a palette JSON ``{"#RRGGBB": "label", ...}``."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UnreadableFile(f"cannot read palette {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UnreadableFile(f"palette {path} must be a JSON object")
    return {parse_color(k): str(v) for k, v in raw.items()}


def _read_raster(path, flags) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise UnreadableFile(f"no such file: {path}")
    data = np.fromfile(str(path), dtype=np.uint8)
    raster = cv2.imdecode(data, flags) if data.size else None
    if raster is None:
        raise UnreadableFile(f"cannot decode image: {path}")
    return raster


def _fit_size(height: int, width: int, max_side: int) -> tuple[int, int]:
    longest = max(height, width)
    if longest <= max_side:
        return height, width
    scale = max_side / longest
    return max(1, round(height * scale)), max(1, round(width * scale))


def load_image(path, max_side: int = 512) -> np.ndarray:
    """Load an 8- or 16-bit RGB(A) image, scaled to [0, 1].

    Alpha is dropped. If the longest side exceeds ``max_side`` the image is
    shrunk with area averaging, keeping the aspect ratio.
    """
    if max_side < 1:
        raise ValueError("max_side must be positive")
    raster = _read_raster(path, cv2.IMREAD_UNCHANGED)
    if raster.dtype == np.uint8:
        scale = 255.0
    elif raster.dtype == np.uint16:
        scale = 65535.0
    else:
        raise UnreadableFile(f"unsupported sample type {raster.dtype} in {path}")
    if raster.ndim == 2:
        raster = np.repeat(raster[:, :, None], 3, axis=2)
    elif raster.shape[2] == 4:
        raster = cv2.cvtColor(raster, cv2.COLOR_BGRA2RGB)
    elif raster.shape[2] == 3:
        raster = cv2.cvtColor(raster, cv2.COLOR_BGR2RGB)
    else:
        raise UnreadableFile(f"unsupported channel count {raster.shape[2]} in {path}")
    image = raster.astype(np.float32) / np.float32(scale)

    h, w = image.shape[:2]
    th, tw = _fit_size(h, w, max_side)
    if (th, tw) != (h, w):
        image = cv2.resize(image, (tw, th), interpolation=cv2.INTER_AREA)
        image = np.clip(image, 0.0, 1.0)
    if min(image.shape[:2]) < MIN_SIDE:
        raise TooSmall(f"{path} is {image.shape[0]}x{image.shape[1]} after resize; need >= {MIN_SIDE}")
    return image


def to_uint8(image) -> np.ndarray:
    """Clamp to [0, 1] and round to the nearest of 256 levels."""
    arr = np.asarray(image, dtype=np.float64)
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(raster: np.ndarray) -> np.ndarray:
    return raster.astype(np.float32) / np.float32(255.0)


def quantize(image) -> np.ndarray:
    """Snap an image onto the 8-bit grid exactly as a save/load round trip would."""
    return from_uint8(to_uint8(image))


def save_image(image, path) -> None:
    """Write ``image`` as an 8-bit RGB PNG."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {arr.shape}")
    path = Path(path)
    if not path.parent.is_dir():
        raise WriteFailure(f"parent directory does not exist: {path.parent}")
    bgr = cv2.cvtColor(to_uint8(arr), cv2.COLOR_RGB2BGR)
    ok, buf = cv2.imencode(".png", bgr)
    if not ok:
        raise WriteFailure(f"PNG encoding failed for {path}")
    try:
        path.write_bytes(buf.tobytes())
    except OSError as exc:
        raise WriteFailure(f"cannot write {path}: {exc}") from exc


def load_mask(path, image, palette: Mapping, resize: bool = True) -> SegmentationMask:
    """Rasterize an indexed-color mask into labeled binary channels.

    Every distinct color in the raster must appear in ``palette``. Colors
    mapped to the same label are merged into one channel. Channels follow
    the palette order, restricted to labels actually present.
    """
    palette = {parse_color(k): str(v) for k, v in palette.items()}
    path = Path(path)
    if not path.is_file():
        raise UnreadableFile(f"no such file: {path}")
    try:
        with PILImage.open(path) as im:
            rgb = np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise UnreadableFile(f"cannot decode mask {path}: {exc}") from exc

    h, w = np.asarray(image).shape[:2]
    if rgb.shape[:2] != (h, w):
        if not resize:
            raise DimensionMismatch(f"mask {path} is {rgb.shape[:2]}, image is {(h, w)}")
        rgb = cv2.resize(rgb, (w, h), interpolation=cv2.INTER_NEAREST)

    codes = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
    present = np.unique(codes)
    code_of = {(r << 16) | (g << 8) | b: label for (r, g, b), label in palette.items()}
    missing = [c for c in present.tolist() if c not in code_of]
    if missing:
        names = ", ".join("#{:06X}".format(c) for c in missing)
        raise UnmappedColor(f"colors {names} in {path} are not in the palette")

    labels = []
    for label in palette.values():
        if label not in labels:
            labels.append(label)
    present_labels = {code_of[c] for c in present.tolist()}
    labels = [lab for lab in labels if lab in present_labels]
    channels = np.zeros((len(labels), h, w), dtype=np.uint8)
    for code in present.tolist():
        channels[labels.index(code_of[code])] |= (codes == code).astype(np.uint8)
    return SegmentationMask(channels, tuple(labels))


def save_mask(mask: SegmentationMask, path, palette: Mapping) -> None:
    """Write ``mask`` as an indexed PNG using the first color of each label in ``palette``."""
    color_of = {}
    for color, label in palette.items():
        color_of.setdefault(str(label), parse_color(color))
    try:
        colors = [color_of[lab] for lab in mask.labels]
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} has no palette color") from None
    flat = []
    for c in colors:
        flat.extend(c)
    im = PILImage.fromarray(mask.to_index().astype(np.uint8), mode="P")
    im.putpalette(flat + [0] * (768 - len(flat)))
    try:
        im.save(Path(path), format="PNG")
    except OSError as exc:
        raise WriteFailure(f"cannot write {path}: {exc}") from exc


def downsample_mask(mask: SegmentationMask, target_h: int, target_w: int) -> SegmentationMask:
    """Resize a mask to feature resolution.

    Channels are average-pooled, then every pixel is assigned to its
    highest-scoring channel; ties go to the lowest channel index, so the
    result is again an exact partition.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError("target dims must be >= 1")
    if mask.shape == (target_h, target_w):
        return mask
    t = torch.from_numpy(mask.channels.astype(np.float64))[None]
    pooled = F.adaptive_avg_pool2d(t, (target_h, target_w))[0].numpy()
    # np.argmax returns the first maximum, which is the tie-break rule.
    index = pooled.argmax(axis=0)
    return SegmentationMask.from_index(index, mask.labels)


__all__ = [
    "SegmentationMask",
    "check_image",
    "downsample_mask",
    "from_uint8",
    "load_image",
    "load_mask",
    "load_palette",
    "quantize",
    "save_image",
    "save_mask",
    "to_uint8",
]
