"""Frozen VGG19 feature taps.

Layers are addressed by the usual names: ``conv{b}_{i}`` (pre-activation),
``relu{b}_{i}`` (post-activation) and ``pool{b}``. Only the trunk up to the
deepest requested tap is evaluated.
"""

from __future__ import annotations

import functools
import hashlib
import logging
import os
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torchvision

from .exceptions import TooSmall, UnknownLayer, WeightsUnavailable

logger = logging.getLogger(__name__)

WEIGHTS_ENV = "OBJSTYLE_VGG_WEIGHTS"
RANDOM_WEIGHTS = "random"
_TORCH_HUB_FILE = "vgg19-dcbb9e9d.pth"

# (block, number of convs) for VGG19
_VGG19_BLOCKS = ((1, 2), (2, 2), (3, 4), (4, 4), (5, 4))

CAFFE_MEAN = (123.68, 116.779, 103.939)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _layer_names() -> list[str]:
    names = []
    for block, n_conv in _VGG19_BLOCKS:
        for i in range(1, n_conv + 1):
            names += [f"conv{block}_{i}", f"relu{block}_{i}"]
        names.append(f"pool{block}")
    return names


LAYER_NAMES = tuple(_layer_names())
LAYER_INDEX = {name: i for i, name in enumerate(LAYER_NAMES)}


def layer_stride(layer: str) -> int:
    """Spatial downsampling factor at ``layer``."""
    if layer not in LAYER_INDEX:
        raise UnknownLayer(f"unknown layer {layer!r}")
    idx = LAYER_INDEX[layer]
    return 2 ** sum(1 for n in LAYER_NAMES[: idx + 1] if n.startswith("pool"))


def feature_size(layer: str, height: int, width: int) -> tuple[int, int]:
    """Deterministic (H_l, W_l) of ``layer`` for an input of the given size."""
    h, w = height, width
    if layer not in LAYER_INDEX:
        raise UnknownLayer(f"unknown layer {layer!r}")
    for name in LAYER_NAMES[: LAYER_INDEX[layer] + 1]:
        if name.startswith("pool"):
            h, w = h // 2, w // 2
    return h, w


def resolve_weights(weights: str | os.PathLike | None) -> str:
    """Pick the weights source: explicit argument, then env var, then torch hub cache."""
    if weights is None:
        weights = os.environ.get(WEIGHTS_ENV)
    if weights is None:
        hub = Path(torch.hub.get_dir()) / "checkpoints" / _TORCH_HUB_FILE
        weights = str(hub)
    weights = str(weights)
    if weights == RANDOM_WEIGHTS or weights.startswith(RANDOM_WEIGHTS + ":"):
        return weights
    if not Path(weights).is_file():
        raise WeightsUnavailable(
            f"VGG19 weights not found at {weights}; set {WEIGHTS_ENV} to a torchvision "
            f"vgg19 state_dict, or to '{RANDOM_WEIGHTS}' for an untrained test backbone"
        )
    return weights


class VGGFeatures(nn.Module):
    """VGG19 convolutional trunk with named taps and frozen parameters."""

    def __init__(self, weights: str | None = None, pooling: str = "max", preprocess: str = "caffe"):
        super().__init__()
        if pooling not in ("max", "avg"):
            raise ValueError("pooling must be 'max' or 'avg'")
        if preprocess not in ("caffe", "imagenet", "none"):
            raise ValueError("preprocess must be 'caffe', 'imagenet' or 'none'")
        source = resolve_weights(weights)
        self.source = source
        self.pooling = pooling
        self.preprocess = preprocess

        if source.startswith(RANDOM_WEIGHTS):
            seed = int(source.split(":", 1)[1]) if ":" in source else 0
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                trunk = torchvision.models.vgg19(weights=None).features
            logger.warning("using an untrained VGG19 backbone (seed %d); outputs are not stylizations", seed)
        else:
            trunk = torchvision.models.vgg19(weights=None).features
            try:
                state = torch.load(source, map_location="cpu", weights_only=True)
            except Exception as exc:
                raise WeightsUnavailable(f"cannot load VGG19 weights from {source}: {exc}") from exc
            if isinstance(state, dict) and "state_dict" in state:
                state = state["state_dict"]
            state = {k[len("features."):] if k.startswith("features.") else k: v for k, v in state.items()}
            state = {k: v for k, v in state.items() if k.split(".")[0].isdigit()}
            try:
                trunk.load_state_dict(state)
            except RuntimeError as exc:
                raise WeightsUnavailable(f"{source} is not a VGG19 state dict: {exc}") from exc

        layers = []
        for module in trunk:
            if isinstance(module, nn.MaxPool2d) and pooling == "avg":
                module = nn.AvgPool2d(kernel_size=2, stride=2)
            elif isinstance(module, nn.ReLU):
                module = nn.ReLU(inplace=False)
            layers.append(module)
        self.layers = nn.ModuleList(layers)
        assert len(self.layers) == len(LAYER_NAMES)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

        if preprocess == "caffe":
            mean, std, scale = CAFFE_MEAN, (1.0, 1.0, 1.0), 255.0
        elif preprocess == "imagenet":
            mean, std, scale = IMAGENET_MEAN, IMAGENET_STD, 1.0
        else:
            mean, std, scale = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 1.0
        self.register_buffer("_mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("_std", torch.tensor(std).view(1, 3, 1, 1))
        self._scale = scale

    @property
    def dtype(self) -> torch.dtype:
        return self.layers[0].weight.dtype

    def forward(self, x: torch.Tensor, taps: Sequence[str]) -> "OrderedDict[str, torch.Tensor]":
        wanted = set(taps)
        for t in wanted:
            if t not in LAYER_INDEX:
                raise UnknownLayer(f"unknown layer {t!r}")
        last = max(LAYER_INDEX[t] for t in wanted)
        x = (x * self._scale - self._mean) / self._std
        out = {}
        for i in range(last + 1):
            x = self.layers[i](x)
            if LAYER_NAMES[i] in wanted:
                out[LAYER_NAMES[i]] = x
        return OrderedDict((t, out[t]) for t in taps)


@functools.lru_cache(maxsize=8)
def _cached_extractor(source: str, pooling: str, preprocess: str, dtype: torch.dtype) -> VGGFeatures:
    return VGGFeatures(source, pooling=pooling, preprocess=preprocess).to(dtype)


def get_extractor(weights=None, pooling: str = "max", preprocess: str = "caffe", dtype=torch.float32) -> VGGFeatures:
    """Shared, frozen extractor instance for the given configuration."""
    return _cached_extractor(resolve_weights(weights), pooling, preprocess, dtype)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class FeatureStack(OrderedDict):
    """Mapping ``layer -> (N_l, H_l, W_l)`` feature tensor for one image."""

    def vectorize(self, layer: str) -> torch.Tensor:
        return vectorize(self, layer)


def image_to_tensor(image, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) array or tensor to a (1, 3, H, W) tensor, keeping autograd links."""
    if isinstance(image, torch.Tensor):
        t = image.to(dtype)
    else:
        t = torch.from_numpy(np.ascontiguousarray(image)).to(dtype)
    if t.ndim != 3 or t.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {tuple(t.shape)}")
    return t.permute(2, 0, 1).unsqueeze(0)


def min_input_side(taps: Iterable[str]) -> int:
    return max(layer_stride(t) for t in taps)


def extract(image, taps: Sequence[str], extractor: VGGFeatures | None = None, **extractor_kw) -> FeatureStack:
    """Feature maps of ``image`` at each tap, differentiable w.r.t. the pixels.

    ``image`` may be a numpy array or a torch tensor of shape (H, W, 3);
    gradients flow back to a tensor input that requires grad.
    """
    taps = list(taps)
    if not taps:
        raise ValueError("taps must be non-empty")
    for t in taps:
        if t not in LAYER_INDEX:
            raise UnknownLayer(f"unknown layer {t!r}")
    if extractor is None:
        extractor = get_extractor(**extractor_kw)
    x = image_to_tensor(image, extractor.dtype)
    need = min_input_side(taps)
    if min(x.shape[2:]) < need:
        raise TooSmall(f"input {tuple(x.shape[2:])} too small for taps {taps}; need sides >= {need}")
    feats = extractor(x, taps)
    return FeatureStack((k, v[0]) for k, v in feats.items())


def vectorize(stack, layer: str) -> torch.Tensor:
    """Flatten the (N_l, H_l, W_l) map at ``layer`` into N_l x D_l, row-major."""
    if layer not in stack:
        raise UnknownLayer(f"layer {layer!r} not in stack")
    fmap = stack[layer]
    return fmap.reshape(fmap.shape[0], -1)


def devectorize(matrix: torch.Tensor, height: int, width: int) -> torch.Tensor:
    return matrix.reshape(matrix.shape[0], height, width)
