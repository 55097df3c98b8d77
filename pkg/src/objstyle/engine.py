"""Optimization driver: build the objective for one instance and descend on the pixels."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import image_io
from .exceptions import DimensionMismatch, InconsistentMap, NonFiniteLoss
from .features import VGGFeatures, extract, get_extractor, min_input_side
from .image_io import SegmentationMask, downsample_mask
from .losses import (
    LayerTargets,
    LossContext,
    LossWeights,
    breakdown_mapped_unmapped,
    build_matting_laplacian,
    masked_gram,
    total_loss,
    unmapped_terms,
)
from .objectmap import ObjectMap, StpKind, classify
from .validation import check_image, check_mask

logger = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class RunConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    iterations: int = 1000
    optimizer: str = "lbfgs"
    step_size: Optional[float] = None
    init: str = "content"
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    max_side: int = 512
    lbfgs_history: int = 10
    gram_normalization: str = "area"
    cx_bandwidth: float = 0.5
    cx_eps: float = 1e-5
    max_cx_columns: int = 4096
    matting_radius: int = 1
    matting_eps: float = 1e-5
    regularize_from: int = 0
    skip_empty: bool = True
    quantize_final: bool = True
    vgg_weights: Optional[str] = None
    pooling: str = "max"
    preprocess: str = "caffe"
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.optimizer not in ("lbfgs", "adam"):
            raise ValueError("optimizer must be 'lbfgs' or 'adam'")
        if self.step_size is None:
            self.step_size = 1.0 if self.optimizer == "lbfgs" else 0.01
        if not (self.step_size > 0 and math.isfinite(self.step_size)):
            raise ValueError("step_size must be positive")
        if self.init not in ("content", "noise"):
            raise ValueError("init must be 'content' or 'noise'")
        if self.checkpoint_every < 0 or self.log_every < 1:
            raise ValueError("checkpoint_every must be >= 0 and log_every >= 1")
        if self.gram_normalization not in ("area", "literal"):
            raise ValueError("gram_normalization must be 'area' or 'literal'")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if isinstance(data.get("weights"), dict):
            w_known = {f.name for f in dataclasses.fields(LossWeights)}
            bad = set(data["weights"]) - w_known
            if bad:
                raise ValueError(f"unknown weight keys: {sorted(bad)}")
            data["weights"] = LossWeights(**data["weights"])
        return cls(**data)


@dataclass
class RunContext:
    """Everything that stays constant during one optimization job."""

    loss: LossContext
    config: RunConfig
    extractor: VGGFeatures
    taps: tuple
    content: torch.Tensor
    style: torch.Tensor
    content_mask: SegmentationMask
    style_mask: SegmentationMask
    object_map: ObjectMap

    @property
    def kind(self) -> StpKind:
        return self.loss.kind


@dataclass
class RunState:
    image: torch.Tensor
    iteration: int = 0
    history: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    optimizer: Optional[torch.optim.Optimizer] = field(default=None, repr=False)
    started: float = field(default_factory=time.perf_counter, repr=False)

    def output(self) -> np.ndarray:
        return self.image.detach().cpu().numpy().astype(np.float32)


def _subsample(n: int, limit: int, gen: torch.Generator) -> Optional[torch.Tensor]:
    if n <= limit:
        return None
    return torch.randperm(n, generator=gen)[:limit].sort().values


def _subsample_within(mask_flat: np.ndarray, limit: int, gen: torch.Generator) -> torch.Tensor:
    idx = torch.from_numpy(np.flatnonzero(mask_flat).astype(np.int64))
    sub = _subsample(len(idx), limit, gen)
    return idx if sub is None else idx[sub]


def prepare(content, style, content_mask: SegmentationMask, style_mask: SegmentationMask,
            object_map: ObjectMap, cfg: RunConfig, extractor: VGGFeatures | None = None) -> RunContext:
    """Extract constant targets, resample masks per tap and classify the instance."""
    w = cfg.weights
    taps = w.taps
    need = min_input_side(taps)
    content = check_image(content, min_side=need, name="content")
    style = check_image(style, min_side=need, name="style")
    check_mask(content_mask, content, name="content mask")
    check_mask(style_mask, style, name="style mask")
    if set(object_map.pairs) and not all(c in content_mask.labels and s in style_mask.labels
                                         for c, s in object_map.pairs):
        raise InconsistentMap("object map references labels missing from the masks")
    if (object_map.m != content_mask.n_objects or object_map.n != style_mask.n_objects):
        raise InconsistentMap(
            f"object map covers {object_map.m} content / {object_map.n} style objects; masks have "
            f"{content_mask.n_objects} / {style_mask.n_objects}"
        )
    kind = classify(object_map, content_mask.n_objects, style_mask.n_objects)

    dtype = cfg.torch_dtype
    if extractor is None:
        extractor = get_extractor(cfg.vgg_weights, cfg.pooling, cfg.preprocess, dtype)
    elif extractor.dtype != dtype:
        extractor = copy.deepcopy(extractor).to(dtype)
    c_t = torch.from_numpy(content).to(dtype)
    s_t = torch.from_numpy(style).to(dtype)
    with torch.no_grad():
        fc = extract(c_t, taps, extractor)
        fs = extract(s_t, taps, extractor)

    gen = torch.Generator().manual_seed(int(cfg.seed))
    targets = LayerTargets()
    for layer in taps:
        targets.content[layer] = fc[layer].reshape(fc[layer].shape[0], -1).detach()
        targets.style[layer] = fs[layer].reshape(fs[layer].shape[0], -1).detach()
        cm = downsample_mask(content_mask, *fc[layer].shape[1:])
        sm = downsample_mask(style_mask, *fs[layer].shape[1:])
        targets.pairs[layer] = [
            (torch.from_numpy(cm.channel(c).reshape(-1).astype(np.float64)).to(dtype),
             torch.from_numpy(sm.channel(s).reshape(-1).astype(np.float64)).to(dtype))
            for c, s in object_map.pairs
        ]
        theta = None
        if kind is StpKind.C:
            theta = sum(cm.channel(lab) for lab in sorted(object_map.unmapped_content))
        elif kind is StpKind.S:
            theta = sum(sm.channel(lab) for lab in sorted(object_map.unmapped_style))
        if theta is not None:
            theta = np.asarray(theta, dtype=np.uint8).reshape(-1)
            if theta.sum() == 0:
                logger.warning("unmapped region vanishes at %s; layer skipped for unmapped terms", layer)
                targets.theta[layer] = None
            else:
                targets.theta[layer] = torch.from_numpy(theta.astype(np.float64)).to(dtype)

    norm = cfg.gram_normalization
    for layer in w.style_layers:
        grams = []
        for _, s_mask in targets.pairs[layer]:
            grams.append(masked_gram(targets.style[layer], s_mask, norm) if s_mask.sum() > 0 else None)
        targets.pair_grams[layer] = grams
    if kind is not StpKind.E:
        for layer in w.unmapped_gram_layers:
            if targets.theta.get(layer) is None:
                continue
            s_mask = targets.theta[layer] if kind is StpKind.S else None
            targets.unmapped_grams[layer] = masked_gram(targets.style[layer], s_mask, norm)

    limit = cfg.max_cx_columns
    for layer in w.contextual_layers:
        targets.cx_columns[("content", layer)] = (
            _subsample(targets.content[layer].shape[1], limit, gen),
            _subsample(targets.content[layer].shape[1], limit, gen),
        )
    if kind is not StpKind.E:
        for layer in w.unmapped_contextual_layers:
            theta = targets.theta.get(layer)
            if theta is None:
                continue
            theta_np = theta.numpy() > 0
            if kind is StpKind.C:
                cols = (_subsample_within(theta_np, limit, gen),
                        _subsample(targets.style[layer].shape[1], limit, gen))
            else:
                cols = (_subsample(targets.content[layer].shape[1], limit, gen),
                        _subsample_within(theta_np, limit, gen))
            targets.cx_columns[("unmapped", layer)] = cols

    laplacian = None
    if w.lambda_m > 0 and w.alpha1 > 0 and w.alpha > 0:
        laplacian = build_matting_laplacian(content, cfg.matting_radius, cfg.matting_eps)

    loss_ctx = LossContext(
        weights=w, kind=kind, targets=targets, laplacian=laplacian,
        gram_normalization=cfg.gram_normalization, cx_bandwidth=cfg.cx_bandwidth,
        cx_eps=cfg.cx_eps, skip_empty=cfg.skip_empty,
    )
    return RunContext(loss_ctx, cfg, extractor, taps, c_t, s_t, content_mask, style_mask, object_map)


def _loss_ctx_for(ctx: RunContext, iteration: int) -> LossContext:
    if iteration < ctx.config.regularize_from and ctx.loss.weights.lambda_m > 0:
        return dataclasses.replace(ctx.loss, weights=dataclasses.replace(ctx.loss.weights, lambda_m=0.0))
    return ctx.loss


def objective(ctx: RunContext, image: torch.Tensor, iteration: int | None = None):
    """Total loss and breakdown of ``image`` (an H x W x 3 tensor)."""
    loss_ctx = ctx.loss if iteration is None else _loss_ctx_for(ctx, iteration)
    feats = extract(image, ctx.taps, ctx.extractor)
    return total_loss(loss_ctx, feats, image)


def evaluate(ctx: RunContext, image) -> dict:
    """Breakdown of ``image`` under the run's objective, without gradients."""
    img = image if isinstance(image, torch.Tensor) else torch.from_numpy(check_image(image))
    img = img.to(ctx.config.torch_dtype)
    if tuple(img.shape) != tuple(ctx.content.shape):
        raise DimensionMismatch(f"candidate {tuple(img.shape)} vs content {tuple(ctx.content.shape)}")
    with torch.no_grad():
        _, breakdown = objective(ctx, img)
    return breakdown


def unmapped_statistics(ctx: RunContext, image) -> dict:
    """Raw (unweighted) unmapped terms of ``image``; empty for STP-E."""
    if ctx.kind is StpKind.E:
        return {}
    img = image if isinstance(image, torch.Tensor) else torch.from_numpy(check_image(image))
    img = img.to(ctx.config.torch_dtype)
    with torch.no_grad():
        feats = extract(img, ctx.taps, ctx.extractor)
        terms = unmapped_terms(ctx.loss, feats)
    return {k: float(v) for k, v in terms.items()}


def init_state(ctx: RunContext) -> RunState:
    cfg = ctx.config
    if cfg.init == "content":
        x = ctx.content.clone()
    else:
        gen = torch.Generator().manual_seed(int(cfg.seed))
        x = torch.rand(ctx.content.shape, generator=gen, dtype=torch.float64).to(ctx.content.dtype)
    x.requires_grad_(True)
    if cfg.optimizer == "lbfgs":
        opt = torch.optim.LBFGS([x], lr=cfg.step_size, max_iter=1, max_eval=25,
                                history_size=cfg.lbfgs_history, line_search_fn="strong_wolfe",
                                tolerance_grad=0.0, tolerance_change=0.0)
    else:
        opt = torch.optim.Adam([x], lr=cfg.step_size)
    return RunState(image=x, optimizer=opt)


def _record(ctx: RunContext, state: RunState, breakdown: dict) -> dict:
    mapped, unmapped = breakdown_mapped_unmapped(breakdown)
    rec = {"iteration": state.iteration, **breakdown, "mapped": mapped, "unmapped": unmapped,
           "elapsed_ms": (time.perf_counter() - state.started) * 1000.0}
    state.history.append(rec)
    return rec


def step(ctx: RunContext, state: RunState) -> RunState:
    """One optimizer update of the output pixels, followed by clamping to [0, 1]."""
    cfg = ctx.config
    if state.iteration >= cfg.iterations:
        raise RuntimeError(f"run already finished ({state.iteration} iterations)")
    x, opt = state.image, state.optimizer
    t0 = time.perf_counter()
    calls = []

    def closure():
        opt.zero_grad()
        total, breakdown = objective(ctx, x, state.iteration)
        if not math.isfinite(breakdown["total"]):
            bad = [k for k, v in breakdown.items() if k != "total" and not math.isfinite(v)]
            raise NonFiniteLoss(f"non-finite loss at iteration {state.iteration}; offending terms: {bad or ['total']}")
        calls.append(breakdown)
        total.backward()
        return total

    opt.step(closure)
    # Both optimizers evaluate the current iterate first, so calls[0] is the
    # breakdown of the previous step's clamped output.
    if state.iteration > 0 and _should_log(cfg, state.iteration) and calls:
        _record(ctx, state, calls[0])
    with torch.no_grad():
        x.clamp_(0.0, 1.0)
        last = state.iteration + 1 == cfg.iterations
        if last and cfg.quantize_final:
            x.copy_(torch.from_numpy(image_io.quantize(x.detach().cpu().numpy())).to(x.dtype))
    state.iteration += 1
    state.timings.append((time.perf_counter() - t0) * 1000.0)
    if last:
        with torch.no_grad():
            _, breakdown = objective(ctx, x.detach(), state.iteration)
        _record(ctx, state, breakdown)
    return state


def _should_log(cfg: RunConfig, iteration: int) -> bool:
    return iteration % cfg.log_every == 0


def run(content, style, content_mask, style_mask, object_map, cfg: RunConfig,
        out_dir=None, extractor: VGGFeatures | None = None, callback=None):
    """Prepare the instance and run ``cfg.iterations`` steps.

    With ``out_dir`` set, checkpoints ``step_{k}.png`` are written every
    ``cfg.checkpoint_every`` iterations and ``history.jsonl`` receives one
    line per logged step.
    """
    torch.manual_seed(int(cfg.seed))
    ctx = prepare(content, style, content_mask, style_mask, object_map, cfg, extractor)
    state = init_state(ctx)
    hist_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        hist_fh = open(out_dir / "history.jsonl", "w")
    try:
        while state.iteration < cfg.iterations:
            n_logged = len(state.history)
            step(ctx, state)
            if hist_fh is not None:
                for rec in state.history[n_logged:]:
                    hist_fh.write(json.dumps(rec) + "\n")
                hist_fh.flush()
            if out_dir is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                image_io.save_image(state.output(), out_dir / f"step_{state.iteration}.png")
            if callback is not None:
                callback(ctx, state)
    finally:
        if hist_fh is not None:
            hist_fh.close()
    return state.output(), state
