"""Loss terms for object-aware style transfer.

Feature matrices are ``N_l x D_l`` torch tensors (channels x flattened
pixels). Masks are binary and given at the feature map's own resolution,
either flat (``D_l``) or 2-D (``H_l x W_l``).

Masking follows two rules. Gram terms zero out the columns outside the
mask, which keeps ``D_l`` fixed. Contextual terms drop those columns, so
only in-mask feature vectors take part in the set comparison.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import torch

from .exceptions import (
    DegenerateFeatures,
    EmptyMask,
    ImageTooSmall,
    ShapeMismatch,
    WrongKind,
)
from .objectmap import StpKind

logger = logging.getLogger(__name__)

STYLE_LAYERS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")
CONTENT_LAYERS = ("relu4_2",)
CONTEXTUAL_LAYERS = ("relu3_2", "relu4_2")

MAPPED_TERMS = ("dps_style", "dps_content", "photorealism", "ctx_content")
UNMAPPED_TERMS = ("gram_unmapped", "ctx_unmapped")


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 1.0
    beta1: float = 1e-2
    beta2: float = 1.0
    lambda_m: float = 1e-4
    style_layers: tuple = STYLE_LAYERS
    content_layers: tuple = CONTENT_LAYERS
    contextual_layers: tuple = CONTEXTUAL_LAYERS
    unmapped_gram_layers: tuple = STYLE_LAYERS
    unmapped_contextual_layers: tuple = CONTEXTUAL_LAYERS

    COEFFICIENTS = ("alpha", "beta", "alpha1", "alpha2", "beta1", "beta2", "lambda_m")

    def __post_init__(self):
        for name in self.COEFFICIENTS:
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"weight {name} must be finite and >= 0, got {v}")
            setattr(self, name, v)
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("at least one of alpha, beta must be positive")
        for name in ("style_layers", "content_layers", "contextual_layers",
                     "unmapped_gram_layers", "unmapped_contextual_layers"):
            setattr(self, name, tuple(getattr(self, name)))

    def scaled(self, factor: float) -> "LossWeights":
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for name in ("alpha", "beta"):
            kw[name] *= factor
        return LossWeights(**kw)

    @property
    def taps(self) -> tuple:
        seen = []
        for group in (self.style_layers, self.content_layers, self.contextual_layers,
                      self.unmapped_gram_layers, self.unmapped_contextual_layers):
            for t in group:
                if t not in seen:
                    seen.append(t)
        return tuple(seen)


# -- gram statistics ---------------------------------------------------------

def gram(F: torch.Tensor) -> torch.Tensor:
    return F @ F.transpose(0, 1)


def _flat_mask(mask, n_columns: int, like: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask)
    m = m.reshape(-1).to(dtype=like.dtype, device=like.device)
    if m.numel() != n_columns:
        raise ShapeMismatch(f"mask has {m.numel()} pixels, features have {n_columns} columns")
    return m


def masked_gram(F: torch.Tensor, mask=None, normalize: str = "literal") -> torch.Tensor:
    """Gram matrix of ``F`` with out-of-mask columns zeroed.

    ``normalize="area"`` divides by the number of in-mask columns, turning
    the sum into a mean so differently sized regions are comparable.
    """
    if mask is None:
        Fm, count = F, F.shape[1]
    else:
        m = _flat_mask(mask, F.shape[1], F)
        Fm, count = F * m, int(m.sum().item())
    G = gram(Fm)
    if normalize == "area":
        if count == 0:
            raise EmptyMask("mask selects no feature columns")
        G = G / count
    elif normalize != "literal":
        raise ValueError("normalize must be 'literal' or 'area'")
    return G


def _check_channels(F_O, F_S, N_l):
    if F_O.ndim != 2 or F_S.ndim != 2 or F_O.shape[0] != F_S.shape[0]:
        raise ShapeMismatch(f"feature matrices {tuple(F_O.shape)} and {tuple(F_S.shape)} differ in channels")
    return F_O.shape[0] if N_l is None else int(N_l)


def gram_distance(G_a: torch.Tensor, G_b: torch.Tensor, N_l: int) -> torch.Tensor:
    return ((G_a - G_b) ** 2).sum() / (2.0 * N_l ** 2)


def gram_loss_diffusion(F_O, F_S, theta_cn, N_l=None, normalize: str = "literal") -> torch.Tensor:
    """Gram loss between the unmapped output region and the whole style image."""
    N_l = _check_channels(F_O, F_S, N_l)
    return gram_distance(masked_gram(F_O, theta_cn, normalize), masked_gram(F_S, None, normalize), N_l)


def gram_loss_utilization(F_O, F_S, theta_sm, N_l=None, normalize: str = "literal") -> torch.Tensor:
    """Gram loss between the whole output and the unmapped style region."""
    N_l = _check_channels(F_O, F_S, N_l)
    return gram_distance(masked_gram(F_O, None, normalize), masked_gram(F_S, theta_sm, normalize), N_l)


def segmented_style_loss(F_O, F_S, pair_masks, N_l=None, normalize: str = "area",
                         skip_empty: bool = True) -> torch.Tensor:
    """Sum of per-object gram distances over the mapped pairs."""
    N_l = _check_channels(F_O, F_S, N_l)
    total = F_O.new_zeros(())
    for k, (c_mask, s_mask) in enumerate(pair_masks):
        c = _flat_mask(c_mask, F_O.shape[1], F_O)
        s = _flat_mask(s_mask, F_S.shape[1], F_S)
        if c.sum() == 0 or s.sum() == 0:
            if not skip_empty:
                raise EmptyMask(f"pair {k} vanishes at this layer scale")
            warnings.warn(f"pair {k} vanishes at this layer scale; skipped", RuntimeWarning, stacklevel=2)
            continue
        total = total + gram_distance(masked_gram(F_O, c, normalize), masked_gram(F_S, s, normalize), N_l)
    return total


def content_loss(F_O, F_C) -> torch.Tensor:
    if F_O.shape != F_C.shape:
        raise ShapeMismatch(f"content features {tuple(F_O.shape)} vs {tuple(F_C.shape)}")
    N, D = F_O.shape
    return ((F_O - F_C) ** 2).sum() / (2.0 * N * D)


# -- contextual similarity ---------------------------------------------------

def contextual_similarity(X, Y, bandwidth: float = 0.5, eps: float = 1e-5) -> torch.Tensor:
    """Contextual similarity between the column sets of ``X`` (N x Dx) and ``Y`` (N x Dy).

    For every column of ``X`` the cosine distances to all columns of ``Y``
    (after centering both by the mean column of ``Y``) are divided by the
    closest one, mapped through ``exp((1 - d) / bandwidth)`` and normalized
    over ``Y``. The result averages, over the columns of ``Y``, the best
    such affinity found in ``X``. It lies in (0, 1].
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeMismatch(f"feature sets {tuple(X.shape)} and {tuple(Y.shape)} are incompatible")
    if X.shape[1] < 1 or Y.shape[1] < 1:
        raise EmptyMask("contextual similarity needs at least one column on each side")
    if not (torch.isfinite(X).all() and torch.isfinite(Y).all()):
        raise DegenerateFeatures("non-finite feature values")
    mu = Y.mean(dim=1, keepdim=True)
    Xc, Yc = X - mu, Y - mu
    # zero-norm columns are kept finite by flooring the norm at eps
    Xn = Xc / Xc.norm(dim=0, keepdim=True).clamp_min(eps)
    Yn = Yc / Yc.norm(dim=0, keepdim=True).clamp_min(eps)
    d = 1.0 - Xn.transpose(0, 1) @ Yn                      # Dx x Dy
    d_rel = d / (d.min(dim=1, keepdim=True).values + eps)
    cx = torch.softmax((1.0 - d_rel) / bandwidth, dim=1)   # normalized over Y
    return cx.max(dim=0).values.mean()


def contextual_content_loss(F_O, F_C, bandwidth: float = 0.5, eps: float = 1e-5) -> torch.Tensor:
    return -torch.log(contextual_similarity(F_O, F_C, bandwidth, eps))


def _select(F, mask):
    if mask is None:
        return F
    m = _flat_mask(mask, F.shape[1], F) > 0
    if not bool(m.any()):
        raise EmptyMask("mask selects no feature columns")
    return F[:, m]


def contextual_style_loss(F_O, F_S, theta=None, side: str = "output",
                          bandwidth: float = 0.5, eps: float = 1e-5) -> torch.Tensor:
    """``-log CX`` with the mask applied to the output (diffusion) or the style (utilization)."""
    if side not in ("output", "style"):
        raise ValueError("side must be 'output' or 'style'")
    if side == "output":
        X, Y = _select(F_O, theta), F_S
    else:
        X, Y = F_O, _select(F_S, theta)
    return -torch.log(contextual_similarity(X, Y, bandwidth, eps))


# -- photorealism --------------------------------------------------------------

@dataclass
class MattingLaplacian:
    matrix: sp.csr_matrix
    height: int
    width: int
    window_radius: int
    eps: float
    _torch: dict = field(default_factory=dict, repr=False)

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def to_torch(self, dtype=torch.float32) -> torch.Tensor:
        if dtype not in self._torch:
            coo = self.matrix.tocoo()
            idx = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
            vals = torch.from_numpy(coo.data).to(dtype)
            self._torch[dtype] = torch.sparse_coo_tensor(idx, vals, coo.shape, check_invariants=False).coalesce()
        return self._torch[dtype]


def build_matting_laplacian(content, window_radius: int = 1, eps: float = 1e-5) -> MattingLaplacian:
    """Closed-form matting Laplacian of ``content`` (H x W x 3, values in [0, 1])."""
    if window_radius < 1:
        raise ValueError("window_radius must be >= 1")
    if eps <= 0:
        raise ValueError("eps must be positive")
    img = np.asarray(content, dtype=np.float64)
    h, w, _ = img.shape
    size = 2 * window_radius + 1
    if h < size or w < size:
        raise ImageTooSmall(f"image {h}x{w} is smaller than the {size}x{size} window")
    n = size * size

    idx = np.arange(h * w, dtype=np.int64).reshape(h, w)
    win_idx = np.lib.stride_tricks.sliding_window_view(idx, (size, size)).reshape(-1, n)
    win = img.reshape(-1, 3)[win_idx]                       # W x n x 3
    centered = win - win.mean(axis=1, keepdims=True)
    cov = np.einsum("wni,wnj->wij", centered, centered) / n
    inv = np.linalg.inv(cov + (eps / n) * np.eye(3))
    inv = 0.5 * (inv + inv.transpose(0, 2, 1))
    quad = np.einsum("wni,wij,wmj->wnm", centered, inv, centered)
    vals = np.eye(n) - (1.0 + quad) / n

    rows = np.repeat(win_idx, n, axis=1).ravel()
    cols = np.tile(win_idx, (1, n)).ravel()
    M = sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(h * w, h * w)).tocsr()
    M = ((M + M.T) * 0.5).tocsr()
    M.sum_duplicates()
    return MattingLaplacian(M, h, w, window_radius, eps)


def photorealism_loss(output, M: MattingLaplacian) -> torch.Tensor:
    """Sum over color channels of ``V_c^T M V_c``."""
    out = output if isinstance(output, torch.Tensor) else torch.from_numpy(np.asarray(output))
    if out.ndim != 3 or out.shape[0] * out.shape[1] != M.n_pixels:
        raise ShapeMismatch(f"output {tuple(out.shape)} does not match a {M.height}x{M.width} Laplacian")
    V = out.reshape(-1, out.shape[-1])
    MV = torch.sparse.mm(M.to_torch(V.dtype), V)
    return (V * MV).sum()


# -- compositions ------------------------------------------------------------

@dataclass
class LayerTargets:
    """Constant per-layer quantities prepared once for a run."""

    content: dict = field(default_factory=dict)        # layer -> F_l[C]
    style: dict = field(default_factory=dict)          # layer -> F_l[S]
    pairs: dict = field(default_factory=dict)          # layer -> [(c_flat, s_flat)]
    theta: dict = field(default_factory=dict)          # layer -> unmapped mask at its side's scale
    pair_grams: dict = field(default_factory=dict)     # layer -> [style gram per pair]
    unmapped_grams: dict = field(default_factory=dict)  # layer -> style-side gram for the unmapped term
    cx_columns: dict = field(default_factory=dict)     # (term, layer) -> (x_idx | None, y_idx | None)


@dataclass
class LossContext:
    weights: LossWeights
    kind: StpKind
    targets: LayerTargets
    laplacian: Optional[MattingLaplacian]
    gram_normalization: str = "area"
    cx_bandwidth: float = 0.5
    cx_eps: float = 1e-5
    skip_empty: bool = True


def _take(F, idx):
    return F if idx is None else F.index_select(1, idx)


def _flat(feats, layer):
    f = feats[layer]
    return f.reshape(f.shape[0], -1)


def mapped_terms(ctx: LossContext, feats, output) -> dict:
    """Unweighted mapped-object terms for the current output."""
    w, t = ctx.weights, ctx.targets
    zero = output.new_zeros(())
    style = zero
    for layer in w.style_layers:
        F_O = _flat(feats, layer)
        if layer in t.pair_grams:
            for (c_mask, _), G_s in zip(t.pairs[layer], t.pair_grams[layer]):
                if G_s is None:
                    continue
                style = style + gram_distance(masked_gram(F_O, c_mask, ctx.gram_normalization), G_s, F_O.shape[0])
        else:
            style = style + segmented_style_loss(F_O, t.style[layer], t.pairs[layer],
                                                 normalize=ctx.gram_normalization, skip_empty=ctx.skip_empty)
    content = zero
    for layer in w.content_layers:
        content = content + content_loss(_flat(feats, layer), t.content[layer])
    photo = photorealism_loss(output, ctx.laplacian) if ctx.laplacian is not None else zero
    cx = zero
    if w.alpha2 > 0:
        for layer in w.contextual_layers:
            x_idx, y_idx = t.cx_columns.get(("content", layer), (None, None))
            cx = cx + contextual_content_loss(_take(_flat(feats, layer), x_idx), _take(t.content[layer], y_idx),
                                              ctx.cx_bandwidth, ctx.cx_eps)
    return {"dps_style": style, "dps_content": content, "photorealism": photo, "ctx_content": cx}


def mapped_loss(ctx: LossContext, feats, output) -> torch.Tensor:
    w = ctx.weights
    p = mapped_terms(ctx, feats, output)
    return w.alpha1 * (p["dps_style"] + p["dps_content"] + w.lambda_m * p["photorealism"]) + w.alpha2 * p["ctx_content"]


def unmapped_terms(ctx: LossContext, feats, kind: StpKind | None = None) -> dict:
    """Unweighted unmapped-object terms: diffusion for STP-C, utilization for STP-S."""
    kind = ctx.kind if kind is None else StpKind(kind)
    if kind is StpKind.E:
        raise WrongKind("the unmapped-object loss is undefined for STP-E (no unmapped objects)")
    w, t = ctx.weights, ctx.targets
    ref = next(iter(feats.values()))
    gram_term = ref.new_zeros(())
    if w.beta1 > 0:
        for layer in w.unmapped_gram_layers:
            if t.theta.get(layer) is None:
                continue
            F_O, F_S = _flat(feats, layer), t.style[layer]
            G_s = t.unmapped_grams.get(layer)
            if G_s is not None:
                mask_O = t.theta[layer] if kind is StpKind.C else None
                gram_term = gram_term + gram_distance(masked_gram(F_O, mask_O, ctx.gram_normalization), G_s, F_O.shape[0])
            elif kind is StpKind.C:
                gram_term = gram_term + gram_loss_diffusion(F_O, F_S, t.theta[layer], normalize=ctx.gram_normalization)
            else:
                gram_term = gram_term + gram_loss_utilization(F_O, F_S, t.theta[layer], normalize=ctx.gram_normalization)
    cx_term = ref.new_zeros(())
    if w.beta2 > 0:
        side = "output" if kind is StpKind.C else "style"
        for layer in w.unmapped_contextual_layers:
            if t.theta.get(layer) is None:
                continue
            F_O, F_S = _flat(feats, layer), t.style[layer]
            x_idx, y_idx = t.cx_columns.get(("unmapped", layer), (None, None))
            # columns are pre-selected (mask applied, then subsampled) when indices exist
            if x_idx is not None or y_idx is not None:
                X, Y = _take(F_O, x_idx), _take(F_S, y_idx)
                cx_term = cx_term - torch.log(contextual_similarity(X, Y, ctx.cx_bandwidth, ctx.cx_eps))
            else:
                cx_term = cx_term + contextual_style_loss(F_O, F_S, t.theta[layer], side,
                                                          ctx.cx_bandwidth, ctx.cx_eps)
    return {"gram_unmapped": gram_term, "ctx_unmapped": cx_term}


def unmapped_loss(ctx: LossContext, feats, kind: StpKind | None = None) -> torch.Tensor:
    w = ctx.weights
    p = unmapped_terms(ctx, feats, kind)
    return w.beta1 * p["gram_unmapped"] + w.beta2 * p["ctx_unmapped"]


def total_loss(ctx: LossContext, feats, output):
    """Weighted objective and its per-term breakdown.

    Each breakdown entry is the term's contribution to the total (all of its
    coefficients applied), so the entries add up to ``total``. Unmapped
    entries are present only for STP-C and STP-S.
    """
    w = ctx.weights
    m = mapped_terms(ctx, feats, output)
    parts = {
        "dps_style": w.alpha * w.alpha1 * m["dps_style"],
        "dps_content": w.alpha * w.alpha1 * m["dps_content"],
        "photorealism": w.alpha * w.alpha1 * w.lambda_m * m["photorealism"],
        "ctx_content": w.alpha * w.alpha2 * m["ctx_content"],
    }
    if ctx.kind is not StpKind.E:
        u = unmapped_terms(ctx, feats)
        parts["gram_unmapped"] = w.beta * w.beta1 * u["gram_unmapped"]
        parts["ctx_unmapped"] = w.beta * w.beta2 * u["ctx_unmapped"]
    total = None
    for v in parts.values():
        v = v.double()
        total = v if total is None else total + v
    breakdown = {k: float(v.detach().double()) for k, v in parts.items()}
    breakdown["total"] = float(total.detach())
    return total, breakdown


def breakdown_mapped_unmapped(breakdown: dict) -> tuple[float, float]:
    """Split a breakdown into its mapped and unmapped contributions."""
    mapped = 0.0
    for k in MAPPED_TERMS:
        mapped += breakdown.get(k, 0.0)
    unmapped = 0.0
    for k in UNMAPPED_TERMS:
        unmapped += breakdown.get(k, 0.0)
    return mapped, unmapped
