"""scikit-learn style front end.

``fit`` stores the style image and its segmentation; ``transform`` stylizes
a content image against it::

    est = DeepObjStyle(iterations=300).fit(style, style_mask)
    output = est.transform(content, content_mask)
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import engine
from .image_io import SegmentationMask
from .losses import CONTENT_LAYERS, CONTEXTUAL_LAYERS, STYLE_LAYERS, LossWeights
from .objectmap import ObjectMap, build_map
from .validation import MIN_SIDE, check_image, check_mask


class DeepObjStyle(TransformerMixin, BaseEstimator):
    """Object-aware photo style transfer by optimizing output pixels.

    Parameters
    ----------
    iterations : int
        Optimizer updates per ``transform`` call.
    alpha, beta : float
        Weights of the mapped-object and unmapped-object losses.
    alpha1, alpha2 : float
        Inside the mapped loss: the segmented style/content/photorealism
        group and the contextual content term.
    beta1, beta2 : float
        Inside the unmapped loss: the gram term and the contextual style term.
    lambda_m : float
        Matting-Laplacian photorealism weight.
    vgg_weights : str or None
        Path to a torchvision VGG19 state dict, ``"random"`` for an untrained
        backbone (tests only), or None to use ``OBJSTYLE_VGG_WEIGHTS``.

    Remaining parameters mirror :class:`objstyle.engine.RunConfig`.

    Attributes
    ----------
    output_ : ndarray of shape (H, W, 3)
    history_ : list of dict
        Logged per-term loss breakdowns.
    stp_kind_ : StpKind
    object_map_ : ObjectMap
    """

    def __init__(self, iterations=1000, optimizer="lbfgs", step_size=None, init="content",
                 alpha=1.0, beta=1.0, alpha1=1.0, alpha2=1.0, beta1=1e-2, beta2=1.0, lambda_m=1e-4,
                 style_layers=STYLE_LAYERS, content_layers=CONTENT_LAYERS,
                 contextual_layers=CONTEXTUAL_LAYERS, unmapped_gram_layers=None,
                 unmapped_contextual_layers=None, gram_normalization="area", max_cx_columns=4096,
                 matting_eps=1e-5, vgg_weights=None, pooling="max", preprocess="caffe",
                 dtype="float32", seed=0, log_every=1, checkpoint_every=0, out_dir=None):
        self.iterations = iterations
        self.optimizer = optimizer
        self.step_size = step_size
        self.init = init
        self.alpha = alpha
        self.beta = beta
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.beta1 = beta1
        self.beta2 = beta2
        self.lambda_m = lambda_m
        self.style_layers = style_layers
        self.content_layers = content_layers
        self.contextual_layers = contextual_layers
        self.unmapped_gram_layers = unmapped_gram_layers
        self.unmapped_contextual_layers = unmapped_contextual_layers
        self.gram_normalization = gram_normalization
        self.max_cx_columns = max_cx_columns
        self.matting_eps = matting_eps
        self.vgg_weights = vgg_weights
        self.pooling = pooling
        self.preprocess = preprocess
        self.dtype = dtype
        self.seed = seed
        self.log_every = log_every
        self.checkpoint_every = checkpoint_every
        self.out_dir = out_dir

    def run_config(self) -> engine.RunConfig:
        weights = LossWeights(
            alpha=self.alpha, beta=self.beta, alpha1=self.alpha1, alpha2=self.alpha2,
            beta1=self.beta1, beta2=self.beta2, lambda_m=self.lambda_m,
            style_layers=self.style_layers, content_layers=self.content_layers,
            contextual_layers=self.contextual_layers,
            unmapped_gram_layers=self.style_layers if self.unmapped_gram_layers is None else self.unmapped_gram_layers,
            unmapped_contextual_layers=(self.contextual_layers if self.unmapped_contextual_layers is None
                                        else self.unmapped_contextual_layers),
        )
        return engine.RunConfig(
            weights=weights, iterations=self.iterations, optimizer=self.optimizer, step_size=self.step_size,
            init=self.init, seed=self.seed, checkpoint_every=self.checkpoint_every, log_every=self.log_every,
            gram_normalization=self.gram_normalization, max_cx_columns=self.max_cx_columns,
            matting_eps=self.matting_eps, vgg_weights=self.vgg_weights, pooling=self.pooling,
            preprocess=self.preprocess, dtype=self.dtype,
        )

    def fit(self, X, y=None, style_mask=None):
        """Store the style image ``X`` and its segmentation (default: one object)."""
        style = check_image(X, min_side=MIN_SIDE, name="style")
        if style_mask is None:
            style_mask = SegmentationMask.full(*style.shape[:2])
        check_mask(style_mask, style, name="style mask")
        self.run_config()  # validate parameters early
        self.style_ = style
        self.style_mask_ = style_mask
        return self

    def _resolve(self, content, content_mask, object_map):
        content = check_image(content, min_side=MIN_SIDE, name="content")
        if content_mask is None:
            content_mask = SegmentationMask.full(*content.shape[:2], label=self.style_mask_.labels[0]) \
                if self.style_mask_.n_objects == 1 else SegmentationMask.full(*content.shape[:2])
        check_mask(content_mask, content, name="content mask")
        if not isinstance(object_map, ObjectMap):
            object_map = build_map(content_mask, self.style_mask_, object_map)
        return content, content_mask, object_map

    def transform(self, X, content_mask=None, object_map=None):
        """Stylize content image ``X``; returns the optimized (H, W, 3) image.

        ``object_map`` may be an :class:`ObjectMap`, a list of
        ``(content_label, style_label)`` pairs, or None to pair equal labels.
        """
        check_is_fitted(self, "style_")
        content, content_mask, object_map = self._resolve(X, content_mask, object_map)
        output, state = engine.run(content, self.style_, content_mask, self.style_mask_, object_map,
                                   self.run_config(), out_dir=self.out_dir)
        self.output_ = output
        self.history_ = state.history
        self.n_iter_ = state.iteration
        self.object_map_ = object_map
        self.stp_kind_ = object_map.kind
        return output

    def loss_breakdown(self, candidate, content, content_mask=None, object_map=None) -> dict:
        """Per-term loss of ``candidate`` for stylizing ``content``, without optimizing."""
        check_is_fitted(self, "style_")
        content, content_mask, object_map = self._resolve(content, content_mask, object_map)
        ctx = engine.prepare(content, self.style_, content_mask, self.style_mask_, object_map, self.run_config())
        return engine.evaluate(ctx, candidate)

    def score(self, X, content_mask=None, object_map=None, candidate=None):
        """Negative total loss of ``candidate`` (default: the last output) for content ``X``."""
        check_is_fitted(self, "style_")
        if candidate is None:
            check_is_fitted(self, "output_")
            candidate = self.output_
        return -self.loss_breakdown(candidate, X, content_mask, object_map)["total"]
