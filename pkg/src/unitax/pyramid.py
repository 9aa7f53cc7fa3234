"""Pyramidal-fusion inference with a pluggable feature extractor.

One extractor is applied to every level of a Gaussian resolution pyramid.
Features of equal effective stride (backbone stride times the level's
downsampling) are projected to a common width and summed, then a decoder
walks from the coarsest stride to the output stride, upsampling 2x and
adding the next finer group at each step.  A 1x1 classifier produces
logits at the output stride.

Topology notes: backbone features finer than the output stride (level 0 at
stride 4) are not used, each decoder stage is ``relu(up(prev) + sum of
laterals)``, and feature maps at stride ``s`` of an ``n``-pixel input have
``ceil(n / s)`` pixels so that coarse levels stay aligned.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

from .aggregation import aggregate_probs
from .errors import ShapeError
from .interp import resize
from .loss import softmax

BINOMIAL_5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
BACKBONE_STRIDES = (4, 8, 16, 32)
_BORDER_MODES = {"reflect101": "mirror", "wrap": "wrap"}


@dataclass(frozen=True)
class PyramidConfig:
    levels: int = 3
    fusion_channels: int = 256
    output_stride: int = 8
    eval_scales: tuple = (0.75, 1.0, 1.5)
    backbone_strides: tuple = BACKBONE_STRIDES

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        s = self.output_stride
        if s < 1 or s & (s - 1):
            raise ValueError("output_stride must be a power of two")
        if not self.eval_scales:
            raise ValueError("eval_scales must not be empty")

    @property
    def alignment(self):
        return 2 ** (self.levels - 1) * self.output_stride


def build_pyramid(image, levels=3, border="reflect101"):
    """Gaussian pyramid: binomial 5-tap blur along both axes, then keep every other pixel."""
    image = np.asarray(image)
    mode = _BORDER_MODES[border]
    h, w = image.shape[-2:]
    step = 2 ** (levels - 1)
    if h % step or w % step:
        raise ShapeError(f"image {h}x{w} not divisible by {step} for {levels} levels")
    out = [image]
    for _ in range(levels - 1):
        x = out[-1].astype(np.float64)
        x = convolve1d(x, BINOMIAL_5, axis=-2, mode=mode)
        x = convolve1d(x, BINOMIAL_5, axis=-1, mode=mode)
        out.append(x[..., ::2, ::2].astype(image.dtype, copy=False))
    return out


def avg_pool(x, stride):
    """Average pooling with ceil-sized output; partial windows average their valid pixels."""
    x = np.asarray(x, dtype=np.float32)
    c, h, w = x.shape
    oh, ow = -(-h // stride), -(-w // stride)
    padded = np.zeros((c, oh * stride, ow * stride), dtype=np.float64)
    padded[:, :h, :w] = x
    sums = padded.reshape(c, oh, stride, ow, stride).sum(axis=(2, 4))
    rows = np.minimum(stride, h - stride * np.arange(oh))
    cols = np.minimum(stride, w - stride * np.arange(ow))
    return (sums / np.outer(rows, cols)).astype(np.float32)


class PoolingExtractor:
    """Features are the image itself, average pooled to every backbone stride."""

    def __init__(self, in_channels=3, strides=BACKBONE_STRIDES):
        self.strides = tuple(strides)
        self.channels = (in_channels,) * len(self.strides)

    def __call__(self, image):
        return [avg_pool(image, s) for s in self.strides]


class RandomExtractor:
    """Fixed-seed stand-in backbone: pooled image, random 1x1 projection, ReLU."""

    def __init__(self, seed=0, in_channels=3, channels=(16, 32, 48, 64), strides=BACKBONE_STRIDES):
        rng = np.random.default_rng(seed)
        self.strides = tuple(strides)
        self.channels = tuple(channels)
        self.params = [
            (
                (rng.standard_normal((ch, in_channels)) / np.sqrt(in_channels)).astype(np.float32),
                (0.1 * rng.standard_normal(ch)).astype(np.float32),
            )
            for ch in self.channels
        ]

    def __call__(self, image):
        feats = []
        for s, (wt, b) in zip(self.strides, self.params):
            pooled = avg_pool(image, s)
            y = np.einsum("oc,chw->ohw", wt, pooled) + b[:, None, None]
            feats.append(np.maximum(y, 0, dtype=np.float32))
        return feats


@dataclass(frozen=True)
class HeadParams:
    """Lateral projections (one per backbone stride, shared by all levels) and the classifier."""

    lateral: tuple
    classifier: tuple

    @property
    def num_classes(self):
        return self.classifier[0].shape[0]

    @classmethod
    def random(cls, channels, num_classes, fusion_channels=256, seed=0):
        rng = np.random.default_rng(seed)

        def proj(out_ch, in_ch):
            wt = rng.standard_normal((out_ch, in_ch)) / np.sqrt(in_ch)
            return wt.astype(np.float32), (0.1 * rng.standard_normal(out_ch)).astype(np.float32)

        return cls(
            tuple(proj(fusion_channels, ch) for ch in channels),
            proj(num_classes, fusion_channels),
        )

    @classmethod
    def zeros(cls, channels, num_classes, fusion_channels=256):
        return cls(
            tuple(
                (np.zeros((fusion_channels, ch), np.float32), np.zeros(fusion_channels, np.float32))
                for ch in channels
            ),
            (np.zeros((num_classes, fusion_channels), np.float32), np.zeros(num_classes, np.float32)),
        )


def _conv1x1(params, x):
    wt, b = params
    return np.einsum("oc,chw->ohw", wt, x) + b[:, None, None]


def fuse_and_predict(pyramid_features, cfg, head, term_seed=None):
    """Fuse per-level features and predict logits at ``cfg.output_stride``.

    ``pyramid_features[l][j]`` is the extractor's output at backbone stride
    ``cfg.backbone_strides[j]`` for pyramid level ``l``.  ``term_seed``
    shuffles the summation order inside each fusion group (for testing
    float reassociation only).
    """
    if len(pyramid_features) != cfg.levels:
        raise ShapeError(f"expected {cfg.levels} pyramid levels, got {len(pyramid_features)}")
    groups = {}
    for level, feats in enumerate(pyramid_features):
        if len(feats) != len(cfg.backbone_strides):
            raise ShapeError(f"level {level}: expected {len(cfg.backbone_strides)} feature maps")
        for j, (stride, f) in enumerate(zip(cfg.backbone_strides, feats)):
            effective = stride * 2 ** level
            if effective >= cfg.output_stride:
                groups.setdefault(effective, []).append((j, f))
    if cfg.output_stride not in groups:
        raise ShapeError(f"no features at the output stride {cfg.output_stride}")
    rng = None if term_seed is None else np.random.default_rng(term_seed)

    y = None
    for effective in sorted(groups, reverse=True):
        terms = groups[effective]
        shapes = {f.shape[1:] for _, f in terms}
        if len(shapes) != 1:
            raise ShapeError(f"misaligned features at stride {effective}: {sorted(shapes)}")
        if rng is not None:
            terms = [terms[k] for k in rng.permutation(len(terms))]
        acc = None
        for j, f in terms:
            t = _conv1x1(head.lateral[j], f)
            acc = t if acc is None else acc + t
        if y is not None:
            acc = acc + resize(y, *acc.shape[1:])
        y = np.maximum(acc, 0).astype(np.float32, copy=False)
    return _conv1x1(head.classifier, y).astype(np.float32, copy=False)


class PyramidModel:
    """Shared extractor applied to every pyramid level, followed by the fusion head."""

    def __init__(self, extractor, head, cfg=PyramidConfig()):
        self.extractor = extractor
        self.head = head
        self.cfg = cfg

    @classmethod
    def toy(cls, num_classes, seed=0, cfg=PyramidConfig()):
        extractor = RandomExtractor(seed)
        head = HeadParams.random(extractor.channels, num_classes, cfg.fusion_channels, seed + 1)
        return cls(extractor, head, cfg)

    def features(self, image):
        return [self.extractor(level) for level in build_pyramid(image, self.cfg.levels)]

    def __call__(self, image, term_seed=None):
        return fuse_and_predict(self.features(image), self.cfg, self.head, term_seed)


def pad_to_multiple(image, multiple):
    c, h, w = image.shape
    ph, pw = -(-h // multiple) * multiple, -(-w // multiple) * multiple
    if (ph, pw) == (h, w):
        return image
    out = np.zeros((c, ph, pw), dtype=image.dtype)
    out[:, :h, :w] = image
    return out


def single_scale_probs(image, model, scale=1.0):
    """Universal-class probabilities at the input resolution for one scale."""
    image = np.asarray(image, dtype=np.float32)
    _, h, w = image.shape
    sh, sw = max(1, round(h * scale)), max(1, round(w * scale))
    scaled = image if (sh, sw) == (h, w) else resize(image, sh, sw)
    padded = pad_to_multiple(scaled, model.cfg.alignment)
    probs = softmax(model(padded), axis=0)
    probs = resize(probs, *padded.shape[1:])[:, :sh, :sw]
    if (sh, sw) != (h, w):
        probs = resize(probs, h, w)
    return probs.astype(np.float32, copy=False)


def multi_scale_probs(image, scales, model):
    if len(scales) == 0:
        raise ValueError("at least one scale is required")
    acc = None
    for s in scales:
        p = single_scale_probs(image, model, s).astype(np.float64)
        acc = p if acc is None else acc + p
    return (acc / len(scales)).astype(np.float32)


def multi_scale_infer(image, scales, model, m):
    """Average universal probabilities over ``scales`` and aggregate for one dataset."""
    return aggregate_probs(multi_scale_probs(image, scales, model), m)


# --------------------------------------------------------------------------
# scoring


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions.

    Predictions outside the class range (void) land in ``unmatched``; they
    count as misses of the ground-truth class.
    """

    counts: np.ndarray
    unmatched: np.ndarray = field(default=None)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.unmatched is None:
            self.unmatched = np.zeros(self.counts.shape[0], dtype=np.int64)

    @classmethod
    def empty(cls, num_classes):
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum() + self.unmatched.sum())

    def iou(self):
        tp = np.diag(self.counts).astype(np.float64)
        gt = self.counts.sum(axis=1) + self.unmatched
        pred = self.counts.sum(axis=0)
        union = gt + pred - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)


def update_confusion(cm, pred, gt, ignore_id=255):
    pred = np.asarray(pred).astype(np.int64)
    gt = np.asarray(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    n = cm.num_classes
    keep = gt != ignore_id
    g, p = gt[keep], pred[keep]
    if ((g < 0) | (g >= n)).any():
        raise ShapeError(f"ground-truth label outside [0, {n}) and not ignore_id")
    inside = (p >= 0) & (p < n)
    counts = cm.counts + np.bincount(n * g[inside] + p[inside], minlength=n * n).reshape(n, n)
    unmatched = cm.unmatched + np.bincount(g[~inside], minlength=n)
    return ConfusionMatrix(counts, unmatched)


def miou(cm):
    """Mean IoU over classes that occur in the ground truth or the prediction."""
    if not isinstance(cm, ConfusionMatrix):
        cm = ConfusionMatrix(np.asarray(cm))
    ious = cm.iou()
    present = ~np.isnan(ious)
    if not present.any():
        return float("nan")
    return float(ious[present].mean())
