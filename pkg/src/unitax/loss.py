"""Log-sum-prob loss over universal classes with a streamed custom backward.

For a pixel labelled with dataset class ``y`` the loss is ``-log P_S`` where
``P_S`` sums the softmax probabilities of every universal class mapped to
``y``.  Logits are predicted at stride 8 and bilinearly upsampled before the
softmax.  Both passes walk the full-resolution image in row bands, so the
upsampled logits and their gradient only ever exist one band at a time; the
backward recomputes each band from the low-resolution logits and pushes its
gradient through the transpose of the upsampling.

Pixel weights: ``w * (1 - P_S) ** gamma``.  ``w >= 1`` comes from the caller
(boundary emphasis), the focal factor is held constant in the backward.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyLabelSetError, ShapeError
from .interp import interp_matrix

DEFAULT_IGNORE_ID = 255


@dataclass(frozen=True)
class LossConfig:
    tile_rows: int = 64
    upsample_factor: int = 8
    gamma: float = 0.0

    def __post_init__(self):
        if self.tile_rows < 1:
            raise ValueError("tile_rows must be positive")
        if self.upsample_factor < 1:
            raise ValueError("upsample_factor must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass(frozen=True)
class LabelSetTarget:
    """Full-resolution labels plus the universal index set of every label."""

    labels: np.ndarray
    label_sets: tuple
    ignore_id: int = DEFAULT_IGNORE_ID

    @classmethod
    def from_matrix(cls, labels, m, ignore_id=DEFAULT_IGNORE_ID):
        return cls(np.asarray(labels), tuple(m.label_sets()), ignore_id)


@dataclass(frozen=True)
class ModulationMap:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if not np.isfinite(w).all() or (w < 1).any():
            raise ValueError("modulation weights must be finite and >= 1")

    @classmethod
    def uniform(cls, shape):
        return cls(np.ones(shape, dtype=np.float64))


@dataclass
class LspState:
    """What the forward keeps for the backward: low-res inputs and per-band scalars."""

    logits: np.ndarray
    logits_shape: tuple
    target: LabelSetTarget
    modulation: ModulationMap
    cfg: LossConfig
    num_pixels: int
    band_losses: list = field(default_factory=list)
    fixed_focal: np.ndarray | None = None


def softmax(z, axis=0):
    z = np.asarray(z)
    out_dtype = np.result_type(z.dtype, np.float32)
    z64 = z.astype(np.float64)
    e = np.exp(z64 - z64.max(axis=axis, keepdims=True))
    return (e / e.sum(axis=axis, keepdims=True)).astype(out_dtype)


def _as_batch(logits, labels, weights, fixed_focal):
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    if logits.ndim == 3:
        logits = logits[None]
    if labels.ndim == 2:
        labels = labels[None]
    if weights.ndim == 2:
        weights = weights[None]
    if fixed_focal is not None and np.ndim(fixed_focal) == 2:
        fixed_focal = np.asarray(fixed_focal)[None]
    if logits.ndim != 4:
        raise ShapeError(f"logits must be (C, h, w) or (B, C, h, w), got {logits.shape}")
    return logits, labels, weights, fixed_focal


def _check_shapes(logits, labels, weights, cfg, label_sets, ignore_id, fixed_focal):
    b, c, h, w = logits.shape
    full = (b, cfg.upsample_factor * h, cfg.upsample_factor * w)
    if labels.shape != full:
        raise ShapeError(f"labels {labels.shape} do not match upsampled logits {full}")
    if weights.shape != full:
        raise ShapeError(f"weights {weights.shape} do not match upsampled logits {full}")
    if fixed_focal is not None and np.shape(fixed_focal) != full:
        raise ShapeError(f"fixed focal factors {np.shape(fixed_focal)} != {full}")
    present = np.unique(labels[labels != ignore_id])
    for y in present:
        if y < 0 or y >= len(label_sets) or len(label_sets[int(y)]) == 0:
            raise EmptyLabelSetError(f"label {int(y)} has an empty universal class set")
        if np.max(label_sets[int(y)]) >= c:
            raise ShapeError(f"label {int(y)} refers to universal class >= {c}")


def _logsumexp0(a):
    # scipy.special.logsumexp carries array-API dispatch overhead that dominates small bands
    m = a.max(axis=0)
    return m + np.log(np.exp(a - m).sum(axis=0))


def _bands(full_h, tile_rows):
    for r0 in range(0, full_h, tile_rows):
        yield r0, min(r0 + tile_rows, full_h)


def _band_softmax(x, ah, aw_t, r0, r1, labels_b, label_sets, valid_b, keep_subset_softmax):
    """Upsampled logits of rows ``r0:r1`` turned into probabilities in place.

    Returns ``(p, log_ps, subset_softmax)``; ``p`` is the only C x R x W buffer.
    ``subset_softmax`` holds, per label, ``p_k / P_S`` over the label's set.
    """
    a_band = ah[r0:r1]
    support = np.flatnonzero(a_band.any(axis=0))
    lo, hi = support[0], support[-1] + 1
    xw = x[:, lo:hi] @ aw_t
    z = a_band[:, lo:hi] @ xw
    del xw
    c = z.shape[0]
    z -= z.max(axis=0)
    flat = z.reshape(c, -1)
    log_ps = np.zeros(labels_b.shape, dtype=np.float64)
    log_ps_flat = log_ps.reshape(-1)
    groups = []
    labels_flat = labels_b.reshape(-1)
    valid_flat = valid_b.reshape(-1)
    for y in np.unique(labels_flat[valid_flat]):
        cols = np.flatnonzero((labels_flat == y) & valid_flat)
        members = label_sets[int(y)]
        ix = np.ix_(members, cols)
        zs = flat[ix]
        lse = _logsumexp0(zs)
        log_ps_flat[cols] = lse
        if keep_subset_softmax:
            zs -= lse
            np.exp(zs, out=zs)
        groups.append((ix, cols, members, zs if keep_subset_softmax else None))
        del zs
    np.exp(z, out=z)
    denom = z.sum(axis=0)
    z /= denom
    log_ps -= np.log(denom)
    # near P_S = 1 the difference of logs loses all digits; sum 1 - P_S directly
    for _, cols, members, _ in groups:
        rest = flat[:, cols]
        rest[list(members)] = 0.0
        rest = rest.sum(axis=0)
        near = rest < 0.5
        log_ps_flat[cols[near]] = np.log1p(-rest[near])
    log_ps[~valid_b] = 0.0
    groups = [(ix, cols, q) for ix, cols, _, q in groups] if keep_subset_softmax else []
    return z, log_ps, groups


def _pixel_factors(log_ps, weights_b, gamma, focal_b):
    if focal_b is not None:
        return weights_b * focal_b
    if gamma == 0:
        return weights_b
    return weights_b * (-np.expm1(log_ps)) ** gamma


def lsp_forward(logits, target, modulation, cfg=LossConfig(), fixed_focal=None):
    """Streamed log-sum-prob loss.

    ``logits`` is ``(C_u, h, w)`` or ``(B, C_u, h, w)``; target labels and
    modulation weights live at full resolution.  Returns ``(loss, state)``.
    The loss is the mean over non-ignored pixels; it is 0 if every pixel is
    ignored.  ``fixed_focal`` replaces ``(1 - P_S) ** gamma`` by given
    per-pixel constants.
    """
    logits_shape = np.shape(logits)
    logits, labels, weights, fixed_focal = _as_batch(
        logits, target.labels, modulation.weights, fixed_focal
    )
    _check_shapes(logits, labels, weights, cfg, target.label_sets, target.ignore_id, fixed_focal)
    b, c, h, w = logits.shape
    f = cfg.upsample_factor
    ah = interp_matrix(h, f * h)
    aw_t = np.ascontiguousarray(interp_matrix(w, f * w).T)
    valid = labels != target.ignore_id
    n = int(np.count_nonzero(valid))
    state = LspState(logits, logits_shape, target, modulation, cfg, n, fixed_focal=fixed_focal)
    total = 0.0
    for i in range(b):
        x = logits[i].astype(np.float64)
        for r0, r1 in _bands(f * h, cfg.tile_rows):
            valid_b = valid[i, r0:r1]
            p, log_ps, _ = _band_softmax(
                x, ah, aw_t, r0, r1, labels[i, r0:r1], target.label_sets, valid_b, False
            )
            del p
            focal_b = None if fixed_focal is None else fixed_focal[i, r0:r1]
            k = _pixel_factors(log_ps, weights[i, r0:r1], cfg.gamma, focal_b)
            band = float(-(k * log_ps)[valid_b].sum())
            state.band_losses.append(band)
            total += band
    loss = total / n if n else 0.0
    return loss, state


def lsp_backward(state, upstream=1.0):
    """Gradient of the loss with respect to the low-resolution logits."""
    logits, labels, weights, fixed_focal = _as_batch(
        state.logits, state.target.labels, state.modulation.weights, state.fixed_focal
    )
    target, cfg = state.target, state.cfg
    b, c, h, w = logits.shape
    f = cfg.upsample_factor
    ah = interp_matrix(h, f * h)
    aw = interp_matrix(w, f * w)
    aw_t = np.ascontiguousarray(aw.T)
    valid = labels != target.ignore_id
    grad = np.zeros((b, c, h, w), dtype=np.float64)
    if state.num_pixels == 0:
        return grad.reshape(state.logits_shape)
    scale = upstream / state.num_pixels
    for i in range(b):
        x = logits[i].astype(np.float64)
        for r0, r1 in _bands(f * h, cfg.tile_rows):
            valid_b = valid[i, r0:r1]
            g, log_ps, groups = _band_softmax(
                x, ah, aw_t, r0, r1, labels[i, r0:r1], target.label_sets, valid_b, True
            )
            focal_b = None if fixed_focal is None else fixed_focal[i, r0:r1]
            a = _pixel_factors(log_ps, weights[i, r0:r1], cfg.gamma, focal_b) * scale
            a[~valid_b] = 0.0
            g *= a
            flat = g.reshape(c, -1)
            a_flat = a.reshape(-1)
            for ix, cols, q in groups:
                q *= a_flat[cols]
                flat[ix] -= q
            del groups
            # transpose of the band's upsampling
            a_band = ah[r0:r1]
            support = np.flatnonzero(a_band.any(axis=0))
            lo, hi = support[0], support[-1] + 1
            gw = g @ aw
            del g
            grad[i, :, lo:hi] += a_band[:, lo:hi].T @ gw
    return grad.reshape(state.logits_shape)


def focal_factors(logits, target, cfg=LossConfig()):
    """Per-pixel ``(1 - P_S) ** gamma`` at ``logits`` (1 where ignored)."""
    logits, labels, _, _ = _as_batch(logits, target.labels, np.ones(np.shape(target.labels)), None)
    b, c, h, w = logits.shape
    f = cfg.upsample_factor
    ah = interp_matrix(h, f * h)
    aw_t = np.ascontiguousarray(interp_matrix(w, f * w).T)
    valid = labels != target.ignore_id
    out = np.ones(labels.shape, dtype=np.float64)
    for i in range(b):
        x = logits[i].astype(np.float64)
        for r0, r1 in _bands(f * h, cfg.tile_rows):
            _, log_ps, _ = _band_softmax(
                x, ah, aw_t, r0, r1, labels[i, r0:r1], target.label_sets, valid[i, r0:r1], False
            )
            out[i, r0:r1] = (-np.expm1(log_ps)) ** cfg.gamma
    return out.reshape(np.shape(target.labels))


def lsp_reference(logits, target, modulation, cfg=LossConfig(), fixed_focal=None):
    """Full-materialization loss and gradient, used as a check on the streamed path."""
    orig_shape = np.shape(logits)
    logits, labels, weights, fixed_focal = _as_batch(
        logits, target.labels, modulation.weights, fixed_focal
    )
    _check_shapes(logits, labels, weights, cfg, target.label_sets, target.ignore_id, fixed_focal)
    b, c, h, w = logits.shape
    f = cfg.upsample_factor
    ah = interp_matrix(h, f * h)
    aw = interp_matrix(w, f * w)
    lookup = np.zeros((len(target.label_sets) + 1, c), dtype=bool)
    for y, s in enumerate(target.label_sets):
        lookup[y, s] = True
    valid = labels != target.ignore_id
    n = int(np.count_nonzero(valid))
    loss = 0.0
    grad = np.zeros((b, c, h, w), dtype=np.float64)
    for i in range(b):
        z = np.einsum("Hh,chw,Ww->cHW", ah, logits[i].astype(np.float64), aw, optimize=True)
        p = np.exp(z - z.max(axis=0))
        p /= p.sum(axis=0)
        del z
        lab = np.where(valid[i], labels[i], len(target.label_sets))
        member = np.moveaxis(lookup[lab], -1, 0)
        ps = np.where(member, p, 0.0).sum(axis=0)
        rest = np.where(member, 0.0, p).sum(axis=0)
        ps_safe = np.where(valid[i], ps, 1.0)
        rest_safe = np.where(valid[i], rest, 0.0)
        # 1 - P_S summed directly keeps precision when P_S is close to 1
        log_ps = np.where(rest_safe < 0.5, np.log1p(-np.minimum(rest_safe, 0.5)), np.log(ps_safe))
        if fixed_focal is not None:
            focal = fixed_focal[i]
        else:
            focal = rest_safe ** cfg.gamma
        k = np.where(valid[i], weights[i] * focal, 0.0)
        loss += float(np.sum(k * -log_ps))
        if n:
            g = (k / n) * (p - np.where(member, p, 0.0) / ps_safe)
            grad[i] = np.einsum("Hh,cHW,Ww->chw", ah, g, aw, optimize=True)
    loss = loss / n if n else 0.0
    return loss, grad.reshape(orig_shape)


@dataclass(frozen=True)
class MemoryEstimate:
    naive_bytes: int
    streamed_bytes: int
    tile_bytes: int
    lowres_grad_bytes: int


def memory_model(cfg, num_universal, h, w, batch, bytes_per_float=4):
    """Analytic buffer sizes for the materialized and the streamed loss.

    The materialized path holds full-resolution logits and their gradient.
    The streamed path holds one band of each plus the low-resolution
    gradient; with a single band covering the image it is the materialized
    path and costs the same.
    """
    f = cfg.upsample_factor
    full_h, full_w = f * h, f * w
    naive = 2 * bytes_per_float * num_universal * full_h * full_w * batch
    rows = min(cfg.tile_rows, full_h)
    tile = 2 * bytes_per_float * num_universal * rows * full_w * batch
    lowres = bytes_per_float * num_universal * h * w * batch
    streamed = naive if rows >= full_h else tile + lowres
    return MemoryEstimate(naive, streamed, tile, lowres)
