"""Roulette-wheel batch composition, the crop/batch schedule and the LR curve."""
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, EmptyPoolError, OutOfRangeError, ParseError
from .interp import resize, resize_nearest


@dataclass(frozen=True)
class ImageRecord:
    id: str
    dataset: str
    class_histogram: np.ndarray
    instance_counts: np.ndarray

    def __post_init__(self):
        for name in ("class_histogram", "instance_counts"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if (arr < 0).any():
                raise ValueError(f"{self.id}: negative entries in {name}")
            object.__setattr__(self, name, arr)
        if not self.class_histogram.any() and not self.instance_counts.any():
            raise DegenerateError(f"{self.id}: record has no positive count")


def load_records(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from None
    if isinstance(doc, dict):
        doc = doc.get("records")
    if not isinstance(doc, list):
        raise ParseError("records document must be a list of image records")
    try:
        return [
            ImageRecord(
                str(r["id"]), str(r.get("dataset", "")),
                r.get("class_histogram", r["instance_counts"]), r["instance_counts"],
            )
            for r in doc
        ]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed image record: {exc!r}") from None


def class_frequencies(records):
    """Global pixel frequency of every universal class across ``records``."""
    total = np.sum([r.class_histogram for r in records], axis=0)
    return total / total.sum()


def image_weight(rec, class_frequency):
    """Sum over present classes of instance count divided by class frequency.

    Favours images with many instances and images with rare classes.
    """
    counts = rec.instance_counts
    if not counts.any():
        raise DegenerateError(f"{rec.id}: all instance counts are zero")
    freq = np.asarray(class_frequency, dtype=np.float64)
    present = counts > 0
    if (freq[present] <= 0).any():
        raise DegenerateError(f"{rec.id}: a present class has zero global frequency")
    return float(np.sum(counts[present] / freq[present]))


class RouletteSampler:
    """Draws image ids with replacement, proportionally to their weights."""

    def __init__(self, records, weights, seed=0):
        if len(records) == 0:
            raise EmptyPoolError("cannot sample from an empty pool")
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(records),):
            raise ValueError(f"{weights.size} weights for {len(records)} records")
        if not np.isfinite(weights).all() or (weights <= 0).any():
            raise ValueError("weights must be positive and finite")
        self.ids = [r.id if isinstance(r, ImageRecord) else r for r in records]
        self.probs = weights / weights.sum()
        self.rng = np.random.default_rng(seed)

    def draw_indices(self, n):
        return self.rng.choice(len(self.ids), size=n, replace=True, p=self.probs)

    def batch(self, batch_size):
        return [self.ids[i] for i in self.draw_indices(batch_size)]


def sample_batch(records, weights, batch_size, rng_seed=0):
    return RouletteSampler(records, weights, rng_seed).batch(batch_size)


# --------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class ScheduleEntry:
    epoch_range: tuple
    crop_size: int
    devices: int
    per_device: int
    jitter_range: tuple

    @property
    def batch_size(self):
        return self.devices * self.per_device

    def to_dict(self):
        return {
            "epoch_range": list(self.epoch_range),
            "crop_size": self.crop_size,
            "batch_size": self.batch_size,
            "devices": self.devices,
            "per_device": self.per_device,
            "jitter_range": list(self.jitter_range),
        }


SCHEDULE = (
    ScheduleEntry((0, 15), 384, 6, 16, (0.75, 1.33)),
    ScheduleEntry((16, 31), 512, 6, 8, (0.60, 1.67)),
    ScheduleEntry((32, 49), 768, 6, 4, (0.50, 2.00)),
    ScheduleEntry((50, 52), 1024, 6, 2, (0.40, 2.50)),
)
LAST_EPOCH = SCHEDULE[-1].epoch_range[1]


def schedule_lookup(epoch):
    for entry in SCHEDULE:
        lo, hi = entry.epoch_range
        if lo <= epoch <= hi:
            return entry
    raise OutOfRangeError(f"epoch {epoch} outside the schedule [0, {LAST_EPOCH}]")


@dataclass(frozen=True)
class LrSchedule:
    eta_max: float = 1e-3
    eta_min: float = 6e-6
    total_steps: int = 140_000

    def __post_init__(self):
        if not self.eta_min < self.eta_max:
            raise ValueError("eta_min must be below eta_max")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")


def lr_at(step, sched=LrSchedule()):
    """Cosine annealing from ``eta_max`` at step 0 to ``eta_min`` at the last step."""
    if not 0 <= step <= sched.total_steps:
        raise OutOfRangeError(f"step {step} outside [0, {sched.total_steps}]")
    cos = math.cos(math.pi * step / sched.total_steps)
    return sched.eta_min + 0.5 * (sched.eta_max - sched.eta_min) * (1 + cos)


# --------------------------------------------------------------------------
# augmentation


def jitter_and_crop(image, entry, rng_seed=0, labels=None, ignore_id=255):
    """Random scale jitter, square crop and horizontal flip.

    The crop is zero padded (labels with ``ignore_id``) where the scaled
    image is smaller than ``entry.crop_size``.  Returns the crop, or
    ``(crop, label_crop)`` when ``labels`` is given.
    """
    image = np.asarray(image)
    rng = np.random.default_rng(rng_seed)
    lo, hi = entry.jitter_range
    scale = rng.uniform(lo, hi) if hi > lo else lo
    c, h, w = image.shape
    sh, sw = max(1, round(h * scale)), max(1, round(w * scale))
    scaled = resize(image, sh, sw).astype(np.float32, copy=False)
    size = entry.crop_size

    top = int(rng.integers(0, sh - size + 1)) if sh > size else 0
    left = int(rng.integers(0, sw - size + 1)) if sw > size else 0
    flip = bool(rng.random() < 0.5)

    out = np.zeros((c, size, size), dtype=np.float32)
    ch, cw = min(size, sh), min(size, sw)
    out[:, :ch, :cw] = scaled[:, top:top + ch, left:left + cw]
    if flip:
        out = out[:, :, ::-1].copy()
    if labels is None:
        return out

    lab = resize_nearest(np.asarray(labels), sh, sw)
    lab_out = np.full((size, size), ignore_id, dtype=lab.dtype)
    lab_out[:ch, :cw] = lab[top:top + ch, left:left + cw]
    if flip:
        lab_out = lab_out[:, ::-1].copy()
    return out, lab_out


FLAT_BOUNDARY_DATASETS = frozenset({"ScanNet"})


def boundary_weights(dataset, weights, flat_datasets=FLAT_BOUNDARY_DATASETS):
    """Boundary modulation for a crop; datasets with noisy labels get the minimum of 1."""
    weights = np.asarray(weights, dtype=np.float64)
    if dataset in flat_datasets:
        return np.ones_like(weights)
    return weights
