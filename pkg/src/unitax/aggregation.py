"""Universal-class probabilities to dataset-class probabilities and crisp labels."""
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class AggregationMatrix:
    """0/1 map from universal classes to the classes of one dataset.

    Column ``u`` of ``matrix`` is one-hot at the dataset class that universal
    class ``u`` belongs to, or all zero when ``void_mask[u]`` is set.
    """

    dataset: str
    matrix: np.ndarray
    void_mask: np.ndarray
    class_order: tuple
    eval_mask: np.ndarray

    @property
    def num_classes(self):
        return self.matrix.shape[0]

    @property
    def num_universal(self):
        return self.matrix.shape[1]

    @property
    def void_index(self):
        return self.num_classes

    def rows(self):
        return [np.flatnonzero(row).tolist() for row in self.matrix]

    def label_sets(self):
        return [np.flatnonzero(row) for row in self.matrix]

    def to_dict(self):
        return {
            "classes": list(self.class_order),
            "rows": self.rows(),
            "void": np.flatnonzero(self.void_mask).tolist(),
            "eval": [bool(e) for e in self.eval_mask],
        }

    @classmethod
    def from_rows(cls, dataset, rows, num_universal, class_order=None, eval_mask=None):
        matrix = np.zeros((len(rows), num_universal), dtype=np.float32)
        for r, cols in enumerate(rows):
            matrix[r, list(cols)] = 1
        if (matrix.sum(axis=0) > 1).any():
            raise ShapeError(f"{dataset}: a universal class maps to two dataset classes")
        void_mask = (matrix.sum(axis=0) == 0).astype(np.float32)
        if class_order is None:
            class_order = tuple(str(r) for r in range(len(rows)))
        if eval_mask is None:
            eval_mask = np.ones(len(rows), dtype=bool)
        return cls(dataset, matrix, void_mask, tuple(class_order), np.asarray(eval_mask, dtype=bool))


def export_matrix(tax, dataset):
    classes = tax.dataset_classes(dataset)
    index = tax.element_index
    rows = [[index[e] for e in tax.mapping[c.key]] for c in classes]
    return AggregationMatrix.from_rows(
        dataset, rows, len(tax.elements),
        class_order=tuple(c.name for c in classes),
        eval_mask=[c.eval for c in classes],
    )


def aggregate_probs(probs, m):
    """Sum universal probabilities into dataset-class and void probabilities.

    ``probs`` has shape ``(C_u, H, W)``.  Returns ``(dataset_probs, void_prob)``
    with shapes ``(C_d, H, W)`` and ``(H, W)``, both float32.
    """
    probs = np.asarray(probs)
    if probs.ndim != 3 or probs.shape[0] != m.num_universal:
        raise ShapeError(
            f"expected ({m.num_universal}, H, W) probabilities, got {probs.shape}"
        )
    c, h, w = probs.shape
    flat = probs.reshape(c, -1).astype(np.float64)
    dataset = m.matrix.astype(np.float64) @ flat
    void = m.void_mask.astype(np.float64) @ flat
    return (
        dataset.reshape(-1, h, w).astype(np.float32),
        void.reshape(h, w).astype(np.float32),
    )


def decode_argmax(dataset_probs, void_prob, include_void=False, eval_mask=None):
    """Per-pixel argmax over evaluated classes, optionally competing with void.

    Void is reported as index ``C_d``.  Ties go to the lowest index, so void
    only wins when it is strictly larger than every evaluated class.
    """
    dataset_probs = np.asarray(dataset_probs)
    void_prob = np.asarray(void_prob)
    if dataset_probs.ndim != 3 or void_prob.shape != dataset_probs.shape[1:]:
        raise ShapeError(
            f"dataset probs {dataset_probs.shape} and void {void_prob.shape} disagree"
        )
    c = dataset_probs.shape[0]
    if eval_mask is None:
        eval_mask = np.ones(c, dtype=bool)
    eval_mask = np.asarray(eval_mask, dtype=bool)
    if eval_mask.shape != (c,):
        raise ShapeError(f"eval mask of length {eval_mask.size} for {c} classes")
    if not eval_mask.any() and not include_void:
        raise ShapeError("no evaluated class to decode into")
    scores = np.full((c + 1,) + dataset_probs.shape[1:], -np.inf, dtype=np.float64)
    scores[:c][eval_mask] = dataset_probs[eval_mask]
    if include_void:
        scores[c] = void_prob
    return np.argmax(scores, axis=0)


def void_fraction(labels, void_index):
    labels = np.asarray(labels)
    return float(np.count_nonzero(labels == void_index)) / labels.size
