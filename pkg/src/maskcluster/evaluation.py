"""Inference and scoring of learned clusters against ground-truth classes.

Predicted clusters carry no names, so they are matched to classes once,
globally over the evaluation set, by maximum-total-IoU assignment.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .dataio import UNLABELED
from .model import encode_class_prompts, encode_image, mask_pool, similarity_map
from .training import TrainState


@dataclass
class SegmentationReport:
    per_class_iou: list
    miou: float
    matching: dict  # cluster -> class
    confusion: np.ndarray  # k x c intersection counts
    mask_accuracy: float | None = None
    num_samples: int = 0
    present: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "miou": self.miou,
            "per_class_iou": [None if v is None else float(v) for v in self.per_class_iou],
            "matching": {str(k): int(v) for k, v in sorted(self.matching.items())},
            "mask_accuracy": self.mask_accuracy,
            "num_samples": self.num_samples,
        }


def infer_segmentation(state: TrainState, image) -> np.ndarray:
    """Per-pixel cluster labels from the student encoder and class features only."""
    f = encode_image(state.student, image)
    sim = similarity_map(f, encode_class_prompts(state.prompts))
    cells = np.argmax(sim, axis=-1)
    p = state.student.patch_size
    return np.repeat(np.repeat(cells, p, axis=0), p, axis=1)


def classify_masks(state: TrainState, image, masks) -> np.ndarray:
    """Cluster index per mask: argmax cosine of the mask-pooled student feature."""
    f = encode_image(state.student, image)
    fm = mask_pool(f, masks)
    sim = similarity_map(fm[None], encode_class_prompts(state.prompts))[0]
    return np.argmax(sim, axis=-1)


def miou(pred, gt, num_classes: int, ignore_label: int = UNLABELED) -> dict:
    """IoU per class and their mean over classes seen in ``pred`` or ``gt``.

    ``pred`` values outside ``[0, num_classes)`` count as wrong everywhere.
    """
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    keep = gt != ignore_label
    pred, gt = pred[keep], gt[keep]
    ious = []
    for c in range(num_classes):
        p, g = pred == c, gt == c
        union = int(np.sum(p | g))
        ious.append(None if union == 0 else float(np.sum(p & g)) / union)
    valid = [v for v in ious if v is not None]
    return {"per_class_iou": ious, "miou": float(np.mean(valid)) if valid else float("nan")}


def hungarian_match(iou_matrix) -> tuple[dict, float]:
    """Maximum-total assignment between rows and columns; ``min(k, c)`` pairs."""
    A = np.asarray(iou_matrix, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if A.size == 0:
        return {}, 0.0
    transposed = A.shape[0] > A.shape[1]
    B = A.T if transposed else A
    cols = _kernels.hungarian_min(B.max() - B)
    pairs = {int(i): int(j) for i, j in enumerate(cols)}
    if transposed:
        pairs = {j: i for i, j in pairs.items()}
    total = float(sum(A[i, j] for i, j in pairs.items()))
    return dict(sorted(pairs.items())), total


def greedy_match(iou_matrix) -> tuple[dict, float]:
    """Row-by-row best free column; a baseline for ``hungarian_match``."""
    A = np.asarray(iou_matrix, dtype=np.float64)
    used, pairs = set(), {}
    for i in range(A.shape[0]):
        free = [j for j in range(A.shape[1]) if j not in used]
        if not free:
            break
        j = max(free, key=lambda c: A[i, c])
        pairs[i] = j
        used.add(j)
    return pairs, float(sum(A[i, j] for i, j in pairs.items()))


def _majority_label(mask: np.ndarray, labels: np.ndarray) -> int:
    vals = labels[mask]
    vals = vals[vals != UNLABELED]
    if not len(vals):
        return -1
    return int(np.bincount(vals.astype(np.int64)).argmax())


def evaluate(state: TrainState, samples, num_classes: int | None = None, masks_from_gt: bool = False) -> SegmentationReport:
    """Global matched mIoU plus mask-classification accuracy.

    Mask accuracy scores ``classify_masks`` on the unlabeled masks (each
    labelled by the majority class under it) or, with ``masks_from_gt``, on
    the ground-truth masks.
    """
    k = state.prompts.k
    if num_classes is None:
        num_classes = int(max(int(s.gt_labels[s.gt_labels != UNLABELED].max(initial=0)) for s in samples)) + 1
    c = num_classes
    inter = np.zeros((k, c), dtype=np.int64)
    pred_count = np.zeros(k, dtype=np.int64)
    gt_count = np.zeros(c, dtype=np.int64)
    preds, mask_preds, mask_truth = [], [], []
    for s in samples:
        pred = infer_segmentation(state, s.image)
        preds.append(pred)
        keep = s.gt_labels != UNLABELED
        p, g = pred[keep].astype(np.int64), s.gt_labels[keep].astype(np.int64)
        np.add.at(inter, (p, g), 1)
        pred_count += np.bincount(p, minlength=k)
        gt_count += np.bincount(g, minlength=c)
        if masks_from_gt:
            masks, truth = s.gt_masks, list(s.gt_classes)
        else:
            masks = s.unlabeled_masks
            truth = [_majority_label(m, s.gt_labels) for m in masks]
        if len(masks):
            mask_preds.extend(classify_masks(state, s.image, masks).tolist())
            mask_truth.extend(truth)
    union = pred_count[:, None] + gt_count[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    matching, _ = hungarian_match(iou)

    relabel = np.full(k, c, dtype=np.int64)  # c = "no class"
    for cluster, cls in matching.items():
        relabel[cluster] = cls
    per_class = []
    for cls in range(c):
        clusters = [j for j, v in matching.items() if v == cls]
        i = int(inter[clusters[0], cls]) if clusters else 0
        matched_pred = int(pred_count[clusters[0]]) if clusters else 0
        u = matched_pred + int(gt_count[cls]) - i
        per_class.append(None if u == 0 else i / u)
    valid = [v for v in per_class if v is not None]
    accuracy = None
    if mask_preds:
        hits = [relabel[p] == t for p, t in zip(mask_preds, mask_truth) if t >= 0]
        accuracy = float(np.mean(hits)) if hits else None
    return SegmentationReport(
        per_class_iou=per_class,
        miou=float(np.mean(valid)) if valid else 0.0,
        matching=matching,
        confusion=inter,
        mask_accuracy=accuracy,
        num_samples=len(samples),
    )


def relabel_predictions(pred, matching: dict, num_classes: int) -> np.ndarray:
    lut = np.full(max(matching, default=-1) + 1 if matching else 1, num_classes, dtype=np.int64)
    for cluster, cls in matching.items():
        lut[cluster] = cls
    pred = np.asarray(pred, dtype=np.int64)
    out = np.full(pred.shape, num_classes, dtype=np.int64)
    inside = pred < len(lut)
    out[inside] = lut[pred[inside]]
    return out
