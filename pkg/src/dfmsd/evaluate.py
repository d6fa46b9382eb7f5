"""Detection metrics: IoU, greedy matching, AP@IoU and mean recall.

AP uses all-point interpolation (exact area under the precision envelope),
matching modern COCO practice. Matching is greedy in descending score order
with one match per ground-truth box. When both prediction and ground truth
carry class labels, matching is per class and metrics average over the
classes present in the ground truth.
"""

from __future__ import annotations

import numpy as np

from .core import BoxSet


def box_iou(a: tuple[float, float, float, float], b: tuple[float, float, float, float]) -> float:
    """Intersection-over-union of two corner-form boxes."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    ix0, iy0 = max(ax0, bx0), max(ay0, by0)
    ix1, iy1 = min(ax1, bx1), min(ay1, by1)
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _labels_or_default(bs: BoxSet) -> tuple[int, ...]:
    if bs.labels is not None:
        return bs.labels
    return tuple(0 for _ in range(len(bs)))


def _ap_from_pr(tp_flags: np.ndarray, num_gt: int) -> float:
    """Area under the interpolated precision-recall curve."""
    if num_gt == 0 or tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope: p(r) = max precision at recall >= r
    mrec = np.concatenate(([0.0], recall, [recall[-1]]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def evaluate_ap(
    predictions: list[BoxSet],
    ground_truth: list[BoxSet],
    iou_thresh: float = 0.5,
    max_dets: int = 100,
) -> dict[str, float]:
    """Evaluate predictions against ground truth over a set of images.

    Returns {"ap50": area under the PR curve at the given IoU threshold,
    "mar": recall using at most ``max_dets`` detections per image}, each
    averaged over ground-truth classes.
    """
    if not (0.0 < iou_thresh < 1.0):
        raise ValueError(f"iou_thresh must be in (0,1), got {iou_thresh}")
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground_truth must cover the same images")

    # cap detections per image by score before pooling
    capped: list[tuple[list, list, list]] = []
    for preds in predictions:
        order = sorted(range(len(preds)), key=lambda i: -preds.scores[i])[:max_dets]
        labels = _labels_or_default(preds)
        capped.append(
            (
                [preds.boxes[i] for i in order],
                [preds.scores[i] for i in order],
                [labels[i] for i in order],
            )
        )

    classes = sorted({c for gt in ground_truth for c in _labels_or_default(gt)})
    if not classes:
        return {"ap50": 0.0, "mar": 0.0}

    ap_per_class, recall_per_class = [], []
    for cls in classes:
        pool = []  # (score, image_idx, box)
        num_gt = 0
        gt_boxes_per_image = []
        for img_idx, gt in enumerate(ground_truth):
            gl = _labels_or_default(gt)
            gt_boxes_per_image.append([gt.boxes[i] for i in range(len(gt)) if gl[i] == cls])
            num_gt += len(gt_boxes_per_image[-1])
            boxes, scores, labels = capped[img_idx]
            for b, s, l in zip(boxes, scores, labels):
                if l == cls:
                    pool.append((s, img_idx, b))
        pool.sort(key=lambda t: -t[0])

        matched = [set() for _ in ground_truth]
        tp_flags = np.zeros(len(pool), dtype=bool)
        for k, (_, img_idx, box) in enumerate(pool):
            best_iou, best_j = 0.0, -1
            for j, gt_box in enumerate(gt_boxes_per_image[img_idx]):
                if j in matched[img_idx]:
                    continue
                iou = box_iou(box, gt_box)
                if iou > best_iou:
                    best_iou, best_j = iou, j
            if best_j >= 0 and best_iou >= iou_thresh:
                matched[img_idx].add(best_j)
                tp_flags[k] = True

        if num_gt == 0:
            continue
        ap_per_class.append(_ap_from_pr(tp_flags, num_gt))
        recall_per_class.append(float(tp_flags.sum()) / num_gt)

    if not ap_per_class:
        return {"ap50": 0.0, "mar": 0.0}
    return {"ap50": float(np.mean(ap_per_class)), "mar": float(np.mean(recall_per_class))}


def nms(boxes: list[tuple[float, float, float, float]], scores: list[float], iou_thresh: float = 0.5) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices in score order."""
    order = sorted(range(len(boxes)), key=lambda i: -scores[i])
    keep: list[int] = []
    for i in order:
        if all(box_iou(boxes[i], boxes[j]) < iou_thresh for j in keep):
            keep.append(i)
    return keep
