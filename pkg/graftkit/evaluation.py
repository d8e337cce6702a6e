"""Task metrics: top-1 error, IoU, AP50 and NMS merging of prediction sets."""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader

from graftkit.errors import EvaluationError
from graftkit.paired_data import LabeledDataset

logger = logging.getLogger(__name__)


def _check_box(box):
    x_min, y_min, x_max, y_max = box
    if not (x_min < x_max and y_min < y_max):
        raise EvaluationError(f"invalid box {tuple(box)}: need x_min < x_max and y_min < y_max")
    return tuple(float(v) for v in box)


@dataclass(frozen=True)
class Detection:
    box: tuple
    class_id: int
    confidence: float
    image_id: object = 0

    def __post_init__(self):
        object.__setattr__(self, "box", _check_box(self.box))
        if not 0.0 <= self.confidence <= 1.0:
            raise EvaluationError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    box: tuple
    class_id: int
    image_id: object = 0

    def __post_init__(self):
        object.__setattr__(self, "box", _check_box(self.box))


def top1_error(predictions, labels):
    """Percentage of mismatches."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) != len(labels):
        raise EvaluationError(f"{len(predictions)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        raise EvaluationError("top1_error of an empty set")
    return 100.0 * float(np.mean(predictions != labels))


def iou(a, b):
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def _rank(detections):
    # sorted() is stable: equal confidences keep input order
    return sorted(detections, key=lambda d: -d.confidence)


def match_detections(ranked, ground_truths, iou_threshold=0.5):
    """Greedy one-to-one matching in rank order; each detection takes its best unmatched box."""
    by_image = {}
    for g in ground_truths:
        by_image.setdefault(g.image_id, []).append(g)
    used = {image: [False] * len(boxes) for image, boxes in by_image.items()}

    hits = []
    for det in ranked:
        candidates = by_image.get(det.image_id, [])
        best, best_iou = None, iou_threshold
        for k, g in enumerate(candidates):
            if used[det.image_id][k]:
                continue
            overlap = iou(det.box, g.box)
            if overlap >= best_iou and (best is None or overlap > best_iou):
                best, best_iou = k, overlap
        if best is not None:
            used[det.image_id][best] = True
        hits.append(best is not None)
    return hits


def average_precision(detections, ground_truths, iou_threshold=0.5):
    """All-point interpolated area under the precision-recall curve for one class."""
    if not ground_truths:
        raise EvaluationError("average precision is undefined without ground truth")
    if not detections:
        return 0.0
    hits = np.asarray(match_detections(_rank(detections), ground_truths, iou_threshold), dtype=float)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / len(ground_truths)
    precision = tp / (tp + fp)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def ap50(detections, ground_truths, iou_threshold=0.5):
    """Mean over ground-truth classes of the per-class AP at IoU >= 0.5."""
    if not ground_truths:
        raise EvaluationError("ap50 needs at least one ground-truth box")
    classes = sorted({g.class_id for g in ground_truths})
    scores = []
    for c in classes:
        scores.append(average_precision(
            [d for d in detections if d.class_id == c],
            [g for g in ground_truths if g.class_id == c],
            iou_threshold,
        ))
    logger.debug(f"Per-class AP50: {dict(zip(classes, scores))}")
    return float(np.mean(scores))


def _suppress(boxes, areas, order, iou_threshold):
    """Greedy suppression over ranked indices `order`; returns the survivors."""
    x1, y1, x2, y2 = boxes.T
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        w = np.maximum(0.0, np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]))
        h = np.maximum(0.0, np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]))
        inter = w * h
        overlap = inter / (areas[i] + areas[rest] - inter)
        order = rest[overlap <= iou_threshold]
    return keep


def nms(detections, iou_threshold=0.5):
    """Per-class greedy NMS; survivors are returned in descending confidence."""
    if not 0 < iou_threshold <= 1:
        raise EvaluationError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    ranked = _rank(detections)
    if not ranked:
        return []
    boxes = np.array([d.box for d in ranked], dtype=np.float64)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    groups = {}
    for position, det in enumerate(ranked):
        groups.setdefault((det.image_id, det.class_id), []).append(position)
    keep = []
    for positions in groups.values():
        keep.extend(_suppress(boxes, areas, np.asarray(positions), iou_threshold))
    return [ranked[k] for k in sorted(keep)]


def nms_merge(preds_a, preds_b, iou_threshold=0.5):
    """Union of two prediction sets with duplicates removed by NMS."""
    merged = nms(list(preds_a) + list(preds_b), iou_threshold)
    logger.info(f"nms_merge: {len(preds_a)} + {len(preds_b)} -> {len(merged)} detections")
    return merged


def read_detections_jsonl(path):
    """Rows with a `confidence` become Detection, rows without become GroundTruth."""
    df = pd.read_json(Path(path), lines=True, convert_dates=False)
    records = []
    for row in df.to_dict(orient="records"):
        confidence = row.get("confidence")
        image_id = row.get("image_id", 0)
        if confidence is None or (isinstance(confidence, float) and np.isnan(confidence)):
            records.append(GroundTruth(tuple(row["box"]), int(row["class_id"]), image_id))
        else:
            records.append(Detection(tuple(row["box"]), int(row["class_id"]), float(confidence), image_id))
    return records


def write_detections_jsonl(records, path):
    rows = []
    for r in records:
        row = {"image_id": r.image_id, "class_id": r.class_id, "box": list(r.box)}
        if isinstance(r, Detection):
            row["confidence"] = r.confidence
        rows.append(row)
    pd.DataFrame(rows).to_json(path, orient="records", lines=True)
    return Path(path)


@torch.no_grad()
def classify(model, samples, use="modality", batch_size=256, device="cpu"):
    """Predicted class ids and the labels, in sample order."""
    loader = DataLoader(LabeledDataset(samples, use), batch_size=batch_size, shuffle=False)
    model.eval()
    predictions, labels = [], []
    for inputs, targets in loader:
        logits = model(inputs.to(device))
        predictions.append(logits.argmax(dim=1).cpu())
        labels.append(targets)
    return torch.cat(predictions).numpy(), torch.cat(labels).numpy()


def evaluate_top1(model, samples, use="modality", batch_size=256, device="cpu"):
    predictions, labels = classify(model, samples, use, batch_size, device)
    error = top1_error(predictions, labels)
    logger.info(f"Top-1 error on {len(labels)} {use} samples: {error:.2f}%")
    return error
